#include "adl/theory.hpp"

#include <cmath>
#include <limits>

#include "adl/error.hpp"
#include "fileio.hpp"

namespace adl {

double sen_radicand(double score, int m) {
  if (m <= 0) throw InvalidArgument("m must be positive");
  const double inv_m = 1.0 / static_cast<double>(m);
  // expm1 keeps the radicand accurate near s = 0.
  return 2.0 * (score + std::expm1(score) * inv_m);
}

double sen_norm_from_score(double score, int m) {
  if (!std::isfinite(score)) throw InvalidArgument("score must be finite");
  const double r = sen_radicand(score, m);
  if (r < 0.0) {
    throw DomainError("score " + detail::format_double(score) + " lies below the initial manifold");
  }
  return std::sqrt(r);
}

double sen_score_from_norm(double norm, int m, double tol) {
  if (!(norm >= 0.0) || !std::isfinite(norm)) throw InvalidArgument("norm must be finite and >= 0");
  if (!(tol > 0.0)) throw InvalidArgument("tolerance must be positive");
  if (m <= 0) throw InvalidArgument("m must be positive");
  if (norm == 0.0) return 0.0;
  double lo = 0.0;
  double hi = 1.0;
  while (sen_norm_from_score(hi, m) < norm) {
    lo = hi;
    hi *= 2.0;
    if (!std::isfinite(sen_norm_from_score(hi, m))) break;
  }
  for (int it = 0; it < 4000; ++it) {
    const double mid = 0.5 * (lo + hi);
    const double f = sen_norm_from_score(mid, m);
    if (std::abs(f - norm) < tol || mid == lo || mid == hi) return mid;
    (f < norm ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

void write_sen_curve_csv(int m, double s_max, int points, const std::string& path) {
  if (points < 2) throw InvalidArgument("curve needs at least two points");
  if (!(s_max > 0.0)) throw InvalidArgument("s_max must be positive");
  std::string out = "s,norm\n";
  for (int i = 0; i < points; ++i) {
    const double s = s_max * i / (points - 1);
    out += detail::format_double(s) + "," + detail::format_double(sen_norm_from_score(s, m)) + "\n";
  }
  detail::write_file_atomic(path, out);
}

BackgroundMeans background_means(const Trajectory& trajectory, const BackgroundSnapshot& snapshot,
                                 const Dataset& dataset, WordId word) {
  BackgroundMeans out;
  out.mean_context = Vector::Zero(snapshot.embeddings.cols());
  for (const auto& s : dataset.sentences) {
    bool has = false;
    for (WordId w : s.words) has = has || w == word;
    if (!has) continue;
    double z = 0.0;
    Vector ctx = Vector::Zero(snapshot.embeddings.cols());
    for (WordId w : s.words) {
      if (w == word || (dataset.pad_id && w == *dataset.pad_id)) continue;
      const auto idx = trajectory.background_index(w);
      if (!idx) throw StateError("background snapshot lacks word " + std::to_string(w));
      const auto r = static_cast<Eigen::Index>(*idx);
      const double e = std::exp(snapshot.scores[r]);
      z += e;
      ctx.noalias() += e * snapshot.embeddings.row(r).transpose();
    }
    if (z == 0.0) continue;
    out.mean_inverse_partition += 1.0 / z;
    out.mean_context += ctx / z;
    ++out.sentences;
  }
  if (out.sentences == 0) {
    throw InvalidArgument("word " + std::to_string(word) + " has no sentence with other words");
  }
  out.mean_inverse_partition /= static_cast<double>(out.sentences);
  out.mean_context /= static_cast<double>(out.sentences);
  return out;
}

namespace {

const BackgroundSnapshot& require_background(const Trajectory& t, int epoch) {
  const auto* b = t.background(epoch);
  if (!b) throw StateError("no background snapshot at epoch " + std::to_string(epoch));
  return *b;
}

IdentityTerms make_terms(double lhs, double rhs) {
  IdentityTerms out;
  out.lhs = lhs;
  out.rhs = rhs;
  out.residual = lhs - rhs;
  out.normalized = std::abs(out.residual) / (1.0 + std::abs(lhs));
  return out;
}

}  // namespace

IdentityTerms sen_identity_residual(const Trajectory& trajectory, const Dataset& dataset, WordId word,
                                    int t0, int t1) {
  const auto idx = trajectory.background_index(word);
  if (!idx) throw InvalidArgument("word " + std::to_string(word) + " is not a background unit");
  const auto r = static_cast<Eigen::Index>(*idx);
  auto side = [&](int epoch, double& lhs, double& rhs) {
    const auto& b = require_background(trajectory, epoch);
    const auto means = background_means(trajectory, b, dataset, word);
    const double s = b.scores[r];
    lhs = s + std::exp(s) * means.mean_inverse_partition;
    rhs = 0.5 * (b.embeddings.row(r).transpose() - means.mean_context).squaredNorm();
  };
  double l0, r0, l1, r1;
  side(t0, l0, r0);
  side(t1, l1, r1);
  return make_terms(l1 - l0, r1 - r0);
}

IdentityTerms sen_reduced_residual(const Trajectory& trajectory, WordId word, int m, int t0, int t1) {
  if (m <= 0) throw InvalidArgument("m must be positive");
  const auto u = trajectory.unit_index(word);
  if (!u) throw InvalidArgument("word " + std::to_string(word) + " is not tracked");
  const auto e0 = trajectory.epoch_index(t0);
  const auto e1 = trajectory.epoch_index(t1);
  if (!e0 || !e1) throw StateError("epoch not recorded");
  auto lhs = [&](std::size_t e) {
    const double s = trajectory.record(e, *u).score;
    return s + std::exp(s) / m;
  };
  auto rhs = [&](std::size_t e) {
    const double v = trajectory.record(e, *u).v_norm;
    return 0.5 * v * v;
  };
  return make_terms(lhs(*e1) - lhs(*e0), rhs(*e1) - rhs(*e0));
}

FlowResult integrate_gradient_flow(const ModelState& state, const Dataset& dataset, double t_end,
                                   double dt, const FlowOptions& options) {
  if (!(t_end >= 0.0) || !std::isfinite(t_end)) throw InvalidArgument("t_end must be finite and >= 0");
  if (t_end > 0.0 && !(dt > 0.0 && dt <= t_end)) throw InvalidArgument("dt must lie in (0, t_end]");
  if (!(options.record_interval > 0.0)) throw InvalidArgument("record interval must be positive");
  FlowResult out;
  out.tracked = options.tracked;
  ModelState cur = state;
  if (!options.use_state_freeze) cur.freeze = options.freeze;
  cur.validate();

  auto record = [&](double t) {
    out.times.push_back(t);
    std::vector<double> s, v;
    const double qn = cur.query_norm();
    for (UnitId u : out.tracked) {
      s.push_back(unit_score(cur, u));
      v.push_back(qn * unit_raw_embedding(cur, u).norm());
    }
    out.scores.push_back(std::move(s));
    out.v_norms.push_back(std::move(v));
    if (options.keep_states) out.states.push_back(cur);
  };
  record(0.0);
  if (t_end == 0.0) {
    out.final_state = cur;
    return out;
  }
  const auto steps = static_cast<long>(std::ceil(t_end / dt - 1e-9));
  const double lr = options.learning_rate;
  long next_record = 1;
  for (long k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) * dt;
    const double h = std::min(dt, t_end - t);
    if (options.method == FlowMethod::kEuler) {
      const auto g = compute_gradients(cur, dataset);
      apply_step(cur, g.descent, lr * h);
    } else {
      const auto k1 = compute_gradients(cur, dataset).descent;
      ModelState x = cur;
      apply_step(x, k1, lr * h / 2);
      const auto k2 = compute_gradients(x, dataset).descent;
      x = cur;
      apply_step(x, k2, lr * h / 2);
      const auto k3 = compute_gradients(x, dataset).descent;
      x = cur;
      apply_step(x, k3, lr * h);
      const auto k4 = compute_gradients(x, dataset).descent;
      apply_step(cur, k1, lr * h / 6);
      apply_step(cur, k2, lr * h / 3);
      apply_step(cur, k3, lr * h / 3);
      apply_step(cur, k4, lr * h / 6);
    }
    const double t_next = (k + 1 == steps) ? t_end : static_cast<double>(k + 1) * dt;
    if (k + 1 == steps || t_next + 1e-9 >= next_record * options.record_interval) {
      record(t_next);
      while (next_record * options.record_interval <= t_next + 1e-9) ++next_record;
    }
  }
  out.final_state = std::move(cur);
  return out;
}

Eigen::MatrixXd requery_keys(const Eigen::MatrixXd& keys, const Eigen::VectorXd& query,
                             const Eigen::VectorXd& new_query) {
  if (keys.rows() != query.size() || new_query.size() != query.size()) {
    throw InvalidArgument("requery_keys: dimension mismatch");
  }
  Eigen::Index j = 0;
  while (j < new_query.size() && new_query[j] == 0.0) ++j;
  if (j == new_query.size()) throw InvalidArgument("requery_keys: new query is zero");
  const Eigen::RowVectorXd scores = query.transpose() * keys;
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(keys.rows(), keys.cols());
  out.row(j) = scores / new_query[j];
  return out;
}

RescaledUpdate rescaled_update(const ModelState& state, const Dataset& dataset, double eta) {
  if (state.conv) throw InvalidArgument("rescaled_update: word-level models only");
  if (!state.freeze.query) throw InvalidArgument("rescaled_update: the query must be fixed");
  if (dataset.empty()) throw InvalidArgument("rescaled_update: empty dataset");
  const Projections proj = make_projections(state, dataset.pad_id);
  const double qn = state.query_norm();
  const auto n = static_cast<Eigen::Index>(state.vocab_size());
  RescaledUpdate out{Matrix::Zero(n, state.dim()), Vector::Zero(n)};
  const double c = eta / static_cast<double>(dataset.size());
  const auto& head = state.head;
  for (const auto& s : dataset.sentences) {
    const auto trace = attention_forward(state, proj, s.words, s.label);
    Vector err = trace.head.probabilities;
    err[s.label] -= 1.0;
    Vector h;
    if (head.kind == HeadKind::kTwoLayer) {
      const Vector gate = (trace.head.hidden_pre.array() > 0.0).cast<double>().matrix();
      h = -(head.u1 * (head.u2 * err).cwiseProduct(gate));
    } else {
      h = -(head.u1 * err);
    }
    for (std::size_t i = 0; i < trace.units.size(); ++i) {
      const auto w = static_cast<Eigen::Index>(trace.units[i]);
      const double a = trace.weights[i];
      const Vector v = qn * state.embeddings.row(w).transpose();
      out.delta_v.row(w).noalias() += (c * a) * h.transpose();
      out.delta_s[w] += c * a * (v - trace.context).dot(h);
    }
  }
  return out;
}

}  // namespace adl
