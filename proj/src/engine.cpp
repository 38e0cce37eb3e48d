#include "adl/engine.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "adl/analysis.hpp"
#include "adl/error.hpp"

namespace adl {

namespace {

std::atomic<int> g_width{0};

int width_from_env() {
  if (const char* env = std::getenv("ADL_THREADS")) {
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end != env && v > 0) return static_cast<int>(std::min<long>(v, 256));
  }
  return 1;
}

}  // namespace

int reduction_width() {
  int w = g_width.load();
  if (w <= 0) {
    w = width_from_env();
    g_width.store(w);
  }
  return w;
}

void set_reduction_width(int width) { g_width.store(std::max(1, width)); }

// ---------------------------------------------------------------------------
// ParameterSet

ParameterSet ParameterSet::zeros_like(const ModelState& s) {
  ParameterSet p;
  p.embeddings = Matrix::Zero(s.embeddings.rows(), s.embeddings.cols());
  p.keys = Matrix::Zero(s.keys.rows(), s.keys.cols());
  p.query = Vector::Zero(s.query.size());
  p.head_u1 = Matrix::Zero(s.head.u1.rows(), s.head.u1.cols());
  p.head_b1 = Vector::Zero(s.head.b1.size());
  p.head_u2 = Matrix::Zero(s.head.u2.rows(), s.head.u2.cols());
  p.head_b2 = Vector::Zero(s.head.b2.size());
  if (s.conv) {
    const auto d = s.conv->emb_first.rows();
    const auto dk = s.conv->key_first.rows();
    p.conv = ConvParams{Matrix::Zero(d, d), Matrix::Zero(d, d), Matrix::Zero(dk, dk),
                        Matrix::Zero(dk, dk)};
  }
  return p;
}

std::size_t ParameterSet::parameter_count() const {
  std::size_t n = 0;
  for_each_block([&](const char*, const double*, Eigen::Index size) { n += static_cast<std::size_t>(size); });
  return n;
}

namespace {

// The model's parameters laid out like a ParameterSet, for generic visiting.
struct StateView {
  Matrix& embeddings;
  Matrix& keys;
  Vector& query;
  Matrix& head_u1;
  Vector& head_b1;
  Matrix& head_u2;
  Vector& head_b2;
  std::optional<ConvParams>& conv;

  explicit StateView(ModelState& s)
      : embeddings(s.embeddings), keys(s.keys), query(s.query), head_u1(s.head.u1),
        head_b1(s.head.b1), head_u2(s.head.u2), head_b2(s.head.b2), conv(s.conv) {}
};

bool block_frozen(const std::string& name, const ModelState& s) {
  if (name == "embeddings" || name == "conv_emb_first" || name == "conv_emb_second") {
    return s.freeze.embeddings;
  }
  if (name == "keys" || name == "conv_key_first" || name == "conv_key_second") return s.freeze.keys;
  if (name == "query") return s.freeze.query;
  return s.classifier_frozen();
}

// Per-sentence results of the forward/backward kernel. Buffers are reused
// across epochs.
struct SentenceWork {
  double loss = 0.0;
  bool correct = false;
  std::vector<double> weights;
  std::vector<double> score_grad;  // dl/ds per position
  Vector x;                        // raw context
  Vector gx;                       // dl/dx
  Vector dz;                       // dl/dlogits
  Vector hidden;                   // relu output (two-layer)
  Vector dhidden;                  // dl/d(pre-activation) (two-layer)
  Vector logits, probs;
  Vector emb_dot;                  // e_i . gx per position
};

void sentence_kernel(const ModelState& state, const Projections& proj, const Sentence& s,
                     bool backward, SentenceWork& w) {
  const auto words = std::span<const WordId>(s.words);
  const std::size_t n = proj.positions(words);
  const auto d = state.dim();
  w.weights.clear();
  double max_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    if (!proj.position_valid(words, i)) {
      w.weights.push_back(-std::numeric_limits<double>::infinity());
      continue;
    }
    const double sc = proj.score(words, i);
    w.weights.push_back(sc);
    max_score = std::max(max_score, sc);
  }
  if (!std::isfinite(max_score)) {
    throw NumericError("sentence has no valid position or a non-finite score");
  }
  double z = 0.0;
  for (double& a : w.weights) {
    a = std::isinf(a) ? 0.0 : std::exp(a - max_score);
    z += a;
  }
  w.x.setZero(d);
  for (std::size_t i = 0; i < n; ++i) {
    double& a = w.weights[i];
    a /= z;
    if (a == 0.0) continue;
    if (proj.conv) {
      w.x.noalias() += a * (proj.first_emb.row(words[i]) + proj.second_emb.row(words[i + 1])).transpose();
    } else {
      w.x.noalias() += a * proj.first_emb.row(words[i]).transpose();
    }
  }
  const auto& head = state.head;
  if (head.kind == HeadKind::kTwoLayer) {
    w.hidden = (head.u1.transpose() * w.x + head.b1).cwiseMax(0.0);
    w.logits = head.u2.transpose() * w.hidden + head.b2;
  } else {
    w.logits = head.u1.transpose() * w.x;
  }
  const double shift = w.logits.maxCoeff();
  w.probs = (w.logits.array() - shift).exp();
  const double zc = w.probs.sum();
  w.probs /= zc;
  const double log_p = (w.logits[s.label] - shift) - std::log(zc);
  w.loss = -log_p;
  Eigen::Index arg = 0;
  for (Eigen::Index j = 1; j < w.probs.size(); ++j) {
    if (w.probs[j] > w.probs[arg]) arg = j;
  }
  w.correct = arg == s.label;
  if (!std::isfinite(w.loss)) throw NumericError("non-finite loss");
  if (!backward) return;

  w.dz = w.probs;
  w.dz[s.label] -= 1.0;
  if (head.kind == HeadKind::kTwoLayer) {
    Vector pre = head.u1.transpose() * w.x + head.b1;
    w.dhidden = (head.u2 * w.dz).cwiseProduct((pre.array() > 0.0).cast<double>().matrix());
    w.gx = head.u1 * w.dhidden;
  } else {
    w.gx = head.u1 * w.dz;
  }
  const double x_dot = w.x.dot(w.gx);
  w.score_grad.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = w.weights[i];
    if (a == 0.0) continue;
    double e_dot;
    if (proj.conv) {
      e_dot = proj.first_emb.row(words[i]).dot(w.gx) + proj.second_emb.row(words[i + 1]).dot(w.gx);
    } else {
      e_dot = proj.first_emb.row(words[i]).dot(w.gx);
    }
    w.score_grad[i] = a * (e_dot - x_dot);
  }
}

template <typename F>
void parallel_for(std::size_t count, F&& body) {
  const int width = std::min<int>(reduction_width(), static_cast<int>(std::max<std::size_t>(count, 1)));
  if (width <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::vector<std::exception_ptr> errors(width);
  {
    std::vector<std::jthread> threads;
    for (int t = 0; t < width; ++t) {
      threads.emplace_back([&, t] {
        try {
          for (std::size_t i = t; i < count; i += width) body(i);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct Workspace {
  std::vector<SentenceWork> work;
};

void run_kernels(const ModelState& state, const Projections& proj, const Dataset& batch,
                 std::span<const std::size_t> order, bool backward, Workspace& ws) {
  if (ws.work.size() < order.size()) ws.work.resize(order.size());
  parallel_for(order.size(), [&](std::size_t k) {
    const auto idx = order[k];
    try {
      sentence_kernel(state, proj, batch.sentences[idx], backward, ws.work[k]);
    } catch (const NumericError& e) {
      throw NumericError(std::string(e.what()) + " (sentence " + std::to_string(idx) + ")");
    }
  });
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  return order;
}

void check_batch(const ModelState& state, const Dataset& batch) {
  if (batch.empty()) throw InvalidArgument("batch is empty");
  if (batch.vocab_size > state.vocab_size()) {
    throw InvalidArgument("dataset vocabulary (" + std::to_string(batch.vocab_size) +
                          ") exceeds the model's (" + std::to_string(state.vocab_size()) + ")");
  }
  if (batch.num_topics != state.head.num_classes()) {
    throw InvalidArgument("dataset has " + std::to_string(batch.num_topics) +
                          " classes, classifier has " + std::to_string(state.head.num_classes()));
  }
}

Gradients gradients_impl(const ModelState& state, const Dataset& batch,
                         std::span<const std::size_t> order, Workspace& ws) {
  const Projections proj = make_projections(state, batch.pad_id);
  run_kernels(state, proj, batch, order, true, ws);

  const auto n_words = static_cast<Eigen::Index>(state.vocab_size());
  const auto d = state.dim();
  const double inv = 1.0 / static_cast<double>(order.size());
  Matrix g_first = Matrix::Zero(n_words, d);
  Matrix g_second;
  Vector s_first = Vector::Zero(n_words);
  Vector s_second;
  if (proj.conv) {
    g_second = Matrix::Zero(n_words, d);
    s_second = Vector::Zero(n_words);
  }
  Gradients out;
  ParameterSet& g = out.descent;
  g = ParameterSet::zeros_like(state);
  out.context_signal.reserve(order.size());
  double loss_sum = 0.0;
  std::size_t correct = 0;

  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto& w = ws.work[k];
    const auto& words = batch.sentences[order[k]].words;
    loss_sum += w.loss;
    correct += w.correct ? 1 : 0;
    out.context_signal.push_back(w.gx);
    for (std::size_t i = 0; i < w.weights.size(); ++i) {
      const double a = w.weights[i];
      if (a == 0.0) continue;
      g_first.row(words[i]).noalias() += (inv * a) * w.gx.transpose();
      s_first[words[i]] += inv * w.score_grad[i];
      if (proj.conv) {
        g_second.row(words[i + 1]).noalias() += (inv * a) * w.gx.transpose();
        s_second[words[i + 1]] += inv * w.score_grad[i];
      }
    }
    if (state.head.kind == HeadKind::kTwoLayer) {
      g.head_u2.noalias() += inv * w.hidden * w.dz.transpose();
      g.head_b2.noalias() += inv * w.dz;
      g.head_u1.noalias() += inv * w.x * w.dhidden.transpose();
      g.head_b1.noalias() += inv * w.dhidden;
    } else {
      g.head_u1.noalias() += inv * w.x * w.dz.transpose();
    }
  }
  out.loss = loss_sum * inv;
  out.accuracy = static_cast<double>(correct) * inv;

  if (proj.conv) {
    const auto& c = *state.conv;
    g.embeddings.noalias() = g_first * c.emb_first + g_second * c.emb_second;
    g.conv->emb_first.noalias() = g_first.transpose() * state.embeddings;
    g.conv->emb_second.noalias() = g_second.transpose() * state.embeddings;
    const Vector c_first = c.key_first.transpose() * state.query;
    const Vector c_second = c.key_second.transpose() * state.query;
    g.keys.noalias() = s_first * c_first.transpose() + s_second * c_second.transpose();
    const Vector u_first = state.keys.transpose() * s_first;
    const Vector u_second = state.keys.transpose() * s_second;
    g.conv->key_first.noalias() = state.query * u_first.transpose();
    g.conv->key_second.noalias() = state.query * u_second.transpose();
    g.query.noalias() = c.key_first * u_first + c.key_second * u_second;
  } else {
    g.embeddings = std::move(g_first);
    g.keys.noalias() = s_first * state.query.transpose();
    g.query.noalias() = state.keys.transpose() * s_first;
  }
  // Descent sign.
  g.for_each_block([](const char*, double* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) data[i] = -data[i];
  });
  bool finite = true;
  g.for_each_block([&](const char*, const double* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) finite = finite && std::isfinite(data[i]);
  });
  if (!finite) throw NumericError("non-finite gradient entry");
  return out;
}

Evaluation evaluate_impl(const ModelState& state, const Dataset& data, Workspace& ws) {
  const Projections proj = make_projections(state, data.pad_id);
  const auto order = identity_order(data.size());
  run_kernels(state, proj, data, order, false, ws);
  double loss_sum = 0.0;
  std::size_t correct = 0;
  for (std::size_t k = 0; k < order.size(); ++k) {
    loss_sum += ws.work[k].loss;
    correct += ws.work[k].correct ? 1 : 0;
  }
  const double inv = 1.0 / static_cast<double>(order.size());
  return {loss_sum * inv, static_cast<double>(correct) * inv};
}

}  // namespace

Gradients compute_gradients(const ModelState& state, const Dataset& batch) {
  const auto order = identity_order(batch.size());
  return compute_gradients(state, batch, order);
}

Gradients compute_gradients(const ModelState& state, const Dataset& batch,
                            std::span<const std::size_t> order) {
  check_batch(state, batch);
  state.validate();
  if (order.empty()) throw InvalidArgument("compute_gradients: empty batch");
  Workspace ws;
  return gradients_impl(state, batch, order, ws);
}

Evaluation evaluate(const ModelState& state, const Dataset& data) {
  check_batch(state, data);
  Workspace ws;
  return evaluate_impl(state, data, ws);
}

double batch_loss(const ModelState& state, const Dataset& batch) {
  return evaluate(state, batch).loss;
}

ParameterSet finite_diff_gradients(const ModelState& state, const Dataset& batch, double eps) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) {
    throw InvalidArgument("finite_diff_gradients: eps must lie in [1e-7, 1e-3]");
  }
  check_batch(state, batch);
  ParameterSet out = ParameterSet::zeros_like(state);
  ModelState work = state;
  // FD ignores the freeze mask and the fixed-query check.
  work.freeze = FreezeMask{false, false, false, false};
  StateView view(work);
  std::vector<std::pair<double*, Eigen::Index>> params;
  auto collect = [&](const char*, double* data, Eigen::Index size) { params.emplace_back(data, size); };
  visit_blocks(view, collect);
  std::vector<std::pair<double*, Eigen::Index>> outs;
  out.for_each_block([&](const char*, double* data, Eigen::Index size) { outs.emplace_back(data, size); });
  Workspace ws;
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto [data, size] = params[b];
    for (Eigen::Index i = 0; i < size; ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double up = evaluate_impl(work, batch, ws).loss;
      data[i] = saved - eps;
      const double down = evaluate_impl(work, batch, ws).loss;
      data[i] = saved;
      outs[b].first[i] = (down - up) / (2.0 * eps);
    }
  }
  return out;
}

void apply_step(ModelState& state, const ParameterSet& direction, double step) {
  StateView view(state);
  std::vector<std::pair<double*, Eigen::Index>> dst;
  std::vector<std::string> names;
  auto collect = [&](const char* name, double* data, Eigen::Index size) {
    names.emplace_back(name);
    dst.emplace_back(data, size);
  };
  visit_blocks(view, collect);
  std::vector<const double*> src;
  std::vector<Eigen::Index> src_size;
  direction.for_each_block([&](const char*, const double* data, Eigen::Index size) {
    src.push_back(data);
    src_size.push_back(size);
  });
  if (src.size() != dst.size()) throw InvalidArgument("apply_step: parameter layout mismatch");
  for (std::size_t b = 0; b < dst.size(); ++b) {
    if (src_size[b] != dst[b].second) throw InvalidArgument("apply_step: block size mismatch");
    if (block_frozen(names[b], state)) continue;
    double* p = dst[b].first;
    const double* g = src[b];
    for (Eigen::Index i = 0; i < dst[b].second; ++i) p[i] += step * g[i];
  }
}

namespace {

template <typename F>
void zip_blocks(const ParameterSet& a, const ParameterSet& b, F&& f) {
  std::vector<std::pair<const double*, Eigen::Index>> av, bv;
  a.for_each_block([&](const char*, const double* d, Eigen::Index n) { av.emplace_back(d, n); });
  b.for_each_block([&](const char*, const double* d, Eigen::Index n) { bv.emplace_back(d, n); });
  if (av.size() != bv.size()) throw InvalidArgument("parameter layout mismatch");
  for (std::size_t k = 0; k < av.size(); ++k) {
    if (av[k].second != bv[k].second) throw InvalidArgument("parameter block size mismatch");
    for (Eigen::Index i = 0; i < av[k].second; ++i) f(av[k].first[i], bv[k].first[i]);
  }
}

}  // namespace

double max_relative_error(const ParameterSet& a, const ParameterSet& b, double floor) {
  double worst = 0.0;
  zip_blocks(a, b, [&](double x, double y) {
    const double denom = std::max({std::abs(x), std::abs(y), floor});
    worst = std::max(worst, std::abs(x - y) / denom);
  });
  return worst;
}

double max_abs_difference(const ParameterSet& a, const ParameterSet& b) {
  double worst = 0.0;
  zip_blocks(a, b, [&](double x, double y) { worst = std::max(worst, std::abs(x - y)); });
  return worst;
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw InvalidArgument("train: learning rate must be finite and non-negative");
  }
  if (max_epochs < 0) throw InvalidArgument("train: max_epochs must be >= 0");
  if (record_every <= 0) throw InvalidArgument("train: record_every must be >= 1");
  if (early_stopping.enabled && early_stopping.patience < 1) {
    throw InvalidArgument("train: early-stopping patience must be >= 1");
  }
  if (checkpoint_every < 0) throw InvalidArgument("train: checkpoint_every must be >= 0");
}

FreezeMask TrainConfig::freeze_mask(const ModelState& state) const {
  FreezeMask m;
  m.embeddings = embeddings_frozen;
  m.keys = scores_frozen;
  m.query = scores_frozen || !query_trainable;
  m.classifier = classifier_fixed || !state.head.trainable();
  return m;
}

namespace {

double stop_value(StopMetric metric, const Evaluation& train_eval, const Evaluation& test_eval) {
  switch (metric) {
    case StopMetric::kTrainLoss: return train_eval.loss;
    case StopMetric::kTestLoss: return test_eval.loss;
    case StopMetric::kTestAccuracy: return -test_eval.accuracy;
  }
  return test_eval.loss;
}

}  // namespace

TrainReport train(ModelState& state, const Dataset& train_set, const Dataset& test_set,
                  const TrainConfig& config) {
  config.validate();
  check_batch(state, train_set);
  check_batch(state, test_set);
  if (train_set.vocab_size != test_set.vocab_size) {
    throw InvalidArgument("train: train and test vocabularies differ");
  }
  state.freeze = config.freeze_mask(state);
  state.validate();

  TrainReport report;
  report.trajectory = Trajectory(config.tracked_units, background_units(state, train_set));
  const std::set<int> background_epochs(config.background_epochs.begin(),
                                        config.background_epochs.end());
  Workspace ws;
  Workspace eval_ws;
  const auto full_order = identity_order(train_set.size());
  std::vector<std::vector<std::size_t>> chunks;
  if (config.batch_size == 0 || config.batch_size >= train_set.size()) {
    chunks.push_back(full_order);
  } else {
    for (std::size_t start = 0; start < full_order.size(); start += config.batch_size) {
      const auto end = std::min(full_order.size(), start + config.batch_size);
      chunks.emplace_back(full_order.begin() + start, full_order.begin() + end);
    }
  }

  double best = std::numeric_limits<double>::infinity();
  int since_best = 0;
  int epoch = 0;
  for (;; ++epoch) {
    Gradients grads;
    Evaluation train_eval;
    try {
      if (chunks.size() == 1) {
        grads = gradients_impl(state, train_set, chunks.front(), ws);
        train_eval = {grads.loss, grads.accuracy};
      } else {
        train_eval = evaluate_impl(state, train_set, eval_ws);
      }
    } catch (const NumericError&) {
      report.diverged = true;
      break;
    }
    if (!std::isfinite(train_eval.loss) || train_eval.loss > config.max_loss) {
      report.diverged = true;
      break;
    }
    bool stop = epoch >= config.max_epochs;
    if (config.early_stopping.enabled) {
      const Evaluation test_eval = evaluate_impl(state, test_set, eval_ws);
      const double value = stop_value(config.early_stopping.metric, train_eval, test_eval);
      if (value < best) {
        best = value;
        since_best = 0;
        report.best_epoch = epoch;
      } else if (++since_best >= config.early_stopping.patience) {
        stop = true;
        report.early_stopped = true;
      }
    }
    const bool due = epoch % config.record_every == 0 || background_epochs.count(epoch) || stop;
    if (due) {
      const bool full = (config.background_at_endpoints && (epoch == 0 || stop)) ||
                        background_epochs.count(epoch) > 0;
      record_snapshot(report.trajectory, state, train_set, test_set, epoch, full, &train_eval);
    }
    if (config.on_checkpoint &&
        ((config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0) || stop)) {
      config.on_checkpoint(epoch, state);
    }
    if (stop) break;
    if (chunks.size() == 1) {
      apply_step(state, grads.descent, config.learning_rate);
    } else {
      for (const auto& chunk : chunks) {
        Gradients g = gradients_impl(state, train_set, chunk, ws);
        apply_step(state, g.descent, config.learning_rate);
      }
    }
  }
  report.epochs = epoch;
  report.last_good_epoch = report.diverged ? std::max(0, epoch - 1) : epoch;
  if (!report.diverged) {
    const Evaluation tr = evaluate_impl(state, train_set, eval_ws);
    const Evaluation te = evaluate_impl(state, test_set, eval_ws);
    report.final_train_loss = tr.loss;
    report.final_train_accuracy = tr.accuracy;
    report.final_test_loss = te.loss;
    report.final_test_accuracy = te.accuracy;
  } else {
    report.final_train_loss = std::numeric_limits<double>::quiet_NaN();
    report.final_test_loss = std::numeric_limits<double>::quiet_NaN();
  }
  if (!config.early_stopping.enabled) report.best_epoch = report.epochs;
  return report;
}

}  // namespace adl
