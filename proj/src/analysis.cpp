#include "adl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <boost/math/distributions/students_t.hpp>

#include "adl/error.hpp"
#include "adl/theory.hpp"
#include "rng.hpp"

namespace adl {

void record_snapshot(Trajectory& trajectory, const ModelState& state, const Dataset& train_set,
                     const Dataset& test_set, int epoch, bool full_background,
                     const Evaluation* train_eval) {
  if (!trajectory.empty() && epoch <= trajectory.last_epoch()) {
    throw StateError("snapshot epoch " + std::to_string(epoch) + " is not after " +
                     std::to_string(trajectory.last_epoch()));
  }
  const Evaluation tr = train_eval ? *train_eval : evaluate(state, train_set);
  const Evaluation te = evaluate(state, test_set);
  const double qn = state.query_norm();
  EpochMetrics m{epoch, tr.loss, te.loss, tr.accuracy, te.accuracy, qn};
  std::vector<UnitRecord> recs;
  recs.reserve(trajectory.tracked().size());
  for (UnitId u : trajectory.tracked()) {
    const double nu = unit_raw_embedding(state, u).norm();
    recs.push_back({unit_score(state, u), qn * nu, nu});
  }
  trajectory.append(m, std::move(recs));
  if (full_background) {
    const auto& units = trajectory.background_units();
    BackgroundSnapshot b;
    b.epoch = epoch;
    b.scores.resize(static_cast<Eigen::Index>(units.size()));
    b.embeddings.resize(static_cast<Eigen::Index>(units.size()), state.dim());
    for (std::size_t i = 0; i < units.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      b.scores[row] = unit_score(state, units[i]);
      b.embeddings.row(row) = qn * unit_raw_embedding(state, units[i]).transpose();
    }
    trajectory.add_background(std::move(b));
  }
}

std::vector<UnitId> background_units(const ModelState& state, const Dataset& train_set) {
  std::vector<UnitId> units;
  if (!state.conv) {
    units.resize(state.vocab_size());
    std::iota(units.begin(), units.end(), UnitId{0});
    return units;
  }
  for (const auto& s : train_set.sentences) {
    for (std::size_t i = 0; i + 1 < s.words.size(); ++i) {
      if (train_set.pad_id && (s.words[i] == *train_set.pad_id || s.words[i + 1] == *train_set.pad_id)) {
        continue;
      }
      units.push_back(pair_unit(s.words[i], s.words[i + 1], state.vocab_size()));
    }
  }
  std::sort(units.begin(), units.end());
  units.erase(std::unique(units.begin(), units.end()), units.end());
  return units;
}

namespace {

void finish_group(DriftGroup& g, double score_sum, double norm_sum) {
  if (g.count > 0) {
    g.mean_score_change = score_sum / static_cast<double>(g.count);
    g.mean_norm_change = norm_sum / static_cast<double>(g.count);
  }
}

double ratio(double num, double den) {
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

}  // namespace

DriftStats drift_report(const Trajectory& trajectory, const std::set<UnitId>& topic_units,
                        bool centered) {
  if (topic_units.empty()) throw InvalidArgument("drift_report: empty topic set");
  const auto& bgs = trajectory.backgrounds();
  if (bgs.size() < 2) throw StateError("drift_report: needs at least two background snapshots");
  const auto& first = bgs.front();
  const auto& last = bgs.back();
  DriftStats out;
  out.from_epoch = first.epoch;
  out.to_epoch = last.epoch;
  double ts = 0, tn = 0, ns = 0, nn = 0;
  const auto& units = trajectory.background_units();
  for (std::size_t i = 0; i < units.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const double ds = std::abs(last.scores[r] - first.scores[r]);
    const double dn = centered ? (last.embeddings.row(r) - first.embeddings.row(r)).norm()
                               : std::abs(last.embeddings.row(r).norm() - first.embeddings.row(r).norm());
    const bool topic = topic_units.count(units[i]) > 0;
    DriftGroup& g = topic ? out.topic : out.non_topic;
    ++g.count;
    g.max_score_change = std::max(g.max_score_change, ds);
    g.max_norm_change = std::max(g.max_norm_change, dn);
    (topic ? ts : ns) += ds;
    (topic ? tn : nn) += dn;
  }
  if (out.topic.count == 0) throw InvalidArgument("drift_report: no topic unit among the background units");
  finish_group(out.topic, ts, tn);
  finish_group(out.non_topic, ns, nn);
  out.score_ratio = ratio(out.non_topic.max_score_change, out.topic.max_score_change);
  out.norm_ratio = ratio(out.non_topic.max_norm_change, out.topic.max_norm_change);
  return out;
}

Interval t_interval(std::span<const double> values, double confidence) {
  if (values.size() < 2) throw InvalidArgument("t_interval: needs at least two values");
  if (!(confidence > 0.0 && confidence < 1.0)) {
    throw InvalidArgument("t_interval: confidence must lie in (0, 1)");
  }
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(dist, 0.5 + confidence / 2.0);
  const double half = t * sd / std::sqrt(n);
  return {mean, mean - half, mean + half};
}

DriftAggregate aggregate_drift(std::span<const DriftStats> runs, double confidence) {
  DriftAggregate out;
  out.runs = runs.size();
  auto interval = [&](auto field) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(field(r));
    return t_interval(v, confidence);
  };
  out.topic_max_score = interval([](const DriftStats& r) { return r.topic.max_score_change; });
  out.non_topic_max_score = interval([](const DriftStats& r) { return r.non_topic.max_score_change; });
  out.topic_max_norm = interval([](const DriftStats& r) { return r.topic.max_norm_change; });
  out.non_topic_max_norm = interval([](const DriftStats& r) { return r.non_topic.max_norm_change; });
  out.score_ratio = interval([](const DriftStats& r) { return r.score_ratio; });
  out.norm_ratio = interval([](const DriftStats& r) { return r.norm_ratio; });
  return out;
}

namespace {

constexpr std::uint64_t kTieStream = 0x71e5;

UnitId attended_unit(const Projections& proj, std::span<const WordId> words, std::mt19937_64& rng) {
  const std::size_t n = proj.positions(words);
  double best = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> ties;
  for (std::size_t i = 0; i < n; ++i) {
    if (!proj.position_valid(words, i)) continue;
    const double s = proj.score(words, i);
    if (s > best) {
      best = s;
      ties.assign(1, i);
    } else if (s == best) {
      ties.push_back(i);
    }
  }
  if (ties.empty()) throw InvalidArgument("sentence has no valid position");
  const std::size_t pick = ties.size() == 1 ? ties.front() : ties[detail::uniform_index(rng, ties.size())];
  return proj.unit(words, pick);
}

}  // namespace

AttendedList attended_words(const ModelState& state, const Dataset& dataset, WordId probe,
                            std::uint64_t seed) {
  if (probe >= dataset.vocab_size) throw InvalidArgument("probe word out of range");
  const Projections proj = make_projections(state, dataset.pad_id);
  auto rng = detail::make_rng(seed, kTieStream);
  AttendedList out;
  out.probe = probe;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const auto& words = dataset.sentences[i].words;
    if (std::find(words.begin(), words.end(), probe) == words.end()) continue;
    out.sentences.push_back(i);
    out.attended.push_back(attended_unit(proj, words, rng));
  }
  if (out.sentences.empty()) {
    throw InvalidArgument("probe word " + std::to_string(probe) + " occurs in no sentence");
  }
  return out;
}

std::vector<UnitId> attended_all(const ModelState& state, const Dataset& dataset, std::uint64_t seed) {
  const Projections proj = make_projections(state, dataset.pad_id);
  auto rng = detail::make_rng(seed, kTieStream);
  std::vector<UnitId> out;
  out.reserve(dataset.size());
  for (const auto& s : dataset.sentences) out.push_back(attended_unit(proj, s.words, rng));
  return out;
}

std::vector<PurityPoint> purity_dynamics(std::span<const Checkpoint> checkpoints, const Dataset& dataset,
                                         std::span<const WordId> probes, std::uint64_t seed) {
  if (dataset.num_topics != 2) throw InvalidArgument("purity dynamics needs binary labels");
  const auto stats = word_statistics(dataset);
  std::vector<PurityPoint> out;
  for (const auto& cp : checkpoints) {
    if (cp.state.conv) throw InvalidArgument("purity dynamics needs a word-level model");
    std::vector<UnitId> attended;
    if (probes.empty()) {
      attended = attended_all(cp.state, dataset, seed);
    } else {
      for (WordId p : probes) {
        auto list = attended_words(cp.state, dataset, p, seed);
        attended.insert(attended.end(), list.attended.begin(), list.attended.end());
      }
    }
    PurityPoint pt;
    pt.epoch = cp.epoch;
    pt.attended_count = attended.size();
    double purity = 0.0, occurrence = 0.0;
    for (UnitId u : attended) {
      const auto& st = stats.at(static_cast<std::size_t>(u));
      purity += st.purity.value_or(0.0);
      occurrence += static_cast<double>(st.occurrence_count);
    }
    if (!attended.empty()) {
      pt.mean_purity = purity / static_cast<double>(attended.size());
      pt.mean_occurrence = occurrence / static_cast<double>(attended.size());
    }
    out.push_back(pt);
  }
  return out;
}

SenDeviation sen_deviation(const Trajectory& trajectory, UnitId unit, int m) {
  const auto series = trajectory.series(unit);
  SenDeviation out;
  out.epochs = trajectory.epochs();
  for (const auto& r : series) {
    const double rad = sen_radicand(r.score, m);
    const bool below = rad < 0.0;
    const double predicted = below ? 0.0 : std::sqrt(rad);
    const double dev = std::abs(r.v_norm - predicted) / (1.0 + r.v_norm);
    out.deviations.push_back(dev);
    out.below_manifold.push_back(below);
    if (below) {
      ++out.below_manifold_count;
    } else {
      out.max_deviation = std::max(out.max_deviation, dev);
    }
    out.max_deviation_clamped = std::max(out.max_deviation_clamped, dev);
  }
  return out;
}

std::vector<WordId> top_scored_words(const ModelState& state, std::size_t k) {
  const Vector scores = state.word_scores();
  std::vector<WordId> ids(state.vocab_size());
  std::iota(ids.begin(), ids.end(), WordId{0});
  std::stable_sort(ids.begin(), ids.end(), [&](WordId a, WordId b) { return scores[a] > scores[b]; });
  ids.resize(std::min(k, ids.size()));
  return ids;
}

EnhancementResult mutual_enhancement(const Trajectory& full, const Trajectory& embeddings_frozen,
                                     const Trajectory& scores_frozen, UnitId unit,
                                     double loss_threshold) {
  EnhancementResult out;
  const auto& epochs = full.epochs();
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    if (full.metrics()[i].train_loss < loss_threshold) {
      out.convergence_epoch = epochs[i];
      break;
    }
  }
  const auto fi = full.unit_index(unit);
  const auto ei = embeddings_frozen.unit_index(unit);
  const auto si = scores_frozen.unit_index(unit);
  if (!fi || !ei || !si) throw InvalidArgument("unit is not tracked in every trajectory");
  int run_start = -1;
  std::size_t run_len = 0;
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const int e = epochs[i];
    if (out.convergence_epoch >= 0 && e >= out.convergence_epoch) break;
    const auto ej = embeddings_frozen.epoch_index(e);
    const auto sj = scores_frozen.epoch_index(e);
    bool both = false;
    if (ej && sj) {
      const auto& f = full.record(i, *fi);
      both = f.score > embeddings_frozen.record(*ej, *ei).score &&
             f.v_norm > scores_frozen.record(*sj, *si).v_norm;
    }
    if (both) {
      if (run_len == 0) run_start = e;
      ++run_len;
      if (run_len > out.window_epochs) {
        out.window_epochs = run_len;
        out.window_start = run_start;
        out.window_end = e;
      }
    } else {
      run_len = 0;
    }
  }
  out.holds = out.window_epochs > 0;
  return out;
}

DiminutionResult diminution_signature(const Trajectory& trajectory, UnitId unit) {
  const auto series = trajectory.series(unit);
  if (series.empty()) throw StateError("trajectory is empty");
  DiminutionResult out;
  out.initial_score = series.front().score;
  out.min_score = series.front().score;
  out.min_epoch = trajectory.epochs().front();
  for (std::size_t i = 0; i < series.size(); ++i) {
    if (series[i].score < out.min_score) {
      out.min_score = series[i].score;
      out.min_epoch = trajectory.epochs()[i];
    }
  }
  out.final_score = series.back().score;
  out.holds = out.min_score < out.initial_score && out.min_score < 0.0 && out.final_score > 0.0;
  return out;
}

}  // namespace adl
