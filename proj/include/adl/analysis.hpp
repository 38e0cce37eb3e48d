#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "adl/corpus.hpp"
#include "adl/engine.hpp"
#include "adl/model.hpp"
#include "adl/trajectory.hpp"

namespace adl {

// Appends metrics and tracked-unit records for `state` at `epoch`; with
// `full_background` also stores scores and embeddings of every background
// unit. `train_eval` may carry an evaluation already computed on the train set.
void record_snapshot(Trajectory& trajectory, const ModelState& state,
                     const Dataset& train_set, const Dataset& test_set,
                     int epoch, bool full_background,
                     const Evaluation* train_eval = nullptr);

// Background units of a model: every word on the plain path, every distinct
// adjacent pair of `train_set` on the convolution path (sorted).
std::vector<UnitId> background_units(const ModelState& state,
                                     const Dataset& train_set);

struct DriftGroup {
  std::size_t count = 0;
  double max_score_change = 0.0;
  double mean_score_change = 0.0;
  double max_norm_change = 0.0;
  double mean_norm_change = 0.0;
};

struct DriftStats {
  int from_epoch = 0;
  int to_epoch = 0;
  DriftGroup topic;
  DriftGroup non_topic;
  double score_ratio = 0.0;  // non-topic max / topic max
  double norm_ratio = 0.0;
};

// Changes between the first and last full background snapshots. With
// `centered`, the embedding change is ||v(T) - v(0)|| rather than
// | ||v(T)|| - ||v(0)|| |.
DriftStats drift_report(const Trajectory& trajectory,
                        const std::set<UnitId>& topic_units,
                        bool centered = false);

struct Interval {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

// Two-sided t interval for the mean of `values` (at least two of them).
Interval t_interval(std::span<const double> values, double confidence = 0.95);

struct DriftAggregate {
  std::size_t runs = 0;
  Interval topic_max_score;
  Interval non_topic_max_score;
  Interval topic_max_norm;
  Interval non_topic_max_norm;
  Interval score_ratio;
  Interval norm_ratio;
};

DriftAggregate aggregate_drift(std::span<const DriftStats> runs,
                               double confidence = 0.95);

struct AttendedList {
  WordId probe = 0;
  std::vector<std::size_t> sentences;  // indices of sentences holding probe
  std::vector<UnitId> attended;        // one unit per such sentence
};

// Argmax-score unit of every sentence that contains `probe`. Exact ties are
// broken uniformly at random from `seed`.
AttendedList attended_words(const ModelState& state, const Dataset& dataset,
                            WordId probe, std::uint64_t seed);

// Argmax-score unit of every sentence.
std::vector<UnitId> attended_all(const ModelState& state,
                                 const Dataset& dataset, std::uint64_t seed);

struct Checkpoint {
  int epoch = 0;
  ModelState state;
};

struct PurityPoint {
  int epoch = 0;
  double mean_purity = 0.0;
  double mean_occurrence = 0.0;
  std::size_t attended_count = 0;
};

// Mean topic purity and occurrence count of attended words at each
// checkpoint. Empty `probes` pools all training sentences. Requires binary
// labels and the plain (non-convolution) model.
std::vector<PurityPoint> purity_dynamics(std::span<const Checkpoint> checkpoints,
                                         const Dataset& dataset,
                                         std::span<const WordId> probes,
                                         std::uint64_t seed);

struct SenDeviation {
  std::vector<int> epochs;
  std::vector<double> deviations;
  std::vector<bool> below_manifold;
  std::size_t below_manifold_count = 0;
  // Max over epochs on the curve.
  double max_deviation = 0.0;
  // Max including below-manifold epochs with the radicand clamped at zero.
  double max_deviation_clamped = 0.0;
};

// Per epoch |‖v‖ - f(s, m)| / (1 + ‖v‖) where f is the score/norm curve.
SenDeviation sen_deviation(const Trajectory& trajectory, UnitId unit, int m);

// Top-k words by score; ties go to the lower id.
std::vector<WordId> top_scored_words(const ModelState& state, std::size_t k);

struct EnhancementResult {
  bool holds = false;
  int convergence_epoch = -1;  // first epoch with train loss below threshold
  int window_start = -1;
  int window_end = -1;
  std::size_t window_epochs = 0;
};

// Searches, before the full model's loss first drops below `loss_threshold`,
// for epochs where the full model's score exceeds the embeddings-frozen run
// and its embedding norm exceeds the scores-frozen run.
EnhancementResult mutual_enhancement(const Trajectory& full,
                                     const Trajectory& embeddings_frozen,
                                     const Trajectory& scores_frozen,
                                     UnitId unit, double loss_threshold);

struct DiminutionResult {
  bool holds = false;
  double initial_score = 0.0;
  double min_score = 0.0;
  int min_epoch = 0;
  double final_score = 0.0;
};

// Holds when the score dips below both its initial value and zero before
// ending positive.
DiminutionResult diminution_signature(const Trajectory& trajectory, UnitId unit);

}  // namespace adl
