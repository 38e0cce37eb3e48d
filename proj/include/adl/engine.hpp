#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "adl/corpus.hpp"
#include "adl/model.hpp"
#include "adl/trajectory.hpp"

namespace adl {

template <typename Self, typename F>
void visit_blocks(Self& p, F& f) {
  f("embeddings", p.embeddings.data(), p.embeddings.size());
  f("keys", p.keys.data(), p.keys.size());
  f("query", p.query.data(), p.query.size());
  f("head_u1", p.head_u1.data(), p.head_u1.size());
  f("head_b1", p.head_b1.data(), p.head_b1.size());
  f("head_u2", p.head_u2.data(), p.head_u2.size());
  f("head_b2", p.head_b2.data(), p.head_b2.size());
  if (p.conv) {
    f("conv_emb_first", p.conv->emb_first.data(), p.conv->emb_first.size());
    f("conv_emb_second", p.conv->emb_second.data(), p.conv->emb_second.size());
    f("conv_key_first", p.conv->key_first.data(), p.conv->key_first.size());
    f("conv_key_second", p.conv->key_second.data(), p.conv->key_second.size());
  }
}

// Parameter-shaped container. Gradients uses it with the descent sign folded
// in, so an update is always `param += step * value`.
struct ParameterSet {
  Matrix embeddings;
  Matrix keys;
  Vector query;
  Matrix head_u1;
  Vector head_b1;
  Matrix head_u2;
  Vector head_b2;
  std::optional<ConvParams> conv;

  static ParameterSet zeros_like(const ModelState& state);

  // Visits every block in a fixed order as (name, data pointer, size).
  template <typename F>
  void for_each_block(F&& f) { visit_blocks(*this, f); }
  template <typename F>
  void for_each_block(F&& f) const { visit_blocks(*this, f); }

  std::size_t parameter_count() const;
};

struct Gradients {
  // -dL/dparam for the mean cross-entropy over the batch.
  ParameterSet descent;
  // Per sentence h = dl/d(raw context), before the 1/|batch| average.
  std::vector<Vector> context_signal;
  double loss = 0.0;
  double accuracy = 0.0;
};

// Closed-form gradients of the mean batch loss. Rows of words absent from the
// batch are exactly zero. Per-sentence terms may be evaluated on up to
// `reduction_width()` threads; they are always reduced in sentence order.
Gradients compute_gradients(const ModelState& state, const Dataset& batch);

// Same, over an explicit subset of sentence indices in the given order.
Gradients compute_gradients(const ModelState& state, const Dataset& batch,
                            std::span<const std::size_t> order);

// Central differences (L(p - eps) - L(p + eps)) / (2 eps) per scalar
// parameter, i.e. the same descent sign as compute_gradients.
ParameterSet finite_diff_gradients(const ModelState& state,
                                   const Dataset& batch, double eps);

// Mean loss over the batch.
double batch_loss(const ModelState& state, const Dataset& batch);

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Accuracy uses argmax with ties going to the lowest class index.
Evaluation evaluate(const ModelState& state, const Dataset& data);

// Applies `param += step * direction` to every unfrozen block.
void apply_step(ModelState& state, const ParameterSet& direction, double step);

// Max over entries of |a - b| / max(|a|, |b|, floor).
double max_relative_error(const ParameterSet& a, const ParameterSet& b,
                          double floor = 1e-4);
double max_abs_difference(const ParameterSet& a, const ParameterSet& b);

enum class StopMetric { kTestLoss, kTrainLoss, kTestAccuracy };

struct EarlyStopping {
  bool enabled = false;
  int patience = 100;
  StopMetric metric = StopMetric::kTestLoss;
};

struct TrainConfig {
  double learning_rate = 0.1;
  int max_epochs = 5000;
  std::uint64_t seed = 0;
  bool scores_frozen = false;
  bool embeddings_frozen = false;
  bool query_trainable = false;
  bool classifier_fixed = false;
  EarlyStopping early_stopping;
  int record_every = 10;
  // Units to track every `record_every` epochs. Empty means none.
  std::vector<UnitId> tracked_units;
  // Epochs (besides 0 and the final one) that get a full background snapshot.
  std::vector<int> background_epochs;
  bool background_at_endpoints = true;
  // Called with (epoch, state) every `checkpoint_every` epochs and at the end.
  int checkpoint_every = 0;
  std::function<void(int, const ModelState&)> on_checkpoint;
  // Divergence guard.
  double max_loss = 1e6;
  // 0 means full batch.
  std::size_t batch_size = 0;

  void validate() const;
  FreezeMask freeze_mask(const ModelState& state) const;
};

struct TrainReport {
  double final_train_loss = 0.0;
  double final_test_loss = 0.0;
  double final_train_accuracy = 0.0;
  double final_test_accuracy = 0.0;
  int epochs = 0;  // number of updates applied
  bool early_stopped = false;
  int best_epoch = 0;
  bool diverged = false;
  int last_good_epoch = 0;
  Trajectory trajectory;
};

// Full-batch gradient descent. Frozen blocks stay bit-identical.
TrainReport train(ModelState& state, const Dataset& train_set,
                  const Dataset& test_set, const TrainConfig& config);

// Threads used for per-sentence terms: ADL_THREADS if set, else 1.
int reduction_width();
void set_reduction_width(int width);
}  // namespace adl
