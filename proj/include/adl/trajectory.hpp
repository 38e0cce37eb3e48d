#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "adl/model.hpp"

namespace adl {

struct UnitRecord {
  double score = 0.0;
  double v_norm = 0.0;   // ||q|| * ||nu||
  double nu_norm = 0.0;
};

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  double query_norm = 0.0;
};

// Scores and scaled embeddings of every background unit at one epoch.
struct BackgroundSnapshot {
  int epoch = 0;
  Vector scores;
  Matrix embeddings;  // units x d, scaled (v)
};

// Per-epoch records of tracked units plus optional full snapshots. Epochs are
// strictly increasing and every stored value is finite.
class Trajectory {
 public:
  Trajectory() = default;
  Trajectory(std::vector<UnitId> tracked, std::vector<UnitId> background_units);

  const std::vector<UnitId>& tracked() const { return tracked_; }
  const std::vector<UnitId>& background_units() const { return background_units_; }
  const std::vector<int>& epochs() const { return epochs_; }
  const std::vector<EpochMetrics>& metrics() const { return metrics_; }
  const std::vector<BackgroundSnapshot>& backgrounds() const { return backgrounds_; }
  bool empty() const { return epochs_.empty(); }
  int last_epoch() const;

  // Throws StateError unless `epoch` exceeds the last recorded one and
  // `records` has one entry per tracked unit.
  void append(const EpochMetrics& metrics, std::vector<UnitRecord> records);
  // The epoch must already be recorded via append.
  void add_background(BackgroundSnapshot snapshot);

  std::optional<std::size_t> unit_index(UnitId unit) const;
  std::optional<std::size_t> epoch_index(int epoch) const;
  const UnitRecord& record(std::size_t epoch_idx, std::size_t unit_idx) const;
  std::vector<UnitRecord> series(UnitId unit) const;
  const BackgroundSnapshot* background(int epoch) const;
  std::optional<std::size_t> background_index(UnitId unit) const;

  // Initial values used to center quantities (first recorded epoch).
  UnitRecord baseline(UnitId unit) const;

  void write_units_csv(const std::string& path) const;
  void write_metrics_csv(const std::string& path) const;
  void write_backgrounds(const std::string& path) const;

  // Rebuilds a trajectory from the three files above. The background file is
  // optional (empty path skips it).
  static Trajectory read(const std::string& units_csv,
                         const std::string& metrics_csv,
                         const std::string& background_path);

  bool operator==(const Trajectory&) const;

 private:
  std::vector<UnitId> tracked_;
  std::vector<UnitId> background_units_;
  std::vector<int> epochs_;
  std::vector<EpochMetrics> metrics_;
  std::vector<std::vector<UnitRecord>> records_;  // [epoch][unit]
  std::vector<BackgroundSnapshot> backgrounds_;
};

}  // namespace adl
