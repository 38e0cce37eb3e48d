#include "adl/trajectory.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "adl/error.hpp"
#include "fileio.hpp"

namespace adl {

namespace {

bool all_finite(const UnitRecord& r) {
  return std::isfinite(r.score) && std::isfinite(r.v_norm) && std::isfinite(r.nu_norm);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(cur);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(where + ": not a number: '" + s + "'");
  }
  return v;
}

template <typename T>
T parse_int(const std::string& s, const std::string& where) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(where + ": not an integer: '" + s + "'");
  }
  return v;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path, const std::string& header) {
  std::istringstream in(detail::read_file(path));
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw ParseError(path + ": expected header '" + header + "'");
  }
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(split_csv(line));
  }
  return rows;
}

constexpr const char* kUnitsHeader = "epoch,word_id,score,v_norm,nu_norm";
constexpr const char* kMetricsHeader = "epoch,train_loss,test_loss,train_acc,test_acc,q_norm";

}  // namespace

Trajectory::Trajectory(std::vector<UnitId> tracked, std::vector<UnitId> background_units)
    : tracked_(std::move(tracked)), background_units_(std::move(background_units)) {}

int Trajectory::last_epoch() const {
  if (epochs_.empty()) throw StateError("trajectory is empty");
  return epochs_.back();
}

void Trajectory::append(const EpochMetrics& metrics, std::vector<UnitRecord> records) {
  if (!epochs_.empty() && metrics.epoch <= epochs_.back()) {
    throw StateError("trajectory epochs must increase (got " + std::to_string(metrics.epoch) +
                     " after " + std::to_string(epochs_.back()) + ")");
  }
  if (records.size() != tracked_.size()) {
    throw StateError("trajectory: expected " + std::to_string(tracked_.size()) + " records, got " +
                     std::to_string(records.size()));
  }
  for (const auto& r : records) {
    if (!all_finite(r)) throw NumericError("trajectory: non-finite record");
  }
  epochs_.push_back(metrics.epoch);
  metrics_.push_back(metrics);
  records_.push_back(std::move(records));
}

void Trajectory::add_background(BackgroundSnapshot snapshot) {
  if (!epoch_index(snapshot.epoch)) {
    throw StateError("background snapshot for unrecorded epoch " + std::to_string(snapshot.epoch));
  }
  if (static_cast<std::size_t>(snapshot.scores.size()) != background_units_.size() ||
      static_cast<std::size_t>(snapshot.embeddings.rows()) != background_units_.size()) {
    throw StateError("background snapshot size does not match the unit list");
  }
  if (!snapshot.scores.allFinite() || !snapshot.embeddings.allFinite()) {
    throw NumericError("background snapshot has non-finite values");
  }
  if (!backgrounds_.empty() && snapshot.epoch <= backgrounds_.back().epoch) {
    throw StateError("background snapshots must be added in epoch order");
  }
  backgrounds_.push_back(std::move(snapshot));
}

std::optional<std::size_t> Trajectory::unit_index(UnitId unit) const {
  for (std::size_t i = 0; i < tracked_.size(); ++i) {
    if (tracked_[i] == unit) return i;
  }
  return std::nullopt;
}

std::optional<std::size_t> Trajectory::epoch_index(int epoch) const {
  auto it = std::lower_bound(epochs_.begin(), epochs_.end(), epoch);
  if (it == epochs_.end() || *it != epoch) return std::nullopt;
  return static_cast<std::size_t>(it - epochs_.begin());
}

const UnitRecord& Trajectory::record(std::size_t epoch_idx, std::size_t unit_idx) const {
  return records_.at(epoch_idx).at(unit_idx);
}

std::vector<UnitRecord> Trajectory::series(UnitId unit) const {
  const auto idx = unit_index(unit);
  if (!idx) throw InvalidArgument("unit " + std::to_string(unit) + " is not tracked");
  std::vector<UnitRecord> out;
  out.reserve(records_.size());
  for (const auto& row : records_) out.push_back(row[*idx]);
  return out;
}

const BackgroundSnapshot* Trajectory::background(int epoch) const {
  for (const auto& b : backgrounds_) {
    if (b.epoch == epoch) return &b;
  }
  return nullptr;
}

std::optional<std::size_t> Trajectory::background_index(UnitId unit) const {
  auto it = std::lower_bound(background_units_.begin(), background_units_.end(), unit);
  if (it == background_units_.end() || *it != unit) return std::nullopt;
  return static_cast<std::size_t>(it - background_units_.begin());
}

UnitRecord Trajectory::baseline(UnitId unit) const {
  const auto idx = unit_index(unit);
  if (!idx) throw InvalidArgument("unit " + std::to_string(unit) + " is not tracked");
  if (records_.empty()) throw StateError("trajectory is empty");
  return records_.front()[*idx];
}

void Trajectory::write_units_csv(const std::string& path) const {
  std::string out = std::string(kUnitsHeader) + "\n";
  for (std::size_t e = 0; e < epochs_.size(); ++e) {
    for (std::size_t u = 0; u < tracked_.size(); ++u) {
      const auto& r = records_[e][u];
      out += std::to_string(epochs_[e]) + "," + std::to_string(tracked_[u]) + "," +
             detail::format_double(r.score) + "," + detail::format_double(r.v_norm) + "," +
             detail::format_double(r.nu_norm) + "\n";
    }
  }
  detail::write_file_atomic(path, out);
}

void Trajectory::write_metrics_csv(const std::string& path) const {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& m : metrics_) {
    out += std::to_string(m.epoch) + "," + detail::format_double(m.train_loss) + "," +
           detail::format_double(m.test_loss) + "," + detail::format_double(m.train_accuracy) + "," +
           detail::format_double(m.test_accuracy) + "," + detail::format_double(m.query_norm) + "\n";
  }
  detail::write_file_atomic(path, out);
}

void Trajectory::write_backgrounds(const std::string& path) const {
  nlohmann::json j;
  j["units"] = background_units_;
  j["snapshots"] = nlohmann::json::array();
  for (const auto& b : backgrounds_) {
    nlohmann::json s;
    s["epoch"] = b.epoch;
    s["scores"] = std::vector<double>(b.scores.data(), b.scores.data() + b.scores.size());
    s["dim"] = b.embeddings.cols();
    s["embeddings"] =
        std::vector<double>(b.embeddings.data(), b.embeddings.data() + b.embeddings.size());
    j["snapshots"].push_back(std::move(s));
  }
  detail::write_file_atomic(path, j.dump());
}

Trajectory Trajectory::read(const std::string& units_csv, const std::string& metrics_csv,
                            const std::string& background_path) {
  const auto metric_rows = read_csv(metrics_csv, kMetricsHeader);
  const auto unit_rows = read_csv(units_csv, kUnitsHeader);

  std::vector<UnitId> tracked;
  if (!metric_rows.empty()) {
    const std::string first_epoch = metric_rows.front().at(0);
    for (const auto& row : unit_rows) {
      if (row.size() != 5) throw ParseError(units_csv + ": expected 5 columns");
      if (row[0] != first_epoch) break;
      tracked.push_back(parse_int<UnitId>(row[1], units_csv));
    }
  }
  std::vector<UnitId> bg_units;
  nlohmann::json bg;
  if (!background_path.empty()) {
    try {
      bg = nlohmann::json::parse(detail::read_file(background_path));
      bg_units = bg.at("units").get<std::vector<UnitId>>();
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(background_path + ": " + e.what());
    }
  }
  Trajectory t(tracked, bg_units);
  std::size_t u = 0;
  for (const auto& row : metric_rows) {
    if (row.size() != 6) throw ParseError(metrics_csv + ": expected 6 columns");
    EpochMetrics m;
    m.epoch = parse_int<int>(row[0], metrics_csv);
    m.train_loss = parse_double(row[1], metrics_csv);
    m.test_loss = parse_double(row[2], metrics_csv);
    m.train_accuracy = parse_double(row[3], metrics_csv);
    m.test_accuracy = parse_double(row[4], metrics_csv);
    m.query_norm = parse_double(row[5], metrics_csv);
    std::vector<UnitRecord> recs;
    for (std::size_t k = 0; k < tracked.size(); ++k, ++u) {
      if (u >= unit_rows.size()) throw ParseError(units_csv + ": truncated");
      const auto& r = unit_rows[u];
      if (parse_int<int>(r[0], units_csv) != m.epoch || parse_int<UnitId>(r[1], units_csv) != tracked[k]) {
        throw ParseError(units_csv + ": rows out of order at epoch " + std::to_string(m.epoch));
      }
      recs.push_back({parse_double(r[2], units_csv), parse_double(r[3], units_csv),
                      parse_double(r[4], units_csv)});
    }
    t.append(m, std::move(recs));
  }
  if (u != unit_rows.size()) throw ParseError(units_csv + ": rows without metrics");
  if (!background_path.empty()) {
    try {
      for (const auto& s : bg.at("snapshots")) {
        BackgroundSnapshot b;
        b.epoch = s.at("epoch").get<int>();
        const auto scores = s.at("scores").get<std::vector<double>>();
        const auto dim = s.at("dim").get<Eigen::Index>();
        const auto emb = s.at("embeddings").get<std::vector<double>>();
        b.scores = Eigen::Map<const Vector>(scores.data(), static_cast<Eigen::Index>(scores.size()));
        if (dim <= 0 || emb.size() != scores.size() * static_cast<std::size_t>(dim)) {
          throw ParseError(background_path + ": embedding block has the wrong size");
        }
        b.embeddings = Eigen::Map<const Matrix>(emb.data(), static_cast<Eigen::Index>(scores.size()), dim);
        t.add_background(std::move(b));
      }
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(background_path + ": " + e.what());
    }
  }
  return t;
}

bool Trajectory::operator==(const Trajectory& o) const {
  if (tracked_ != o.tracked_ || background_units_ != o.background_units_ || epochs_ != o.epochs_) {
    return false;
  }
  for (std::size_t i = 0; i < metrics_.size(); ++i) {
    const auto& a = metrics_[i];
    const auto& b = o.metrics_[i];
    if (a.epoch != b.epoch || a.train_loss != b.train_loss || a.test_loss != b.test_loss ||
        a.train_accuracy != b.train_accuracy || a.test_accuracy != b.test_accuracy ||
        a.query_norm != b.query_norm) {
      return false;
    }
  }
  for (std::size_t e = 0; e < records_.size(); ++e) {
    for (std::size_t u = 0; u < records_[e].size(); ++u) {
      const auto& a = records_[e][u];
      const auto& b = o.records_[e][u];
      if (a.score != b.score || a.v_norm != b.v_norm || a.nu_norm != b.nu_norm) return false;
    }
  }
  if (backgrounds_.size() != o.backgrounds_.size()) return false;
  for (std::size_t i = 0; i < backgrounds_.size(); ++i) {
    const auto& a = backgrounds_[i];
    const auto& b = o.backgrounds_[i];
    if (a.epoch != b.epoch || a.scores != b.scores || a.embeddings != b.embeddings) return false;
  }
  return true;
}

}  // namespace adl
