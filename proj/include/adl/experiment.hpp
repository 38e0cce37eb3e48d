#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "adl/corpus.hpp"
#include "adl/engine.hpp"
#include "adl/model.hpp"

namespace adl {

// A parsed experiment file. `effective` holds every setting after defaults
// are filled in; its hash identifies the run in every artifact.
struct ExperimentConfig {
  nlohmann::json effective;
  std::string hash;
  std::uint64_t seed = 1;
  std::string base_dir;  // relative ingest paths resolve against this

  std::string scheme_kind() const;
  const nlohmann::json& scheme() const { return effective.at("scheme"); }
  ModelConfig model() const;
  // Everything except tracked units and callbacks.
  TrainConfig train() const;
  const nlohmann::json& analysis() const { return effective.at("analysis"); }
};

// Fills defaults and rejects unknown keys. `seed` overrides the file's seed.
ExperimentConfig make_config(const nlohmann::json& user, std::optional<std::uint64_t> seed,
                             const std::string& base_dir = ".");
ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed);

// 64-bit FNV-1a of the canonical (sorted-key) serialization, as 16 hex digits.
std::string config_hash(const nlohmann::json& value);

struct ExperimentData {
  Dataset train;
  Dataset test;
  // Units whose presence decides the label (topic words, topic pairs, or the
  // two competing words).
  std::vector<UnitId> topic_units;
  int words_per_sentence = 0;  // synthetic corpora only
  nlohmann::json details;
};

ExperimentData build_data(const ExperimentConfig& config);

// Units the trainer should track for this config and data.
std::vector<UnitId> tracked_units(const ExperimentConfig& config, const ExperimentData& data,
                                  const ModelState& state);

struct CommandRequest {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> inputs;
  bool plot = false;
};

struct CommandResult {
  nlohmann::json result;
  bool passed = true;
};

// Runs one named recipe (gen-synth, gen-markov, train, check-grad, verify-sen,
// verify-flow, ablate, drift, purity, requery, report).
CommandResult run_command(const std::string& name, const CommandRequest& request);

std::vector<std::string> command_names();

}  // namespace adl
