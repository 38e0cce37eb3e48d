#pragma once

#include <cstdint>
#include <string>

#include "adl/model.hpp"

namespace adl {

struct CheckpointInfo {
  std::uint64_t seed = 0;
  std::string config_hash;
  int epoch = 0;
};

// JSON with every matrix stored row-major next to its dimensions.
std::string model_to_json(const ModelState& state, const CheckpointInfo& info);
ModelState model_from_json(const std::string& text, CheckpointInfo* info = nullptr);

void save_model(const std::string& path, const ModelState& state, const CheckpointInfo& info);
ModelState load_model(const std::string& path, CheckpointInfo* info = nullptr);

}  // namespace adl
