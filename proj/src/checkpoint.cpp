#include "adl/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include "adl/error.hpp"
#include "fileio.hpp"

namespace adl {

namespace {

using nlohmann::json;

template <typename M>
json matrix_json(const M& m) {
  json j;
  j["rows"] = m.rows();
  j["cols"] = m.cols();
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) data.push_back(m(r, c));
  }
  j["data"] = std::move(data);
  return j;
}

Matrix matrix_from(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<std::size_t>(rows * cols) != data.size()) {
    throw ParseError("checkpoint: matrix data does not match its dimensions");
  }
  return Eigen::Map<const Matrix>(data.data(), rows, cols);
}

Vector vector_from(const json& j) {
  Matrix m = matrix_from(j);
  if (m.cols() != 1 && m.rows() != 0) throw ParseError("checkpoint: expected a column vector");
  return Eigen::Map<const Vector>(m.data(), m.rows());
}

}  // namespace

std::string model_to_json(const ModelState& state, const CheckpointInfo& info) {
  json j;
  j["format"] = "adl-model-1";
  j["seed"] = info.seed;
  j["config_hash"] = info.config_hash;
  j["epoch"] = info.epoch;
  j["head"] = to_string(state.head.kind);
  j["freeze"] = {{"embeddings", state.freeze.embeddings},
                 {"keys", state.freeze.keys},
                 {"query", state.freeze.query},
                 {"classifier", state.freeze.classifier}};
  j["embeddings"] = matrix_json(state.embeddings);
  j["keys"] = matrix_json(state.keys);
  j["query"] = matrix_json(state.query);
  j["head_u1"] = matrix_json(state.head.u1);
  j["head_b1"] = matrix_json(state.head.b1);
  j["head_u2"] = matrix_json(state.head.u2);
  j["head_b2"] = matrix_json(state.head.b2);
  if (state.conv) {
    j["conv"] = {{"emb_first", matrix_json(state.conv->emb_first)},
                 {"emb_second", matrix_json(state.conv->emb_second)},
                 {"key_first", matrix_json(state.conv->key_first)},
                 {"key_second", matrix_json(state.conv->key_second)}};
  }
  return j.dump();
}

ModelState model_from_json(const std::string& text, CheckpointInfo* info) {
  ModelState s;
  try {
    const json j = json::parse(text);
    if (j.at("format") != "adl-model-1") throw ParseError("checkpoint: unknown format");
    if (info) {
      info->seed = j.at("seed").get<std::uint64_t>();
      info->config_hash = j.at("config_hash").get<std::string>();
      info->epoch = j.at("epoch").get<int>();
    }
    s.embeddings = matrix_from(j.at("embeddings"));
    s.keys = matrix_from(j.at("keys"));
    s.query = vector_from(j.at("query"));
    s.head.kind = head_kind_from_string(j.at("head").get<std::string>());
    s.head.u1 = matrix_from(j.at("head_u1"));
    s.head.b1 = vector_from(j.at("head_b1"));
    s.head.u2 = matrix_from(j.at("head_u2"));
    s.head.b2 = vector_from(j.at("head_b2"));
    const auto& f = j.at("freeze");
    s.freeze = {f.at("embeddings").get<bool>(), f.at("keys").get<bool>(), f.at("query").get<bool>(),
                f.at("classifier").get<bool>()};
    if (j.contains("conv")) {
      const auto& c = j.at("conv");
      s.conv = ConvParams{matrix_from(c.at("emb_first")), matrix_from(c.at("emb_second")),
                          matrix_from(c.at("key_first")), matrix_from(c.at("key_second"))};
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint: ") + e.what());
  }
  s.validate();
  return s;
}

void save_model(const std::string& path, const ModelState& state, const CheckpointInfo& info) {
  detail::write_file_atomic(path, model_to_json(state, info));
}

ModelState load_model(const std::string& path, CheckpointInfo* info) {
  return model_from_json(detail::read_file(path), info);
}

}  // namespace adl
