#include "adl/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <set>

#include "adl/analysis.hpp"
#include "adl/error.hpp"
#include "fileio.hpp"

namespace adl {

using nlohmann::json;

namespace {

json scheme_defaults(const std::string& kind) {
  if (kind == "synthetic") {
    return {{"kind", kind},           {"num_topics", 4},       {"words_per_topic", 2},
            {"dictionary_size", 5000}, {"words_per_sentence", 20}, {"with_replacement", false},
            {"n_train", 800},          {"n_test", 200}};
  }
  if (kind == "markov") {
    return {{"kind", kind},      {"dictionary_size", 200}, {"sentence_length", 10},
            {"pairs_per_topic", 2}, {"n_train", 4000},      {"n_test", 1000}};
  }
  if (kind == "competition") {
    const CompetitionScheme c;
    return {{"kind", kind},
            {"filler_dictionary_size", c.filler_dictionary_size},
            {"fillers_per_sentence", c.fillers_per_sentence},
            {"impure_positive", c.impure_positive},
            {"impure_negative", c.impure_negative},
            {"pure_with_impure", c.pure_with_impure},
            {"pure_alone", c.pure_alone},
            {"negative_anchor_words", c.negative_anchor_words},
            {"background_per_class", c.background_per_class}};
  }
  if (kind == "ingest") {
    return {{"kind", kind}, {"train", ""}, {"test", ""}};
  }
  throw InvalidArgument("config: unknown scheme kind '" + kind + "'");
}

// Keys that may appear without a default.
const std::set<std::string> kOptionalKeys = {
    "scheme.topic_a_pairs", "scheme.topic_b_pairs", "scheme.num_classes", "scheme.pad_token",
    "scheme.topic_words",   "model.key_dim",        "analysis.tie_seed"};

// Values replaced wholesale rather than merged key by key.
const std::set<std::string> kOpaqueKeys = {"train.tracked_words", "analysis.probes",
                                           "analysis.background_epochs"};

void merge(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) throw InvalidArgument("config: '" + path + "' must be an object");
  for (auto it = src.begin(); it != src.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!dst.contains(it.key())) {
      if (!kOptionalKeys.count(key)) throw InvalidArgument("config: unknown key '" + key + "'");
      dst[it.key()] = it.value();
      continue;
    }
    json& slot = dst[it.key()];
    if (slot.is_object() && !kOpaqueKeys.count(key)) {
      merge(slot, it.value(), key);
    } else {
      const bool both_numbers = slot.is_number() && it.value().is_number();
      if (!both_numbers && !kOpaqueKeys.count(key) && slot.type() != it.value().type()) {
        throw InvalidArgument("config: '" + key + "' has the wrong type");
      }
      slot = it.value();
    }
  }
}

json defaults_for(const std::string& kind) {
  const bool markov = kind == "markov";
  return {{"seed", 1},
          {"scheme", scheme_defaults(kind)},
          {"model",
           {{"dim", 15},
            {"head", "fixed_linear"},
            {"hidden", 10},
            {"conv", markov},
            {"embedding_variance", 1e-6},
            {"query_variance", 0.0}}},
          {"train",
           {{"learning_rate", kind == "competition" ? 1.0 : 0.1},
            {"max_epochs", markov ? 3000 : 5000},
            {"scores_frozen", false},
            {"embeddings_frozen", false},
            {"query_trainable", false},
            {"classifier_fixed", false},
            {"early_stopping", {{"enabled", false}, {"patience", 100}, {"metric", "test_loss"}}},
            {"record_every", 10},
            {"tracked_words", "topic"},
            {"checkpoint_every", 0},
            {"batch_size", 0}}},
          {"analysis",
           {{"background_epochs", json::array()},
            {"probes", "top5"},
            {"flow_steps", 20},
            {"ablation",
             {{"epochs", 5000},
              {"loss_threshold", 0.05},
              {"probe_epochs", 100},
              {"adversarial_norm", 0.5},
              {"word", -1}}}}}};
}

StopMetric stop_metric_from(const std::string& name) {
  if (name == "test_loss") return StopMetric::kTestLoss;
  if (name == "train_loss") return StopMetric::kTrainLoss;
  if (name == "test_accuracy") return StopMetric::kTestAccuracy;
  throw InvalidArgument("config: unknown early-stopping metric '" + name + "'");
}

template <typename T>
T positive(const json& j, const char* key) {
  const T v = j.at(key).get<T>();
  if (!(v > 0)) throw InvalidArgument(std::string("config: '") + key + "' must be positive");
  return v;
}

std::vector<WordPair> pairs_from(const json& j) {
  std::vector<WordPair> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw InvalidArgument("config: a pair must be [first, second]");
    out.emplace_back(p[0].get<WordId>(), p[1].get<WordId>());
  }
  return out;
}

}  // namespace

std::string config_hash(const json& value) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : value.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

ExperimentConfig make_config(const json& user, std::optional<std::uint64_t> seed,
                             const std::string& base_dir) {
  if (!user.is_object()) throw InvalidArgument("config: top level must be an object");
  ExperimentConfig cfg;
  try {
    std::string kind = "synthetic";
    if (user.contains("scheme") && user["scheme"].contains("kind")) {
      kind = user["scheme"]["kind"].get<std::string>();
    }
    json eff = defaults_for(kind);
    merge(eff, user, "");
    if (seed) eff["seed"] = *seed;
    auto& model = eff["model"];
    if (!model.contains("key_dim")) model["key_dim"] = model["dim"];
    auto& analysis = eff["analysis"];
    if (!analysis.contains("tie_seed")) analysis["tie_seed"] = eff["seed"];
    cfg.effective = std::move(eff);
    cfg.seed = cfg.effective.at("seed").get<std::uint64_t>();
    cfg.base_dir = base_dir;
    cfg.hash = config_hash(cfg.effective);
    // Surface type and range errors now rather than mid-run.
    (void)cfg.model();
    cfg.train().validate();
    const auto& tracked = cfg.effective["train"]["tracked_words"];
    if (!(tracked.is_array() || tracked == "topic" || tracked == "all")) {
      throw InvalidArgument("config: tracked_words must be \"topic\", \"all\" or a list of ids");
    }
    const auto& probes = cfg.analysis().at("probes");
    if (!(probes.is_array() || probes == "top5" || probes == "all")) {
      throw InvalidArgument("config: probes must be \"top5\", \"all\" or a list of ids");
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  json user;
  try {
    user = json::parse(detail::read_file(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
  const auto dir = std::filesystem::path(path).parent_path();
  return make_config(user, seed, dir.empty() ? "." : dir.string());
}

std::string ExperimentConfig::scheme_kind() const { return scheme().at("kind").get<std::string>(); }

ModelConfig ExperimentConfig::model() const {
  const auto& m = effective.at("model");
  ModelConfig c;
  c.dim = positive<int>(m, "dim");
  c.key_dim = positive<int>(m, "key_dim");
  c.head = head_kind_from_string(m.at("head").get<std::string>());
  c.hidden = positive<int>(m, "hidden");
  c.conv = m.at("conv").get<bool>();
  c.embedding_variance = m.at("embedding_variance").get<double>();
  c.query_variance = m.at("query_variance").get<double>();
  if (c.embedding_variance < 0 || c.query_variance < 0) {
    throw InvalidArgument("config: variances must be non-negative");
  }
  return c;
}

TrainConfig ExperimentConfig::train() const {
  const auto& t = effective.at("train");
  TrainConfig c;
  c.learning_rate = t.at("learning_rate").get<double>();
  c.max_epochs = t.at("max_epochs").get<int>();
  c.seed = seed;
  c.scores_frozen = t.at("scores_frozen").get<bool>();
  c.embeddings_frozen = t.at("embeddings_frozen").get<bool>();
  c.query_trainable = t.at("query_trainable").get<bool>();
  c.classifier_fixed = t.at("classifier_fixed").get<bool>();
  const auto& es = t.at("early_stopping");
  c.early_stopping.enabled = es.at("enabled").get<bool>();
  c.early_stopping.patience = es.at("patience").get<int>();
  c.early_stopping.metric = stop_metric_from(es.at("metric").get<std::string>());
  c.record_every = t.at("record_every").get<int>();
  c.checkpoint_every = t.at("checkpoint_every").get<int>();
  c.batch_size = t.at("batch_size").get<std::size_t>();
  c.background_epochs = analysis().at("background_epochs").get<std::vector<int>>();
  if (!(c.learning_rate > 0)) throw InvalidArgument("config: learning_rate must be positive");
  return c;
}

ExperimentData build_data(const ExperimentConfig& config) {
  const auto& s = config.scheme();
  const std::string kind = config.scheme_kind();
  ExperimentData out;
  try {
    if (kind == "synthetic") {
      TopicScheme scheme = TopicScheme::contiguous(
          positive<int>(s, "num_topics"), positive<int>(s, "words_per_topic"),
          positive<int>(s, "dictionary_size"), s.at("words_per_sentence").get<int>());
      scheme.with_replacement = s.at("with_replacement").get<bool>();
      std::tie(out.train, out.test) = generate_synthetic(
          scheme, positive<std::size_t>(s, "n_train"), positive<std::size_t>(s, "n_test"), config.seed);
      for (WordId w : scheme.topic_words()) out.topic_units.push_back(w);
      out.words_per_sentence = scheme.words_per_sentence;
      out.details["topic_words"] = scheme.topic_word_sets;
    } else if (kind == "markov") {
      MarkovPairScheme scheme;
      if (s.contains("topic_a_pairs") || s.contains("topic_b_pairs")) {
        scheme.dictionary_size = positive<int>(s, "dictionary_size");
        scheme.sentence_length = s.at("sentence_length").get<int>();
        scheme.topic_a_pairs = pairs_from(s.at("topic_a_pairs"));
        scheme.topic_b_pairs = pairs_from(s.at("topic_b_pairs"));
      } else {
        scheme = MarkovPairScheme::random(positive<int>(s, "dictionary_size"),
                                          s.at("sentence_length").get<int>(),
                                          positive<int>(s, "pairs_per_topic"), config.seed);
      }
      std::tie(out.train, out.test) = generate_markov_pairs(
          scheme, positive<std::size_t>(s, "n_train"), positive<std::size_t>(s, "n_test"), config.seed);
      for (int topic = 0; topic < 2; ++topic) {
        for (const auto& [a, b] : scheme.pairs(topic)) {
          out.topic_units.push_back(pair_unit(a, b, out.train.vocab_size));
        }
      }
      auto pairs_json = [](const std::vector<WordPair>& ps) {
        json arr = json::array();
        for (const auto& [a, b] : ps) arr.push_back({a, b});
        return arr;
      };
      out.details["topic_a_pairs"] = pairs_json(scheme.topic_a_pairs);
      out.details["topic_b_pairs"] = pairs_json(scheme.topic_b_pairs);
    } else if (kind == "competition") {
      CompetitionScheme scheme;
      scheme.filler_dictionary_size = s.at("filler_dictionary_size").get<int>();
      scheme.fillers_per_sentence = s.at("fillers_per_sentence").get<int>();
      scheme.impure_positive = s.at("impure_positive").get<int>();
      scheme.impure_negative = s.at("impure_negative").get<int>();
      scheme.pure_with_impure = s.at("pure_with_impure").get<int>();
      scheme.pure_alone = s.at("pure_alone").get<int>();
      scheme.negative_anchor_words = s.at("negative_anchor_words").get<int>();
      scheme.background_per_class = s.at("background_per_class").get<int>();
      std::tie(out.train, out.test) = generate_competition(scheme, config.seed);
      out.topic_units = {scheme.impure_word(), scheme.pure_word()};
      out.details["impure_word"] = scheme.impure_word();
      out.details["pure_word"] = scheme.pure_word();
    } else if (kind == "ingest") {
      IngestOptions opts;
      if (s.contains("num_classes")) opts.num_classes = s.at("num_classes").get<int>();
      if (s.contains("pad_token")) opts.pad_token = s.at("pad_token").get<std::string>();
      auto resolve = [&](const std::string& p) {
        if (p.empty()) throw InvalidArgument("config: ingest needs 'train' and 'test' paths");
        const std::filesystem::path path(p);
        return path.is_absolute() ? p : (std::filesystem::path(config.base_dir) / path).string();
      };
      std::tie(out.train, out.test) = ingest_jsonl_pair(resolve(s.at("train").get<std::string>()),
                                                        resolve(s.at("test").get<std::string>()), opts);
      if (s.contains("topic_words")) {
        for (const auto& w : s.at("topic_words")) {
          if (w.is_string()) {
            const auto& toks = out.train.tokens;
            auto it = std::find(toks.begin(), toks.end(), w.get<std::string>());
            if (it == toks.end()) throw InvalidArgument("config: unknown topic word " + w.dump());
            out.topic_units.push_back(static_cast<UnitId>(it - toks.begin()));
          } else {
            out.topic_units.push_back(w.get<UnitId>());
          }
        }
      }
    }
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
  return out;
}

std::vector<UnitId> tracked_units(const ExperimentConfig& config, const ExperimentData& data,
                                  const ModelState& state) {
  const auto& t = config.effective.at("train").at("tracked_words");
  if (t == "topic") return data.topic_units;
  if (t == "all") return background_units(state, data.train);
  auto ids = t.get<std::vector<UnitId>>();
  const UnitId limit = state.conv ? static_cast<UnitId>(state.vocab_size() * state.vocab_size())
                                  : static_cast<UnitId>(state.vocab_size());
  for (UnitId u : ids) {
    if (u >= limit) throw InvalidArgument("config: tracked unit " + std::to_string(u) + " out of range");
  }
  return ids;
}

}  // namespace adl
