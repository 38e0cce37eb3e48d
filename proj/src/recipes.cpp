#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <random>

#include "adl/analysis.hpp"
#include "adl/checkpoint.hpp"
#include "adl/error.hpp"
#include "adl/experiment.hpp"
#include "adl/theory.hpp"
#include "fileio.hpp"
#include "rng.hpp"
#include "runio.hpp"
#include "svg.hpp"

namespace adl {

using nlohmann::json;
using detail::path_join;

namespace {

namespace fs = std::filesystem;

constexpr double kSenTolerance = 0.05;
constexpr double kDriftRatio = 2e-2;
constexpr double kGradTolerance = 1e-5;
constexpr double kRequeryTolerance = 1e-12;
constexpr double kFlowTolerance = 1e-3;

ExperimentConfig config_of(const CommandRequest& req) {
  if (req.config_path) return load_config(*req.config_path, req.seed);
  return make_config(json::object(), req.seed);
}

const std::string& require_out(const CommandRequest& req, const std::string& cmd) {
  if (req.out.empty()) throw InvalidArgument(cmd + ": --out is required");
  return req.out;
}

const std::string& require_input(const CommandRequest& req, const std::string& cmd) {
  if (req.inputs.size() != 1) throw InvalidArgument(cmd + ": expects exactly one run directory");
  return req.inputs.front();
}

json units_json(const std::vector<UnitId>& units) { return json(units); }

// ---------------------------------------------------------------------------
// Run directories

struct RunData {
  std::string dir;
  json manifest;
  ExperimentConfig config;
  Dataset train;
  Dataset test;
  std::vector<UnitId> topic_units;
  int words_per_sentence = 0;
  Trajectory trajectory;
  ModelState final_state;
};

void write_manifest(const std::string& dir, const ExperimentConfig& cfg, const ExperimentData& data,
                    const std::string& command) {
  json m;
  m["command"] = command;
  m["config"] = cfg.effective;
  m["config_hash"] = cfg.hash;
  m["seed"] = cfg.seed;
  m["vocab_size"] = data.train.vocab_size;
  m["num_classes"] = data.train.num_topics;
  m["n_train"] = data.train.size();
  m["n_test"] = data.test.size();
  m["topic_units"] = units_json(data.topic_units);
  m["words_per_sentence"] = data.words_per_sentence;
  m["details"] = data.details;
  if (data.train.pad_id) m["pad_id"] = *data.train.pad_id;
  detail::write_json(path_join(dir, "manifest.json"), m);
}

void write_datasets(const std::string& dir, const ExperimentData& data) {
  write_jsonl(data.train, path_join(dir, "train.jsonl"));
  write_jsonl(data.test, path_join(dir, "test.jsonl"));
  write_vocabulary(data.train, path_join(dir, "vocab.json"));
}

RunData load_run(const std::string& dir) {
  RunData r;
  r.dir = dir;
  r.manifest = detail::read_json(path_join(dir, "manifest.json"));
  try {
    r.config = make_config(r.manifest.at("config"), std::nullopt);
    if (r.config.hash != r.manifest.at("config_hash").get<std::string>()) {
      throw ParseError(dir + ": manifest config hash does not match its config");
    }
    IngestOptions opts;
    opts.num_classes = r.manifest.at("num_classes").get<int>();
    const auto& scheme = r.config.scheme();
    if (scheme.contains("pad_token")) opts.pad_token = scheme.at("pad_token").get<std::string>();
    std::tie(r.train, r.test) =
        ingest_jsonl_pair(path_join(dir, "train.jsonl"), path_join(dir, "test.jsonl"), opts);
    const auto vocab = r.manifest.at("vocab_size").get<std::size_t>();
    if (vocab < r.train.vocab_size) throw ParseError(dir + ": datasets exceed the recorded vocabulary");
    r.train.vocab_size = r.test.vocab_size = vocab;
    if (r.manifest.contains("pad_id")) r.train.pad_id = r.test.pad_id = r.manifest["pad_id"].get<WordId>();
    r.topic_units = r.manifest.at("topic_units").get<std::vector<UnitId>>();
    r.words_per_sentence = r.manifest.at("words_per_sentence").get<int>();
  } catch (const json::exception& e) {
    throw ParseError(dir + "/manifest.json: " + e.what());
  }
  const std::string bg = path_join(dir, "backgrounds.json");
  r.trajectory = Trajectory::read(path_join(dir, "units.csv"), path_join(dir, "metrics.csv"),
                                  fs::exists(bg) ? bg : "");
  r.final_state = load_model(path_join(dir, "model_final.json"));
  return r;
}

std::vector<Checkpoint> load_checkpoints(const RunData& run) {
  std::vector<Checkpoint> out;
  const fs::path dir = fs::path(run.dir) / "checkpoints";
  if (fs::is_directory(dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".json") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      CheckpointInfo info;
      ModelState s = load_model(f.string(), &info);
      out.push_back({info.epoch, std::move(s)});
    }
  }
  if (out.empty()) {
    CheckpointInfo info;
    ModelState init = load_model(path_join(run.dir, "model_init.json"), &info);
    out.push_back({info.epoch, std::move(init)});
    out.push_back({run.trajectory.last_epoch(), run.final_state});
  }
  return out;
}

json report_json(const TrainReport& rep) {
  return {{"final_train_loss", rep.final_train_loss},
          {"final_test_loss", rep.final_test_loss},
          {"final_train_accuracy", rep.final_train_accuracy},
          {"final_test_accuracy", rep.final_test_accuracy},
          {"epochs", rep.epochs},
          {"early_stopped", rep.early_stopped},
          {"best_epoch", rep.best_epoch},
          {"diverged", rep.diverged},
          {"last_good_epoch", rep.last_good_epoch}};
}

void write_trajectory(const std::string& dir, const Trajectory& t, const std::string& prefix = "") {
  t.write_units_csv(path_join(dir, prefix + "units.csv"));
  t.write_metrics_csv(path_join(dir, prefix + "metrics.csv"));
  if (!t.backgrounds().empty()) t.write_backgrounds(path_join(dir, prefix + "backgrounds.json"));
}

void write_text(const std::string& path, const std::string& text) { detail::write_file_atomic(path, text); }

// ---------------------------------------------------------------------------
// gen-synth / gen-markov

CommandResult cmd_generate(const CommandRequest& req, const std::string& kind, const std::string& name) {
  const auto& out = require_out(req, name);
  const ExperimentConfig cfg = config_of(req);
  if (cfg.scheme_kind() != kind) {
    throw InvalidArgument(name + ": config scheme kind must be '" + kind + "'");
  }
  detail::DirLock lock(out);
  const ExperimentData data = build_data(cfg);
  write_datasets(out, data);
  write_manifest(out, cfg, data, name);
  CommandResult r;
  r.result = {{"command", name},
              {"config_hash", cfg.hash},
              {"train", data.train.size()},
              {"test", data.test.size()},
              {"vocab_size", data.train.vocab_size},
              {"topic_units", units_json(data.topic_units)},
              {"details", data.details}};
  return r;
}

// ---------------------------------------------------------------------------
// train

CommandResult cmd_train(const CommandRequest& req) {
  const auto& out = require_out(req, "train");
  const ExperimentConfig cfg = config_of(req);
  detail::DirLock lock(out);
  const ExperimentData data = build_data(cfg);
  ModelState state = init_model(cfg.model(), data.train.vocab_size, data.train.num_topics, cfg.seed);
  TrainConfig tc = cfg.train();
  tc.tracked_units = tracked_units(cfg, data, state);
  state.freeze = tc.freeze_mask(state);

  write_datasets(out, data);
  write_manifest(out, cfg, data, "train");
  save_model(path_join(out, "model_init.json"), state, {cfg.seed, cfg.hash, 0});
  if (tc.checkpoint_every > 0) {
    const std::string dir = path_join(out, "checkpoints");
    fs::create_directories(dir);
    tc.on_checkpoint = [dir, &cfg](int epoch, const ModelState& s) {
      char name[32];
      std::snprintf(name, sizeof(name), "epoch_%07d.json", epoch);
      save_model(path_join(dir, name), s, {cfg.seed, cfg.hash, epoch});
    };
  }
  const TrainReport rep = train(state, data.train, data.test, tc);
  save_model(path_join(out, "model_final.json"), state, {cfg.seed, cfg.hash, rep.epochs});
  write_trajectory(out, rep.trajectory);
  json summary = report_json(rep);
  summary["config_hash"] = cfg.hash;
  summary["seed"] = cfg.seed;
  detail::write_json(path_join(out, "train_report.json"), summary);

  CommandResult r;
  r.result = summary;
  r.result["command"] = "train";
  r.passed = !rep.diverged;
  return r;
}

// ---------------------------------------------------------------------------
// check-grad

struct GradCase {
  std::string name;
  ModelState state;
  Dataset batch;
};

GradCase random_grad_case(int index, std::uint64_t seed) {
  const HeadKind heads[] = {HeadKind::kFixedLinear, HeadKind::kTrainableLinear, HeadKind::kTwoLayer};
  ModelConfig mc;
  mc.dim = 3;
  mc.key_dim = 2;
  mc.hidden = 4;
  mc.head = heads[index % 3];
  mc.conv = (index / 6) % 2 == 1;
  mc.embedding_variance = 1.0;
  const bool query_trainable = (index / 3) % 2 == 1;
  const int classes = 2 + index % 2;
  const std::size_t vocab = 7;
  auto rng = detail::make_rng(seed, 0x9c00 + static_cast<std::uint64_t>(index));
  std::normal_distribution<double> normal(0.0, 1.0);
  GradCase c;
  c.state = init_model(mc, vocab, classes, detail::splitmix64(seed + static_cast<std::uint64_t>(index)));
  auto fill = [&](auto& m, double scale) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  };
  fill(c.state.keys, 0.7);
  fill(c.state.query, 1.0);
  if (c.state.head.kind == HeadKind::kTwoLayer) {
    fill(c.state.head.b1, 0.5);
    fill(c.state.head.b2, 0.5);
  }
  if (c.state.conv) {
    fill(c.state.conv->emb_first, 0.6);
    fill(c.state.conv->emb_second, 0.6);
    fill(c.state.conv->key_first, 0.6);
    fill(c.state.conv->key_second, 0.6);
  }
  c.state.freeze.query = !query_trainable;
  c.batch.vocab_size = vocab;
  c.batch.num_topics = classes;
  for (int k = 0; k < 4; ++k) {
    Sentence s;
    const std::size_t len = 3 + detail::uniform_index(rng, 3);
    for (std::size_t i = 0; i < len; ++i) s.words.push_back(static_cast<WordId>(detail::uniform_index(rng, vocab)));
    s.label = static_cast<int>(detail::uniform_index(rng, static_cast<std::size_t>(classes)));
    c.batch.sentences.push_back(std::move(s));
  }
  c.name = to_string(mc.head) + (query_trainable ? "/query-trainable" : "/query-fixed") +
           (mc.conv ? "/conv" : "/plain") + "/J=" + std::to_string(classes);
  return c;
}

CommandResult cmd_check_grad(const CommandRequest& req) {
  const std::uint64_t seed = req.seed.value_or(1);
  json cases = json::array();
  double worst = 0.0;
  for (int i = 0; i < 12; ++i) {
    GradCase c = random_grad_case(i, seed);
    const auto g = compute_gradients(c.state, c.batch);
    const auto fd = finite_diff_gradients(c.state, c.batch, 1e-5);
    const double err = max_relative_error(g.descent, fd);
    worst = std::max(worst, err);
    cases.push_back({{"case", c.name}, {"max_relative_error", err}, {"parameters", fd.parameter_count()}});
  }
  CommandResult r;
  r.passed = worst < kGradTolerance;
  r.result = {{"command", "check-grad"},
              {"seed", seed},
              {"epsilon", 1e-5},
              {"tolerance", kGradTolerance},
              {"max_relative_error", worst},
              {"cases", cases},
              {"passed", r.passed}};
  if (!req.out.empty()) {
    detail::DirLock lock(req.out);
    detail::write_json(path_join(req.out, "check_grad.json"), r.result);
  }
  return r;
}

// ---------------------------------------------------------------------------
// verify-sen

CommandResult cmd_verify_sen(const CommandRequest& req) {
  const std::string& run_dir = require_input(req, "verify-sen");
  const std::string out = req.out.empty() ? run_dir : req.out;
  RunData run = load_run(run_dir);
  if (run.words_per_sentence <= 0 || run.final_state.conv) {
    throw InvalidArgument("verify-sen: needs a word-level run on a synthetic corpus");
  }
  detail::DirLock lock(out);
  const int m = run.words_per_sentence;
  const int t0 = run.trajectory.epochs().front();
  const int t1 = run.trajectory.last_epoch();
  json words = json::array();
  std::string csv = "word_id,max_deviation,max_deviation_clamped,below_manifold,identity_residual,"
                    "reduced_residual\n";
  bool dev_ok = true, identity_ok = true;
  std::size_t checked = 0;
  for (UnitId u : run.topic_units) {
    if (!run.trajectory.unit_index(u)) continue;
    ++checked;
    const auto dev = sen_deviation(run.trajectory, u, m);
    json w = {{"word_id", u},
              {"max_deviation", dev.max_deviation},
              {"max_deviation_clamped", dev.max_deviation_clamped},
              {"below_manifold_epochs", dev.below_manifold_count}};
    double identity = std::nan("");
    double reduced = sen_reduced_residual(run.trajectory, static_cast<WordId>(u), m, t0, t1).normalized;
    if (run.trajectory.background(t0) && run.trajectory.background(t1)) {
      const auto terms = sen_identity_residual(run.trajectory, run.train, static_cast<WordId>(u), t0, t1);
      identity = terms.normalized;
      w["identity"] = {{"lhs", terms.lhs}, {"rhs", terms.rhs}, {"normalized", terms.normalized}};
      identity_ok = identity_ok && terms.normalized < kSenTolerance;
    }
    w["reduced_normalized"] = reduced;
    dev_ok = dev_ok && dev.max_deviation_clamped < kSenTolerance;
    words.push_back(w);
    csv += std::to_string(u) + "," + detail::format_double(dev.max_deviation) + "," +
           detail::format_double(dev.max_deviation_clamped) + "," + std::to_string(dev.below_manifold_count) +
           "," + detail::format_double(identity) + "," + detail::format_double(reduced) + "\n";
  }
  if (checked == 0) throw InvalidArgument("verify-sen: no topic word is tracked in this run");
  double s_max = 1.0;
  for (UnitId u : run.topic_units) {
    if (!run.trajectory.unit_index(u)) continue;
    for (const auto& rec : run.trajectory.series(u)) s_max = std::max(s_max, rec.score);
  }
  write_sen_curve_csv(m, s_max, 201, path_join(out, "sen_curve.csv"));
  write_text(path_join(out, "sen_table.csv"), csv);
  CommandResult r;
  r.passed = dev_ok;
  r.result = {{"command", "verify-sen"},
              {"config_hash", run.config.hash},
              {"m", m},
              {"from_epoch", t0},
              {"to_epoch", t1},
              {"tolerance", kSenTolerance},
              {"words", words},
              {"deviation_passed", dev_ok},
              {"identity_passed", identity_ok},
              {"passed", r.passed}};
  detail::write_json(path_join(out, "sen_report.json"), r.result);
  return r;
}

// ---------------------------------------------------------------------------
// verify-flow

bool same_parameters(const ModelState& a, const ModelState& b) {
  const ParameterSet pa = [&] {
    ParameterSet p = ParameterSet::zeros_like(a);
    p.embeddings = a.embeddings;
    p.keys = a.keys;
    p.query = a.query;
    p.head_u1 = a.head.u1;
    p.head_b1 = a.head.b1;
    p.head_u2 = a.head.u2;
    p.head_b2 = a.head.b2;
    p.conv = a.conv;
    return p;
  }();
  ParameterSet pb = ParameterSet::zeros_like(b);
  pb.embeddings = b.embeddings;
  pb.keys = b.keys;
  pb.query = b.query;
  pb.head_u1 = b.head.u1;
  pb.head_b1 = b.head.b1;
  pb.head_u2 = b.head.u2;
  pb.head_b2 = b.head.b2;
  pb.conv = b.conv;
  return max_abs_difference(pa, pb) == 0.0;
}

CommandResult cmd_verify_flow(const CommandRequest& req) {
  const ExperimentConfig cfg = config_of(req);
  const ExperimentData data = build_data(cfg);
  ModelState init = init_model(cfg.model(), data.train.vocab_size, data.train.num_topics, cfg.seed);
  TrainConfig tc = cfg.train();
  tc.tracked_units = data.topic_units;
  tc.record_every = 1;
  tc.early_stopping.enabled = false;
  tc.background_at_endpoints = false;
  tc.background_epochs.clear();
  init.freeze = tc.freeze_mask(init);
  const int steps = cfg.analysis().at("flow_steps").get<int>();
  if (steps < 1) throw InvalidArgument("verify-flow: flow_steps must be >= 1");

  // Euler with dt = 1 against gradient descent.
  ModelState gd = init;
  TrainConfig t1 = tc;
  t1.max_epochs = steps;
  const TrainReport gd_rep = train(gd, data.train, data.test, t1);
  FlowOptions fo;
  fo.learning_rate = tc.learning_rate;
  fo.tracked = data.topic_units;
  const FlowResult euler = integrate_gradient_flow(init, data.train, steps, 1.0, fo);
  bool scores_match = true;
  for (std::size_t k = 0; k < euler.times.size(); ++k) {
    for (std::size_t u = 0; u < fo.tracked.size(); ++u) {
      scores_match = scores_match && euler.scores[k][u] == gd_rep.trajectory.record(k, u).score;
    }
  }
  const bool bit_match = scores_match && same_parameters(gd, euler.final_state);

  // Small step: discrete GD against the dt = 0.1 flow on the same time axis.
  const double small_lr = 1e-3;
  const int small_steps = 100;
  ModelState gd_small = init;
  TrainConfig t2 = tc;
  t2.learning_rate = small_lr;
  t2.max_epochs = small_steps;
  const TrainReport small_rep = train(gd_small, data.train, data.test, t2);
  FlowOptions fs_opts = fo;
  fs_opts.learning_rate = small_lr;
  const FlowResult fine = integrate_gradient_flow(init, data.train, small_steps, 0.1, fs_opts);
  double gap = 0.0, score_scale = 0.0;
  for (std::size_t k = 0; k < fine.times.size(); ++k) {
    for (std::size_t u = 0; u < fo.tracked.size(); ++u) {
      const double s = small_rep.trajectory.record(k, u).score;
      gap = std::max(gap, std::abs(fine.scores[k][u] - s));
      score_scale = std::max(score_scale, std::abs(s));
    }
  }

  // Step halving of the flow at the configured learning rate.
  const double t_end = 10.0;
  std::vector<std::vector<double>> finals;
  for (double dt : {0.1, 0.05, 0.025}) {
    finals.push_back(integrate_gradient_flow(init, data.train, t_end, dt, fo).scores.back());
  }
  auto diff = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
  };
  const double d1 = diff(finals[0], finals[1]);
  const double d2 = diff(finals[1], finals[2]);

  CommandResult r;
  r.passed = bit_match && gap < kFlowTolerance;
  r.result = {{"command", "verify-flow"},
              {"config_hash", cfg.hash},
              {"euler_dt1_steps", steps},
              {"euler_dt1_bit_match", bit_match},
              {"small_step", {{"learning_rate", small_lr},
                              {"steps", small_steps},
                              {"dt", 0.1},
                              {"max_score_gap", gap},
                              {"max_abs_score", score_scale},
                              {"tolerance", kFlowTolerance}}},
              {"step_halving", {{"t_end", t_end},
                                {"diff_dt0.1_dt0.05", d1},
                                {"diff_dt0.05_dt0.025", d2},
                                {"observed_order", (d1 > 0 && d2 > 0) ? std::log2(d1 / d2) : 0.0},
                                {"richardson_error_dt0.05", d2}}},
              {"passed", r.passed}};
  if (!req.out.empty()) {
    detail::DirLock lock(req.out);
    detail::write_json(path_join(req.out, "verify_flow.json"), r.result);
  }
  return r;
}

// ---------------------------------------------------------------------------
// ablate

CommandResult cmd_ablate(const CommandRequest& req) {
  const auto& out = require_out(req, "ablate");
  const ExperimentConfig cfg = config_of(req);
  detail::DirLock lock(out);
  const ExperimentData data = build_data(cfg);
  if (data.topic_units.empty()) throw InvalidArgument("ablate: the corpus has no topic words");
  const auto& abl = cfg.analysis().at("ablation");
  const int epochs = abl.at("epochs").get<int>();
  const double threshold = abl.at("loss_threshold").get<double>();
  const int probe_epochs = abl.at("probe_epochs").get<int>();
  const double adv_norm = abl.at("adversarial_norm").get<double>();
  UnitId word = 0;
  if (abl.at("word").get<long long>() >= 0) {
    word = abl.at("word").get<UnitId>();
  } else {
    auto rng = detail::make_rng(cfg.seed, 0xab1a);
    word = data.topic_units[detail::uniform_index(rng, data.topic_units.size())];
  }
  const ModelState init = init_model(cfg.model(), data.train.vocab_size, data.train.num_topics, cfg.seed);
  if (init.conv) throw InvalidArgument("ablate: word-level models only");
  TrainConfig tc = cfg.train();
  tc.max_epochs = epochs;
  tc.tracked_units = data.topic_units;
  tc.background_at_endpoints = false;
  tc.background_epochs.clear();
  tc.early_stopping.enabled = false;

  auto run = [&](ModelState s, bool scores_frozen, bool embeddings_frozen, int max_epochs) {
    TrainConfig t = tc;
    t.scores_frozen = scores_frozen;
    t.embeddings_frozen = embeddings_frozen;
    t.max_epochs = max_epochs;
    TrainReport rep = train(s, data.train, data.test, t);
    return std::make_pair(std::move(rep), std::move(s));
  };
  const auto [full, full_state] = run(init, false, false, epochs);
  const auto [scores_frozen, sf_state] = run(init, true, false, epochs);
  const auto [emb_frozen, ef_state] = run(init, false, true, epochs);
  write_trajectory(out, full.trajectory, "full_");
  write_trajectory(out, scores_frozen.trajectory, "scores_frozen_");
  write_trajectory(out, emb_frozen.trajectory, "embeddings_frozen_");

  json per_word = json::array();
  std::size_t holding = 0;
  EnhancementResult chosen;
  for (UnitId u : data.topic_units) {
    const auto e = mutual_enhancement(full.trajectory, emb_frozen.trajectory, scores_frozen.trajectory, u,
                                      threshold);
    holding += e.holds ? 1 : 0;
    if (u == word) chosen = e;
    per_word.push_back({{"word_id", u},
                        {"holds", e.holds},
                        {"window_start", e.window_start},
                        {"window_end", e.window_end},
                        {"window_epochs", e.window_epochs},
                        {"convergence_epoch", e.convergence_epoch}});
  }

  // Diminution: start the word against the direction a short probe run moves it.
  const auto w = static_cast<Eigen::Index>(word);
  const auto [probe, probe_state] = run(init, false, false, probe_epochs);
  Vector dir = (probe_state.embeddings.row(w) - init.embeddings.row(w)).transpose();
  if (dir.norm() == 0.0) throw NumericError("ablate: probe run did not move the word embedding");
  dir.normalize();
  ModelState adversarial = init;
  adversarial.embeddings.row(w) = (-adv_norm / init.query_norm()) * dir.transpose();
  const auto [dim_rep, dim_state] = run(adversarial, false, false, epochs);
  write_trajectory(out, dim_rep.trajectory, "diminution_");
  const DiminutionResult dim = diminution_signature(dim_rep.trajectory, word);

  CommandResult r;
  r.passed = chosen.holds && dim.holds;
  r.result = {{"command", "ablate"},
              {"config_hash", cfg.hash},
              {"word_id", word},
              {"epochs", epochs},
              {"loss_threshold", threshold},
              {"enhancement", {{"holds", chosen.holds},
                               {"window_start", chosen.window_start},
                               {"window_end", chosen.window_end},
                               {"window_epochs", chosen.window_epochs},
                               {"convergence_epoch", chosen.convergence_epoch},
                               {"words_holding", holding},
                               {"per_word", per_word}}},
              {"diminution", {{"holds", dim.holds},
                              {"initial_score", dim.initial_score},
                              {"min_score", dim.min_score},
                              {"min_epoch", dim.min_epoch},
                              {"final_score", dim.final_score},
                              {"adversarial_norm", adv_norm},
                              {"probe_epochs", probe_epochs}}},
              {"final_train_loss", {{"full", full.final_train_loss},
                                    {"scores_frozen", scores_frozen.final_train_loss},
                                    {"embeddings_frozen", emb_frozen.final_train_loss},
                                    {"diminution", dim_rep.final_train_loss}}},
              {"passed", r.passed}};
  detail::write_json(path_join(out, "ablate.json"), r.result);
  return r;
}

// ---------------------------------------------------------------------------
// drift

json group_json(const DriftGroup& g) {
  return {{"count", g.count},
          {"max_score_change", g.max_score_change},
          {"mean_score_change", g.mean_score_change},
          {"max_norm_change", g.max_norm_change},
          {"mean_norm_change", g.mean_norm_change}};
}

json interval_json(const Interval& i) { return {{"mean", i.mean}, {"lower", i.lower}, {"upper", i.upper}}; }

CommandResult cmd_drift(const CommandRequest& req) {
  if (req.inputs.empty()) throw InvalidArgument("drift: expects one or more run directories");
  if (req.out.empty()) throw InvalidArgument("drift: --out is required");
  std::vector<DriftStats> stats;
  json runs = json::array();
  bool ok = true;
  for (const auto& dir : req.inputs) {
    RunData run = load_run(dir);
    const bool centered = run.final_state.conv.has_value();
    const std::set<UnitId> topic(run.topic_units.begin(), run.topic_units.end());
    const DriftStats d = drift_report(run.trajectory, topic, centered);
    stats.push_back(d);
    const bool pass = d.score_ratio <= kDriftRatio && d.norm_ratio <= kDriftRatio;
    ok = ok && pass;
    runs.push_back({{"run", dir},
                    {"config_hash", run.config.hash},
                    {"centered", centered},
                    {"from_epoch", d.from_epoch},
                    {"to_epoch", d.to_epoch},
                    {"topic", group_json(d.topic)},
                    {"non_topic", group_json(d.non_topic)},
                    {"score_ratio", d.score_ratio},
                    {"norm_ratio", d.norm_ratio},
                    {"passed", pass}});
  }
  detail::DirLock lock(req.out);
  CommandResult r;
  r.passed = ok;
  r.result = {{"command", "drift"}, {"threshold", kDriftRatio}, {"runs", runs}, {"passed", ok}};
  if (stats.size() >= 2) {
    const auto a = aggregate_drift(stats);
    r.result["aggregate"] = {{"runs", a.runs},
                             {"confidence", 0.95},
                             {"topic_max_score", interval_json(a.topic_max_score)},
                             {"non_topic_max_score", interval_json(a.non_topic_max_score)},
                             {"topic_max_norm", interval_json(a.topic_max_norm)},
                             {"non_topic_max_norm", interval_json(a.non_topic_max_norm)},
                             {"score_ratio", interval_json(a.score_ratio)},
                             {"norm_ratio", interval_json(a.norm_ratio)}};
  }
  std::string csv = "run,score_ratio,norm_ratio,topic_max_score,non_topic_max_score,topic_max_norm,"
                    "non_topic_max_norm\n";
  for (std::size_t i = 0; i < stats.size(); ++i) {
    const auto& d = stats[i];
    csv += std::to_string(i) + "," + detail::format_double(d.score_ratio) + "," +
           detail::format_double(d.norm_ratio) + "," + detail::format_double(d.topic.max_score_change) + "," +
           detail::format_double(d.non_topic.max_score_change) + "," +
           detail::format_double(d.topic.max_norm_change) + "," +
           detail::format_double(d.non_topic.max_norm_change) + "\n";
  }
  write_text(path_join(req.out, "drift.csv"), csv);
  detail::write_json(path_join(req.out, "drift.json"), r.result);
  return r;
}

// ---------------------------------------------------------------------------
// purity

CommandResult cmd_purity(const CommandRequest& req) {
  const std::string& run_dir = require_input(req, "purity");
  const std::string out = req.out.empty() ? run_dir : req.out;
  RunData run = load_run(run_dir);
  if (run.train.num_topics != 2) throw InvalidArgument("purity: needs a binary-label run");
  if (run.final_state.conv) throw InvalidArgument("purity: word-level models only");
  detail::DirLock lock(out);
  const auto checkpoints = load_checkpoints(run);
  const auto& probes_cfg = run.config.analysis().at("probes");
  std::vector<WordId> probes;
  std::string mode = "list";
  if (probes_cfg == "top5") {
    probes = top_scored_words(run.final_state, 5);
    mode = "top5";
  } else if (probes_cfg == "all") {
    mode = "all";
  } else {
    probes = probes_cfg.get<std::vector<WordId>>();
  }
  const auto tie_seed = run.config.analysis().at("tie_seed").get<std::uint64_t>();
  const auto dynamics = purity_dynamics(checkpoints, run.train, probes, tie_seed);

  std::string csv = "epoch,mean_purity,mean_occurrence,attended\n";
  json points = json::array();
  for (const auto& p : dynamics) {
    csv += std::to_string(p.epoch) + "," + detail::format_double(p.mean_purity) + "," +
           detail::format_double(p.mean_occurrence) + "," + std::to_string(p.attended_count) + "\n";
    points.push_back({{"epoch", p.epoch},
                      {"mean_purity", p.mean_purity},
                      {"mean_occurrence", p.mean_occurrence},
                      {"attended", p.attended_count}});
  }
  write_text(path_join(out, "purity_dynamics.csv"), csv);

  const auto stats = word_statistics(run.train);
  const Vector scores = run.final_state.word_scores();
  std::string table = "word_id,token,occurrences,negative,positive,purity,final_score\n";
  std::vector<WordId> listed = probes;
  if (listed.empty()) listed = top_scored_words(run.final_state, 20);
  for (WordId w : listed) {
    const auto& st = stats.at(w);
    const std::string token = run.train.tokens.empty() ? std::to_string(w) : run.train.tokens.at(w);
    table += std::to_string(w) + "," + token + "," + std::to_string(st.occurrence_count) + "," +
             std::to_string(st.class_counts.at(0)) + "," + std::to_string(st.class_counts.at(1)) + "," +
             (st.purity ? detail::format_double(*st.purity) : std::string("")) + "," +
             detail::format_double(scores[w]) + "\n";
  }
  write_text(path_join(out, "purity_words.csv"), table);

  CommandResult r;
  const bool purity_ok = dynamics.back().mean_purity >= dynamics.front().mean_purity;
  r.passed = purity_ok;
  r.result = {{"command", "purity"},
              {"config_hash", run.config.hash},
              {"probes", mode},
              {"probe_words", probes},
              {"dynamics", points},
              {"purity_non_decreasing", purity_ok}};
  if (run.config.scheme_kind() == "competition") {
    const auto& details = run.manifest.at("details");
    const auto impure = details.at("impure_word").get<UnitId>();
    const auto pure = details.at("pure_word").get<UnitId>();
    int overtake = -1;
    if (run.trajectory.unit_index(impure) && run.trajectory.unit_index(pure)) {
      const auto si = run.trajectory.series(impure);
      const auto sp = run.trajectory.series(pure);
      for (std::size_t k = 0; k < si.size(); ++k) {
        if (sp[k].score > si[k].score) {
          overtake = run.trajectory.epochs()[k];
          break;
        }
      }
      r.result["competition"] = {{"impure_word", impure},
                                 {"pure_word", pure},
                                 {"impure_purity", *stats.at(impure).purity},
                                 {"pure_purity", *stats.at(pure).purity},
                                 {"impure_occurrences", stats.at(impure).occurrence_count},
                                 {"pure_occurrences", stats.at(pure).occurrence_count},
                                 {"final_impure_score", si.back().score},
                                 {"final_pure_score", sp.back().score},
                                 {"overtake_epoch", overtake}};
    }
    r.passed = r.passed && overtake >= 0;
  }
  r.result["passed"] = r.passed;
  detail::write_json(path_join(out, "purity.json"), r.result);
  return r;
}

// ---------------------------------------------------------------------------
// requery

CommandResult cmd_requery(const CommandRequest& req) {
  const std::uint64_t seed = req.seed.value_or(1);
  auto rng = detail::make_rng(seed, 0x1e77a);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  const int trials = 100;
  for (int t = 0; t < trials; ++t) {
    const auto d = static_cast<Eigen::Index>(1 + detail::uniform_index(rng, 8));
    const auto n = static_cast<Eigen::Index>(1 + detail::uniform_index(rng, 50));
    Eigen::MatrixXd k(d, n);
    Eigen::VectorXd q(d), q_new(d);
    for (Eigen::Index i = 0; i < k.size(); ++i) k.data()[i] = normal(rng);
    for (Eigen::Index i = 0; i < d; ++i) q[i] = normal(rng);
    do {
      for (Eigen::Index i = 0; i < d; ++i) q_new[i] = normal(rng);
    } while (q_new.isZero());
    const Eigen::MatrixXd k_new = requery_keys(k, q, q_new);
    const double err = ((q_new.transpose() * k_new) - (q.transpose() * k)).cwiseAbs().maxCoeff();
    worst = std::max(worst, err);
  }
  Eigen::MatrixXd k(2, 2);
  k << 3, -1, 0, 0;
  const Eigen::MatrixXd ex = requery_keys(k, Eigen::Vector2d(1, 0), Eigen::Vector2d(2, 0));
  CommandResult r;
  r.passed = worst < kRequeryTolerance;
  r.result = {{"command", "requery"},
              {"seed", seed},
              {"trials", trials},
              {"max_score_error", worst},
              {"tolerance", kRequeryTolerance},
              {"example", {{"keys", {{3, -1}, {0, 0}}},
                           {"query", {1, 0}},
                           {"new_query", {2, 0}},
                           {"new_keys", {{ex(0, 0), ex(0, 1)}, {ex(1, 0), ex(1, 1)}}}}},
              {"passed", r.passed}};
  if (!req.out.empty()) {
    detail::DirLock lock(req.out);
    detail::write_json(path_join(req.out, "requery.json"), r.result);
  }
  return r;
}

// ---------------------------------------------------------------------------
// report

CommandResult cmd_report(const CommandRequest& req) {
  const std::string& run_dir = require_input(req, "report");
  const std::string out = req.out.empty() ? path_join(run_dir, "report") : req.out;
  if (fs::exists(out) && fs::exists(run_dir) && fs::equivalent(out, run_dir)) {
    throw InvalidArgument("report: --out must differ from the run directory");
  }
  RunData run = load_run(run_dir);
  detail::DirLock lock(out);
  json summary;
  summary["command"] = "report";
  summary["run"] = run_dir;
  summary["config_hash"] = run.config.hash;
  summary["seed"] = run.config.seed;
  summary["train"] = detail::read_json(path_join(run_dir, "train_report.json"));
  summary["recorded_epochs"] = run.trajectory.epochs().size();
  const bool word_level = !run.final_state.conv;
  if (run.words_per_sentence > 0 && word_level) {
    json sen = json::array();
    for (UnitId u : run.topic_units) {
      if (!run.trajectory.unit_index(u)) continue;
      const auto dev = sen_deviation(run.trajectory, u, run.words_per_sentence);
      sen.push_back({{"word_id", u}, {"max_deviation", dev.max_deviation_clamped}});
    }
    summary["sen"] = sen;
  }
  if (run.trajectory.backgrounds().size() >= 2 && !run.topic_units.empty()) {
    const std::set<UnitId> topic(run.topic_units.begin(), run.topic_units.end());
    const auto d = drift_report(run.trajectory, topic, !word_level);
    summary["drift"] = {{"score_ratio", d.score_ratio}, {"norm_ratio", d.norm_ratio}};
  }
  if (req.plot) {
    std::vector<double> ep, trl, tel;
    for (const auto& m : run.trajectory.metrics()) {
      ep.push_back(m.epoch);
      trl.push_back(m.train_loss);
      tel.push_back(m.test_loss);
    }
    write_text(path_join(out, "loss.svg"),
               detail::line_chart_svg("Loss", "epoch", "cross-entropy",
                                      {{"train", ep, trl, false}, {"test", ep, tel, true}}));
    std::vector<detail::Series> score_series, sen_series;
    double s_max = 0.0;
    for (UnitId u : run.trajectory.tracked()) {
      if (score_series.size() >= 8) break;
      std::vector<double> s, v;
      for (const auto& rec : run.trajectory.series(u)) {
        s.push_back(rec.score);
        v.push_back(rec.v_norm);
        s_max = std::max(s_max, rec.score);
      }
      score_series.push_back({"unit " + std::to_string(u), ep, s, false});
      sen_series.push_back({"unit " + std::to_string(u), s, v, false});
    }
    write_text(path_join(out, "scores.svg"), detail::line_chart_svg("Scores", "epoch", "score", score_series));
    if (run.words_per_sentence > 0 && word_level && s_max > 0.0) {
      std::vector<double> cs, cn;
      for (int i = 0; i <= 200; ++i) {
        cs.push_back(s_max * i / 200.0);
        cn.push_back(sen_norm_from_score(cs.back(), run.words_per_sentence));
      }
      sen_series.push_back({"theory", cs, cn, true});
    }
    write_text(path_join(out, "sen.svg"), detail::line_chart_svg("Score vs embedding norm", "score",
                                                                  "embedding norm", sen_series));
    summary["plots"] = {"loss.svg", "scores.svg", "sen.svg"};
  }
  detail::write_json(path_join(out, "summary.json"), summary);
  CommandResult r;
  r.result = summary;
  return r;
}

using Handler = std::function<CommandResult(const CommandRequest&)>;

const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> table = {
      {"gen-synth", [](const CommandRequest& r) { return cmd_generate(r, "synthetic", "gen-synth"); }},
      {"gen-markov", [](const CommandRequest& r) { return cmd_generate(r, "markov", "gen-markov"); }},
      {"train", cmd_train},
      {"check-grad", cmd_check_grad},
      {"verify-sen", cmd_verify_sen},
      {"verify-flow", cmd_verify_flow},
      {"ablate", cmd_ablate},
      {"drift", cmd_drift},
      {"purity", cmd_purity},
      {"requery", cmd_requery},
      {"report", cmd_report},
  };
  return table;
}

}  // namespace

CommandResult run_command(const std::string& name, const CommandRequest& request) {
  const auto& table = handlers();
  auto it = table.find(name);
  if (it == table.end()) throw InvalidArgument("unknown command '" + name + "'");
  return it->second(request);
}

std::vector<std::string> command_names() {
  std::vector<std::string> names;
  for (const auto& [name, handler] : handlers()) names.push_back(name);
  return names;
}

}  // namespace adl
