#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "adl/error.hpp"
#include "adl/experiment.hpp"
#include "helpers.hpp"
#include "runio.hpp"

using namespace adl;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json small_synthetic() {
  return {{"scheme",
           {{"kind", "synthetic"},
            {"dictionary_size", 60},
            {"words_per_sentence", 8},
            {"n_train", 80},
            {"n_test", 20}}},
          {"train", {{"max_epochs", 40}}}};
}

std::string write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  testing::write_text(p, j.dump(2));
  return p.string();
}

std::size_t line_count(const fs::path& p) {
  const auto t = testing::slurp(p);
  return static_cast<std::size_t>(std::count(t.begin(), t.end(), '\n'));
}

int run_cli(const std::string& args, const fs::path& err) {
  const std::string cmd = std::string(ADL_CLI_PATH) + " " + args + " > /dev/null 2> " + err.string();
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("config parsing") {
  const auto c = make_config(small_synthetic(), std::nullopt);
  CHECK(c.scheme_kind() == "synthetic");
  CHECK(c.effective["scheme"]["num_topics"] == 4);
  CHECK(c.effective["model"]["dim"] == 15);
  CHECK(c.seed == 1);
  CHECK(c.train().max_epochs == 40);
  CHECK(c.hash.size() == 16);

  CHECK(make_config(small_synthetic(), std::nullopt).hash == c.hash);
  auto changed = small_synthetic();
  changed["train"]["learning_rate"] = 0.2;
  CHECK(make_config(changed, std::nullopt).hash != c.hash);
  CHECK(make_config(small_synthetic(), 7).seed == 7);
  CHECK(make_config(small_synthetic(), 7).hash != c.hash);

  auto unknown = small_synthetic();
  unknown["train"]["momentum"] = 0.9;
  CHECK_THROWS_AS(make_config(unknown, std::nullopt), InvalidArgument);
  auto wrong = small_synthetic();
  wrong["model"]["head"] = 3;
  CHECK_THROWS_AS(make_config(wrong, std::nullopt), InvalidArgument);
  auto kind = small_synthetic();
  kind["scheme"]["kind"] = "poetry";
  CHECK_THROWS_AS(make_config(kind, std::nullopt), InvalidArgument);
  CHECK_THROWS_AS(load_config("/nonexistent/config.json", std::nullopt), IoError);

  const auto markov = make_config({{"scheme", {{"kind", "markov"}}}}, std::nullopt);
  CHECK(markov.model().conv);
  CHECK(markov.train().max_epochs == 3000);
  const auto comp = make_config({{"scheme", {{"kind", "competition"}}}}, std::nullopt);
  CHECK(comp.train().learning_rate == 1.0);
}

TEST_CASE("config hash is order independent") {
  const json a = json::parse(R"({"x": 1, "y": [1, 2]})");
  const json b = json::parse(R"({"y": [1, 2], "x": 1})");
  CHECK(config_hash(a) == config_hash(b));
  CHECK(config_hash(a) != config_hash(json::parse(R"({"x": 2, "y": [1, 2]})")));
}

TEST_CASE("generated data and training runs") {
  const auto root = testing::scratch_dir("experiment");
  const auto cfg = write_config(root, small_synthetic());

  CommandRequest gen;
  gen.config_path = cfg;
  gen.out = (root / "data").string();
  run_command("gen-synth", gen);
  CHECK(line_count(root / "data" / "train.jsonl") == 80);
  CHECK(line_count(root / "data" / "test.jsonl") == 20);
  CHECK(fs::exists(root / "data" / "manifest.json"));
  CHECK_THROWS_AS(run_command("gen-markov", gen), InvalidArgument);

  CommandRequest a;
  a.config_path = cfg;
  a.out = (root / "run_a").string();
  const auto ra = run_command("train", a);
  CHECK(ra.passed);
  CommandRequest b = a;
  b.out = (root / "run_b").string();
  run_command("train", b);
  for (const char* f : {"units.csv", "metrics.csv", "model_final.json", "backgrounds.json", "train.jsonl"}) {
    CAPTURE(f);
    CHECK(testing::slurp(root / "run_a" / f) == testing::slurp(root / "run_b" / f));
  }
  CHECK_FALSE(fs::exists(root / "run_a" / ".lock"));

  SUBCASE("report leaves the run directory untouched") {
    std::map<std::string, std::string> before;
    for (const auto& e : fs::directory_iterator(root / "run_a")) {
      if (e.is_regular_file()) before[e.path().filename().string()] = testing::slurp(e.path());
    }
    CommandRequest r;
    r.inputs = {(root / "run_a").string()};
    r.out = (root / "report").string();
    r.plot = true;
    run_command("report", r);
    CHECK(fs::exists(root / "report" / "summary.json"));
    CHECK(fs::exists(root / "report" / "loss.svg"));
    std::map<std::string, std::string> after;
    for (const auto& e : fs::directory_iterator(root / "run_a")) {
      if (e.is_regular_file()) after[e.path().filename().string()] = testing::slurp(e.path());
    }
    CHECK(before == after);
    r.out = r.inputs.front();
    CHECK_THROWS_AS(run_command("report", r), InvalidArgument);
  }
  SUBCASE("a locked directory refuses a second writer") {
    const auto dir = (root / "locked").string();
    detail::DirLock lock(dir);
    CHECK_THROWS_AS([&] { detail::DirLock second(dir); }(), IoError);
    CommandRequest c = a;
    c.out = dir;
    CHECK_THROWS_AS(run_command("train", c), IoError);
  }
  SUBCASE("an edited manifest is rejected") {
    auto m = detail::read_json((root / "run_a" / "manifest.json").string());
    m["config_hash"] = "0000000000000000";
    detail::write_json((root / "run_b" / "manifest.json").string(), m);
    CommandRequest d;
    d.inputs = {(root / "run_b").string()};
    d.out = (root / "drift").string();
    CHECK_THROWS(run_command("drift", d));
  }
}

TEST_CASE("unknown commands") {
  CHECK_THROWS_AS(run_command("fly", CommandRequest{}), InvalidArgument);
  CHECK(command_names().size() == 11);
}

TEST_CASE("command line exit codes and error records") {
  const auto root = testing::scratch_dir("cli");
  const auto err = root / "stderr.txt";

  CHECK(run_cli("requery --out " + (root / "rq").string(), err) == 0);

  auto unknown = small_synthetic();
  unknown["model"]["colour"] = "red";
  const auto bad = write_config(root, unknown);
  CHECK(run_cli("train --config " + bad + " --out " + (root / "t").string(), err) == 2);
  const auto record = json::parse(testing::slurp(err));
  CHECK(record["error"]["status"] == "invalid argument");
  CHECK(record["error"]["code"] == 1);
  CHECK(record["error"]["message"].get<std::string>().find("colour") != std::string::npos);

  CHECK(run_cli("train --config /nonexistent.json --out " + (root / "t2").string(), err) == 3);
  CHECK(json::parse(testing::slurp(err))["error"]["code"] == 3);
  CHECK(run_cli("no-such-command", err) == 2);
}
