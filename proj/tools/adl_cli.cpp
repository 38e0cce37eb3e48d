#include <cstdint>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "adl/adl.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitRuntime = 3;

struct Described {
  const char* name;
  const char* help;
};

constexpr Described kCommands[] = {
    {"gen-synth", "Generate the synthetic topic-word corpus"},
    {"gen-markov", "Generate the Markov word-pair corpus"},
    {"train", "Train a model and record its trajectory into --out"},
    {"check-grad", "Compare analytic gradients with finite differences"},
    {"verify-sen", "Check the score/embedding-norm curve on a run directory"},
    {"verify-flow", "Compare gradient descent with the integrated gradient flow"},
    {"ablate", "Scores-frozen / embeddings-frozen ablation and adversarial start"},
    {"drift", "Topic vs non-topic drift over one or more run directories"},
    {"purity", "Topic purity of attended words over a run"},
    {"requery", "Rebuild keys for a new query and check the scores survive"},
    {"report", "Summarize a run directory (JSON, optional SVG)"},
};

void print_error(const std::string& status, int code, const std::string& message) {
  const nlohmann::json rec = {{"error", {{"status", status}, {"code", code}, {"message", message}}}};
  std::cerr << rec.dump() << "\n";
}

int exit_code_for(adl_status s) {
  switch (s) {
    case ADL_OK: return kExitOk;
    case ADL_INVALID_ARGUMENT:
    case ADL_PARSE_ERROR: return kExitUsage;
    default: return kExitRuntime;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Attention dynamics lab: experiments on a single-query attention classifier"};
  app.require_subcommand(1);
  app.fallthrough();

  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool plot = false;
  std::vector<std::string> inputs;
  app.add_option("--config", config, "Experiment config (JSON)");
  app.add_option("--seed", seed, "Seed overriding the config");
  app.add_option("--out", out, "Output directory");
  app.add_flag("--plot", plot, "Also write SVG plots");

  for (const auto& c : kCommands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("inputs", inputs, "Run directories");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage", kExitUsage, e.what());
    return kExitUsage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  nlohmann::json request = {{"out", out}, {"inputs", inputs}, {"plot", plot}};
  if (config) request["config"] = *config;
  if (seed) request["seed"] = *seed;

  char* result = nullptr;
  int passed = 0;
  const adl_status s = adl_run(command.c_str(), request.dump().c_str(), &result, &passed);
  if (s != ADL_OK) {
    print_error(adl_status_string(s), static_cast<int>(s), adl_last_error());
    return exit_code_for(s);
  }
  std::cout << result << "\n";
  adl_string_free(result);
  return passed ? kExitOk : kExitCheckFailed;
}
