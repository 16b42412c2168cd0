#pragma once

// `dyneval` command line. Exit codes: 0 ok, 2 bad config or arguments,
// 3 failure while running.

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dyneval/harness.hpp"

namespace dyneval {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Dynamic evaluation experiments for small transformer language models", "dyneval"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::vector<std::string> overrides;
  const char* names[] = {"pretrain", "finetune", "eval", "sweep", "stats", "export-lora-merged"};
  const char* help[] = {"Train a model from scratch on corpora.pretrain",
                        "Finetune `checkpoint` on corpora.finetune with an LR sweep",
                        "Evaluate `checkpoint` on corpora.eval; writes records.jsonl and summary.json",
                        "Run the configured grid and write the cloud and Pareto front",
                        "Corpus statistics for every configured corpus",
                        "Fold LoRA adapters into the base weights"};
  for (int i = 0; i < 6; ++i) {
    auto* sub = app.add_subcommand(names[i], help[i]);
    sub->add_option("--config", config_path, "Run config (JSON)")->required();
    sub->add_option("--seed", seed, "Override the top-level seed");
    sub->add_option("--out", out_dir, "Override out_dir");
    sub->add_option("--override", overrides, "key.path=value, value parsed as JSON or taken as a string");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "dyneval: " << e.what() << '\n';
    return kExitConfig;
  }

  const std::string cmd = app.get_subcommands().front()->get_name();
  RunConfig cfg;
  try {
    std::optional<fs::path> od;
    if (out_dir) od = *out_dir;
    cfg = load_run_config_file(config_path, overrides, seed, od);
  } catch (const ConfigError& e) {
    err << "dyneval: " << e.what() << '\n';
    return kExitConfig;
  }

  try {
    if (cmd == "pretrain") {
      const auto r = cmd_pretrain(cfg);
      auto s = r.summary;
      s.erase("config");
      out << s.dump(2) << '\n';
      if (r.result.diverged) {
        err << "dyneval: training diverged at step " << r.result.step << "; kept the last good checkpoint\n";
        return kExitRuntime;
      }
    } else if (cmd == "finetune") {
      auto s = cmd_finetune(cfg).summary;
      s.erase("config");
      out << s.dump(2) << '\n';
    } else if (cmd == "eval") {
      auto s = cmd_eval(cfg).summary;
      s.erase("doc_boundaries");
      s.erase("config");
      out << s.dump(2) << '\n';
    } else if (cmd == "sweep") {
      const auto r = cmd_sweep(cfg);
      out << nlohmann::json{{"runs", r.cloud.size()}, {"front", r.front}, {"failures", r.failures}}.dump(2) << '\n';
    } else if (cmd == "stats") {
      out << cmd_stats(cfg).at("corpora").dump(2) << '\n';
    } else {
      out << cmd_export_lora_merged(cfg).string() << '\n';
    }
  } catch (const ConfigError& e) {
    err << "dyneval: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "dyneval: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace dyneval
