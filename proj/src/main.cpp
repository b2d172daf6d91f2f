// Command-line driver for the dilation experiments.
//
//   stochdil run --config <file.json> [--out-dir DIR] [--seed N] [--threads N]
//   stochdil validate --config <file.json>
//   stochdil list-builtins
//
// Exit codes: 0 success, 1 run/acceptance failure, 2 configuration error.

#include "stochdil/experiments.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw stochdil::ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dilated stochastic evolution experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = ".";
  std::optional<uint64_t> seed_override;
  std::optional<int> threads_override;

  CLI::App* run = app.add_subcommand("run", "execute an experiment config");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--out-dir", out_dir, "output directory (created if missing)");
  run->add_option("--seed", seed_override, "override the config seed");
  run->add_option("--threads", threads_override, "override the config thread count");

  CLI::App* validate = app.add_subcommand("validate", "parse and echo a config");
  validate->add_option("--config", config_path, "experiment config (JSON)")->required();

  CLI::App* list = app.add_subcommand("list-builtins", "list systems and experiments");

  CLI11_PARSE(app, argc, argv);

  try {
    if (list->parsed()) {
      std::cout << "systems:\n";
      for (const auto& name : stochdil::builtin_names()) std::cout << "  " << name << "\n";
      std::cout << "experiments:\n";
      for (const auto& name : stochdil::experiment_names())
        std::cout << "  " << name << "\n";
      return 0;
    }

    stochdil::ExperimentConfig cfg = stochdil::config_from_json(slurp(config_path));
    if (seed_override) cfg.seed = *seed_override;
    if (threads_override) {
      if (*threads_override < 1) throw stochdil::ConfigError("--threads must be at least 1");
      cfg.threads = *threads_override;
    }

    if (validate->parsed()) {
      std::cout << stochdil::config_echo_json(cfg) << "\n";
      return 0;
    }

    const int rc = stochdil::run_experiment(cfg, out_dir);
    if (rc == 0)
      std::cout << "ok: " << cfg.experiment << " -> " << out_dir << "/" << cfg.out_prefix
                << "*\n";
    else
      std::cout << "FAILED: " << cfg.experiment << " (see " << out_dir << "/"
                << cfg.out_prefix << "_summary.json)\n";
    return rc;
  } catch (const stochdil::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
