// SPDX-License-Identifier: Apache-2.0

#include <cstdint>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "rmlora/experiment.hpp"

int main(int argc, char** argv) {
  using namespace rmlora::experiment;

  CLI::App app{"Regularized and masked low-rank adaptation lab"};
  app.require_subcommand(1);

  ExperimentSpec spec;
  std::string config, out = ".";
  std::vector<std::string> sets;
  std::uint64_t seed = 0;

  const std::pair<const char*, const char*> commands[] = {
      {"gen-data", "Generate a synthetic teacher-student dataset and manifest"},
      {"train", "Train adapters on a dataset and write diagnostics + checkpoint"},
      {"sweep", "Run the lora / r_lora / gm_lora / rm_lora ablation over seeds"},
      {"bound", "Evaluate the low-rank approximation error bound for a manifest"},
      {"diagnose", "Recompute diagnostics for a saved checkpoint"},
  };
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config, "JSON config file");
    sub->add_option("--out", out, "Output directory (created if absent)");
    sub->add_option("--set", sets, "Override a config value, e.g. train.rank=16");
    sub->add_option("--seed", seed, "Seed applied to data, train and bound sections");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfigError;
  }

  for (CLI::App* sub : subs) {
    if (!sub->parsed()) continue;
    spec.command = sub->get_name();
    if (sub->count("--seed")) spec.seed = seed;
  }
  spec.config_path = config;
  spec.output_dir = out;
  spec.overrides = sets;
  return run_command(spec);
}
