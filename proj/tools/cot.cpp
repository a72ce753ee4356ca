/*
 * Copyright 2026 The cotmmd Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Command-line driver: cot <experiment> --config <file> [overrides].

#include "cotmmd/harness/experiments.hpp"
#include "cotmmd/runtime.hpp"

#include <CLI11.hpp>

#include <iostream>

int main(int argc, char** argv) {
  cotmmd::tune_allocator();
  CLI::App app{"MMD-regularized conditional optimal transport experiments"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<Eigen::Index> m_override;
  std::vector<std::uint64_t> seed_override;
  std::string out_override;
  int epochs_override = -1;
  bool quiet = false;

  for (const auto& name : cotmmd::harness::experiment_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the '" + name + "' experiment");
    sub->add_option("--config,-c", config_path, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--m", m_override, "sample sizes (replaces the config list)");
    sub->add_option("--seeds", seed_override, "seeds (replaces the config list)");
    sub->add_option("--epochs", epochs_override, "training epochs");
    sub->add_option("--out,-o", out_override, "output directory");
    sub->add_flag("--quiet,-q", quiet, "do not print notes");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string experiment = app.get_subcommands().front()->get_name();
  try {
    cotmmd::harness::ExperimentConfig cfg;
    if (!config_path.empty()) {
      cfg = cotmmd::harness::load_config(config_path);
      if (cfg.experiment != experiment)
        throw cotmmd::DomainError("config is for '" + cfg.experiment + "', not '" + experiment + "'");
    } else {
      cfg.experiment = experiment;
    }
    if (!m_override.empty()) cfg.m_list = m_override;
    if (!seed_override.empty()) cfg.seeds = seed_override;
    if (epochs_override >= 0) cfg.cot.optim.epochs = epochs_override;
    if (!out_override.empty()) cfg.out_dir = out_override;
    cfg.validate();

    const auto report = cotmmd::harness::run_experiment(cfg);
    cotmmd::harness::write_outputs(cfg, report);
    if (!quiet) {
      for (const auto& n : report.notes) std::cout << experiment << ": " << n << '\n';
      std::cout << "wrote " << cfg.out_dir << '/' << experiment << ".csv, .svg, meta.json\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "cot: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
