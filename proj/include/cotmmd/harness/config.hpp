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

#pragma once

#include "cotmmd/models.hpp"
#include "cotmmd/objectives.hpp"
#include "cotmmd/rng.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

namespace cotmmd::harness {

inline constexpr int kSchemaVersion = 1;

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names{
      "converge",      "barycenter", "classify",     "cell-toy",  "prompt-toy",
      "gradcheck",     "concentration", "reg-identity", "regression"};
  return names;
}

/// Experiment settings. Fields shared by the training experiments sit at the
/// top level; anything experiment-specific goes in `params`.
struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string experiment;
  std::vector<Eigen::Index> m_list{100};
  std::vector<std::uint64_t> seeds{0};
  CotConfig cot;
  std::vector<Eigen::Index> hidden{64, 64};
  Eigen::Index noise_dim = 10;
  Activation activation = Activation::tanh;
  bool psi_residual = false;
  /// Evaluation grid for the conditional experiments.
  int grid_points = 50;
  double grid_lo = 0.05;
  double grid_hi = 0.95;
  Eigen::Index eval_draws = 500;
  nlohmann::json params = nlohmann::json::object();
  std::string out_dir = "out";

  void validate() const {
    require_domain(schema_version == kSchemaVersion,
                   "config: unsupported schema_version " + std::to_string(schema_version));
    bool known = false;
    for (const auto& n : experiment_names()) known = known || n == experiment;
    require_domain(known, "config: unknown experiment '" + experiment + "'");
    require_domain(!m_list.empty() && !seeds.empty(), "config: m and seed lists must be non-empty");
    for (auto m : m_list) require_domain(m >= 1, "config: m values must be >= 1");
    require_domain(grid_points >= 1 && grid_lo <= grid_hi && grid_lo >= 0.0 && grid_hi <= 1.0,
                   "config: bad evaluation grid");
    require_domain(eval_draws >= 1 && noise_dim >= 0, "config: bad eval_draws or noise_dim");
    cot.validate();
  }

  template <class T>
  T param(const std::string& key, const T& fallback) const {
    return params.contains(key) ? params.at(key).get<T>() : fallback;
  }

  std::vector<double> grid() const {
    std::vector<double> g(static_cast<std::size_t>(grid_points));
    for (int i = 0; i < grid_points; ++i)
      g[static_cast<std::size_t>(i)] =
          grid_points == 1 ? grid_lo : grid_lo + (grid_hi - grid_lo) * i / (grid_points - 1);
    return g;
  }
};

inline nlohmann::json kernel_to_json(const Kernel& k) {
  return {{"family", to_string(k.family)}, {"sigma2", k.sigma2}, {"rescaled", k.rescaled}};
}

inline Kernel kernel_from_json(const nlohmann::json& j) {
  Kernel k;
  k.family = kernel_family_from_string(j.at("family").get<std::string>());
  k.sigma2 = j.value("sigma2", 1.0);
  k.rescaled = j.value("rescaled", false);
  return k;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  nlohmann::json j;
  j["schema_version"] = c.schema_version;
  j["experiment"] = c.experiment;
  j["m"] = c.m_list;
  j["seeds"] = c.seeds;
  j["lambda1"] = c.cot.lambda1;
  j["lambda2"] = c.cot.lambda2;
  j["lambda_mode"] = to_string(c.cot.lambda_mode);
  j["cost"] = to_string(c.cot.cost);
  j["kernel"] = kernel_to_json(c.cot.kernel);
  j["inner_draws"] = c.cot.inner_draws;
  j["optim"] = {{"lr", c.cot.optim.lr},         {"beta1", c.cot.optim.beta1},
                {"beta2", c.cot.optim.beta2},   {"eps", c.cot.optim.eps},
                {"epochs", c.cot.optim.epochs}, {"batch_size", c.cot.optim.batch_size}};
  j["model"] = {{"hidden", c.hidden},
                {"noise_dim", c.noise_dim},
                {"activation", to_string(c.activation)},
                {"psi_residual", c.psi_residual}};
  j["eval"] = {{"grid_points", c.grid_points},
               {"grid_lo", c.grid_lo},
               {"grid_hi", c.grid_hi},
               {"draws", c.eval_draws}};
  j["params"] = c.params;
  j["out"] = c.out_dir;
  return j;
}

/// Missing keys keep their defaults; unknown top-level keys are rejected so
/// that typos do not pass silently.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> allowed{
      "schema_version", "experiment", "m",     "seeds", "lambda1", "lambda2", "lambda",
      "lambda_mode",    "cost",       "kernel", "inner_draws", "optim", "model", "eval",
      "params",         "out"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const auto& a : allowed) ok = ok || a == key;
    if (!ok) throw DomainError("config: unknown key '" + key + "'");
  }
  ExperimentConfig c;
  c.schema_version = j.value("schema_version", kSchemaVersion);
  c.experiment = j.at("experiment").get<std::string>();
  if (j.contains("m")) c.m_list = j.at("m").get<std::vector<Eigen::Index>>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("lambda")) c.cot.lambda1 = c.cot.lambda2 = j.at("lambda").get<double>();
  c.cot.lambda1 = j.value("lambda1", c.cot.lambda1);
  c.cot.lambda2 = j.value("lambda2", c.cot.lambda2);
  if (j.contains("lambda_mode"))
    c.cot.lambda_mode = lambda_mode_from_string(j.at("lambda_mode").get<std::string>());
  if (j.contains("cost")) c.cot.cost = cost_from_string(j.at("cost").get<std::string>());
  if (j.contains("kernel")) c.cot.kernel = kernel_from_json(j.at("kernel"));
  c.cot.inner_draws = j.value("inner_draws", c.cot.inner_draws);
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    c.cot.optim.lr = o.value("lr", c.cot.optim.lr);
    c.cot.optim.beta1 = o.value("beta1", c.cot.optim.beta1);
    c.cot.optim.beta2 = o.value("beta2", c.cot.optim.beta2);
    c.cot.optim.eps = o.value("eps", c.cot.optim.eps);
    c.cot.optim.epochs = o.value("epochs", c.cot.optim.epochs);
    c.cot.optim.batch_size = o.value("batch_size", c.cot.optim.batch_size);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (m.contains("hidden")) c.hidden = m.at("hidden").get<std::vector<Eigen::Index>>();
    c.noise_dim = m.value("noise_dim", c.noise_dim);
    if (m.contains("activation"))
      c.activation = activation_from_string(m.at("activation").get<std::string>());
    c.psi_residual = m.value("psi_residual", c.psi_residual);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.grid_points = e.value("grid_points", c.grid_points);
    c.grid_lo = e.value("grid_lo", c.grid_lo);
    c.grid_hi = e.value("grid_hi", c.grid_hi);
    c.eval_draws = e.value("draws", c.eval_draws);
  }
  if (j.contains("params")) c.params = j.at("params");
  c.out_dir = j.value("out", c.out_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error("config '" + path + "': " + e.what());
  }
  return config_from_json(j);
}

/// FNV-1a over the canonical (sorted-key) dump, as 16 hex digits.
inline std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(cotmmd::detail::fnv1a(to_json(c).dump())));
  return buf;
}

}  // namespace cotmmd::harness
