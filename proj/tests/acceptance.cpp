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

// Acceptance runner. One PASS/FAIL line per criterion; exit status is
// non-zero if any selected criterion fails.
//
//   acceptance [--only <criterion>]

#include "cotmmd/harness/experiments.hpp"
#include "cotmmd/runtime.hpp"
#include "oracle_mmd.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#ifndef COTMMD_CONFIG_DIR
#define COTMMD_CONFIG_DIR "configs"
#endif

namespace {

using namespace cotmmd;
using namespace cotmmd::harness;
namespace fs = std::filesystem;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string config_path(const std::string& name) {
  return std::string(COTMMD_CONFIG_DIR) + "/" + name + ".json";
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "cotmmd-acceptance" / name;
  fs::create_directories(p);
  return p;
}

std::string g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double table_value(const Report& r, const std::string& row_kind, const std::string& column) {
  const auto ci = r.table.column("row"), cv = r.table.column(column);
  for (const auto& row : r.table.rows)
    if (row[ci] == row_kind) return std::strtod(row[cv].c_str(), nullptr);
  return kNaN;
}

Outcome mmd_oracle() {
  RngStream rng = RngStream(2026).split("mmd-oracle");
  double worst = 0.0;
  for (int k = 0; k < 200; ++k) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.index(50));
    const auto p = 1 + static_cast<Eigen::Index>(rng.index(50));
    const auto d = 1 + static_cast<Eigen::Index>(rng.index(10));
    const WeightedSamples a = test::random_measure(rng, n, d);
    const WeightedSamples b = test::random_measure(rng, p, d);
    const double s2 = rng.uniform(0.1, 5.0);
    for (const Kernel& kern : {Kernel::rbf(s2), Kernel::imq(s2), Kernel::imq(s2, true), Kernel::imq2(s2)})
      worst = std::max(worst, std::abs(mmd2(kern, a, b) - test::loop_mmd2(kern, a, b)));
  }
  return {worst <= 1e-10, "max |vectorized - loop| = " + g(worst) + " over 200 instances x 4 kernels"};
}

Outcome gradients() {
  ExperimentConfig c = load_config(config_path("gradcheck"));
  c.seeds.clear();
  for (std::uint64_t s = 0; s < 10; ++s) c.seeds.push_back(s);
  const Report r = run_gradcheck(c);
  std::size_t failed = 0, total = 0;
  double worst = 0.0;
  const auto cp = r.table.column("passed"), ce = r.table.column("max_rel_error");
  for (const auto& row : r.table.rows) {
    ++total;
    failed += row[cp] != "true";
    worst = std::max(worst, std::strtod(row[ce].c_str(), nullptr));
  }
  return {failed == 0 && total == gradcheck_cases().size() * 10,
          std::to_string(gradcheck_cases().size()) + " cases x 10 seeds, " + std::to_string(failed) +
              " failing, worst rel error " + g(worst)};
}

Outcome exact_ot() {
  RngStream rng = RngStream(2026).split("exact-ot");
  int mismatches = 0;
  for (int k = 0; k < 100; ++k) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.index(6));
    const auto d = 1 + static_cast<Eigen::Index>(rng.index(3));
    const Matrix a = rng.normal_matrix(n, d), b = rng.normal_matrix(n, d);
    Matrix c(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) c(i, j) = ot_cost(OtCost::squared_euclidean, a.row(i), b.row(j));
    mismatches += exact_assignment_ot(a, b).cost != test::exhaustive_assignment(c);
  }
  double worst_1d = 0.0;
  for (int k = 0; k < 100; ++k) {
    const auto n = 1 + static_cast<Eigen::Index>(rng.index(200));
    const Matrix a = rng.normal_matrix(n, 1), b = rng.normal_matrix(n, 1);
    const std::vector<double> va(a.data(), a.data() + n), vb(b.data(), b.data() + n);
    for (OtCost cost : {OtCost::squared_euclidean, OtCost::euclidean})
      worst_1d = std::max(worst_1d, std::abs(exact_assignment_ot(a, b, cost).cost - exact_ot_1d(va, vb, cost)));
  }
  return {mismatches == 0 && worst_1d <= 1e-12,
          std::to_string(mismatches) + " mismatches vs exhaustive (n <= 6, 100 instances); max 1-D gap " +
              g(worst_1d)};
}

Outcome reg_identity() {
  ExperimentConfig c = load_config(config_path("reg-identity"));
  const Report r = run_reg_identity(c);
  double worst = 0.0;
  const auto cg = r.table.column("gap");
  for (const auto& row : r.table.rows) worst = std::max(worst, std::abs(std::strtod(row[cg].c_str(), nullptr)));
  return {worst <= 1e-9 && r.table.rows.size() >= 50,
          std::to_string(r.table.rows.size()) + " plan pairs, max |gap| " + g(worst)};
}

Outcome converge() {
  const ExperimentConfig c = load_config(config_path("converge"));
  const Report r = run_converge(c);
  write_outputs([&] { auto o = c; o.out_dir = scratch_dir("converge").string(); return o; }(), r);
  const auto med = summary_by_m(r, "median", "mse");
  const double lo = med.at(100), hi = med.at(800);
  return {c.seeds.size() >= 3 && lo <= 40.0 && hi <= 10.0 && hi < lo,
          "median grid-MSE m=100: " + g(lo) + " (<= 40), m=800: " + g(hi) + " (<= 10), " +
              std::to_string(c.seeds.size()) + " seeds"};
}

Outcome barycenter() {
  ExperimentConfig c = load_config(config_path("barycenter"));
  const auto [mn, mx] = std::minmax_element(c.m_list.begin(), c.m_list.end());
  c.m_list = {*mn, *mx};
  const Report r = run_barycenter(c);
  const auto med = summary_by_m(r, "median", "mse");
  const double small = med.at(c.m_list[0]), large = med.at(c.m_list[1]);
  return {c.seeds.size() >= 3 && large <= 0.5 && large < small,
          "median W1-MSE m=" + std::to_string(c.m_list[0]) + ": " + g(small) + ", m=" +
              std::to_string(c.m_list[1]) + ": " + g(large) + " (<= 0.5)"};
}

Outcome concentration() {
  ExperimentConfig c = load_config(config_path("concentration"));
  c.m_list = {100, 400};
  const Report r = run_concentration(c);
  const double ratio = table_value(r, "ratio", "empirical");
  bool within = true;
  std::size_t resamples = 0;
  const auto ck = r.table.column("row"), cd = r.table.column("deviation"), cb = r.table.column("bound");
  for (const auto& row : r.table.rows)
    if (row[ck] == "resample") {
      ++resamples;
      within = within && std::strtod(row[cd].c_str(), nullptr) < std::strtod(row[cb].c_str(), nullptr);
    }
  return {ratio >= 1.6 && ratio <= 2.6 && within && resamples == 400,
          "spread ratio " + g(ratio) + " in [1.6, 2.6]; all deviations below bound: " +
              (within ? "yes" : "no")};
}

Outcome classification() {
  const ExperimentConfig c = load_config(config_path("classify"));
  const Report r = run_classify(c);
  const double auc = table_value(r, "median", "auc");
  return {c.seeds.size() >= 3 && auc >= 0.95, "median AUC " + g(auc) + " (>= 0.95)"};
}

Outcome regression() {
  const ExperimentConfig c = load_config(config_path("regression"));
  const Report r = run_regression(c);
  const double ev = table_value(r, "median", "explained_variance");
  return {c.seeds.size() >= 3 && ev >= 0.85, "median explained variance " + g(ev) + " (>= 0.85)"};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Every experiment config, shrunk where training is involved, run twice
/// into separate directories.
Outcome determinism() {
  std::vector<std::string> differing;
  for (const auto& name : experiment_names()) {
    ExperimentConfig c = load_config(config_path(name));
    if (c.cot.optim.epochs > 20) c.cot.optim.epochs = 20;
    c.m_list = {std::min<Eigen::Index>(c.m_list.front(), 60)};
    if (c.seeds.size() > 2) c.seeds.resize(2);
    if (name == "converge" || name == "barycenter" || name == "regression") {
      c.grid_points = 8;
      c.eval_draws = 40;
      c.params["n_test"] = 40;
    }
    std::string csv[2];
    for (int k = 0; k < 2; ++k) {
      c.out_dir = scratch_dir("determinism-" + name + "-" + std::to_string(k)).string();
      write_outputs(c, run_experiment(c));
      csv[k] = slurp(fs::path(c.out_dir) / (name + ".csv"));
    }
    if (csv[0].empty() || csv[0] != csv[1]) differing.push_back(name);
  }
  std::string d = std::to_string(experiment_names().size()) + " experiments rerun; differing: ";
  for (const auto& n : differing) d += n + " ";
  return {differing.empty(), d + (differing.empty() ? "none" : "")};
}

struct Criterion {
  const char* name;
  double budget_seconds;
  Outcome (*run)();
};

const std::vector<Criterion>& criteria() {
  static const std::vector<Criterion> all{
      {"mmd_oracle", 10, mmd_oracle},         {"gradients", 60, gradients},
      {"exact_ot", 0, exact_ot},              {"reg_identity", 0, reg_identity},
      {"converge", 900, converge},            {"barycenter", 900, barycenter},
      {"concentration", 120, concentration},  {"classification", 0, classification},
      {"regression", 300, regression},        {"determinism", 0, determinism}};
  return all;
}

}  // namespace

int main(int argc, char** argv) {
  cotmmd::tune_allocator();
  std::string only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      only = argv[++i];
    } else {
      std::cerr << "usage: acceptance [--only <criterion>]\n";
      return 2;
    }
  }
  bool any = false, all_pass = true;
  for (const auto& c : criteria()) {
    if (!only.empty() && only != c.name) continue;
    any = true;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::string timing = g(secs) + " s";
    if (c.budget_seconds > 0) {
      timing += " (budget " + g(c.budget_seconds) + " s)";
      if (secs > c.budget_seconds) {
        o.pass = false;
        timing += " over budget";
      }
    }
    all_pass = all_pass && o.pass;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << " [" << timing << "]"
              << std::endl;
  }
  if (!any) {
    std::cerr << "unknown criterion '" << only << "'\n";
    return 2;
  }
  return all_pass ? 0 : 1;
}
