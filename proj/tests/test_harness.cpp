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

#include "cotmmd/harness/experiments.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace cotmmd;
using namespace cotmmd::harness;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::filesystem::path temp_out(const std::string& name) {
  return std::filesystem::temp_directory_path() / "cotmmd-test-harness" / name;
}

ExperimentConfig small_training(const std::string& experiment) {
  ExperimentConfig c;
  c.experiment = experiment;
  c.m_list = {40};
  c.seeds = {1};
  c.hidden = {8};
  c.noise_dim = 3;
  c.cot.inner_draws = 4;
  c.cot.optim.epochs = 5;
  c.grid_points = 5;
  c.eval_draws = 50;
  return c;
}

}  // namespace

TEST(Config, RoundTripThroughJson) {
  ExperimentConfig c;
  c.experiment = "barycenter";
  c.m_list = {100, 1600};
  c.seeds = {3, 4, 5};
  c.cot.lambda1 = 250.0;
  c.cot.lambda2 = 75.0;
  c.cot.kernel = Kernel::imq(2.0, true);
  c.cot.optim.batch_size = 64;
  c.hidden = {16, 8};
  c.activation = Activation::relu;
  c.params = {{"rho", 0.25}};
  const ExperimentConfig back = config_from_json(to_json(c));
  EXPECT_EQ(to_json(back).dump(), to_json(c).dump());
  EXPECT_EQ(config_hash(back), config_hash(c));
  EXPECT_EQ(back.param<double>("rho", 0.5), 0.25);
  EXPECT_EQ(back.param<double>("missing", 0.5), 0.5);
}

TEST(Config, RejectsBadInput) {
  nlohmann::json j = {{"experiment", "converge"}, {"lamda", 3}};
  EXPECT_THROW(config_from_json(j), DomainError);
  EXPECT_THROW(config_from_json({{"experiment", "nope"}}), DomainError);
  EXPECT_THROW(config_from_json({{"experiment", "converge"}, {"schema_version", 2}}), DomainError);
  EXPECT_THROW(config_from_json({{"experiment", "converge"}, {"m", std::vector<int>{}}}), DomainError);
  EXPECT_THROW(config_from_json({{"experiment", "converge"}, {"cost", "l7"}}), DomainError);
  EXPECT_THROW(load_config("/nonexistent/cfg.json"), Error);
}

TEST(Config, LambdaShorthandSetsBoth) {
  const auto c = config_from_json({{"experiment", "converge"}, {"lambda", 42.0}});
  EXPECT_EQ(c.cot.lambda1, 42.0);
  EXPECT_EQ(c.cot.lambda2, 42.0);
  const auto d = config_from_json({{"experiment", "converge"}, {"lambda", 42.0}, {"lambda2", 0.0}});
  EXPECT_EQ(d.cot.lambda2, 0.0);
}

TEST(Config, HashIsStableAndSensitive) {
  ExperimentConfig a;
  a.experiment = "converge";
  ExperimentConfig b = a;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.cot.lambda1 = 999.0;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(Config, GridEndpoints) {
  ExperimentConfig c;
  c.experiment = "converge";
  c.grid_points = 5;
  const auto g = c.grid();
  ASSERT_EQ(g.size(), 5u);
  EXPECT_DOUBLE_EQ(g.front(), 0.05);
  EXPECT_DOUBLE_EQ(g.back(), 0.95);
}

TEST(Config, ShippedConfigsLoad) {
  for (const auto& name : experiment_names()) {
    const auto c = load_config(std::string(COTMMD_CONFIG_DIR) + "/" + name + ".json");
    EXPECT_EQ(c.experiment, name);
  }
}

TEST(Report, CsvFormatting) {
  Table t;
  t.columns = {"a", "b", "c"};
  t.add({cell(0.1), cell(std::nan("")), cell(true)});
  t.add({cell(Eigen::Index{7}), cell(std::uint64_t{3}), "x"});
  EXPECT_EQ(csv_string(t), "a,b,c\n0.1,nan,true\n7,3,x\n");
  EXPECT_THROW(t.add({"1"}), DimensionError);
  EXPECT_EQ(t.column("c"), 2u);
  EXPECT_THROW(t.column("d"), Error);
}

TEST(Report, SvgRoundTripsSeries) {
  Plot p{"t", "x", "y", true, {}};
  p.series.push_back({"one", {1.0, 10.0, 100.0}, {0.3, 1.0 / 3.0, -2.5e-7}});
  p.series.push_back({"two", {2.0}, {5.0}});
  const std::string svg = render_svg(p);
  EXPECT_EQ(svg, render_svg(p));
  const auto back = read_svg_series(svg);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].name, "one");
  EXPECT_EQ(back[0].x, p.series[0].x);
  EXPECT_EQ(back[0].y, p.series[0].y);
  EXPECT_EQ(back[1].y, p.series[1].y);
}

TEST(Report, EmptyPlotStillRenders) {
  const std::string svg = render_svg(Plot{"empty", "x", "y", false, {}});
  EXPECT_NE(svg.find("<svg"), std::string::npos);
  EXPECT_NE(svg.find("</svg>"), std::string::npos);
  EXPECT_TRUE(read_svg_series(svg).empty());
}

TEST(Report, WritesThreeFiles) {
  ExperimentConfig c;
  c.experiment = "reg-identity";
  c.params = {{"instances", 3}};
  c.out_dir = temp_out("files").string();
  const Report r = run_experiment(c);
  write_outputs(c, r);
  EXPECT_FALSE(slurp(std::filesystem::path(c.out_dir) / "reg-identity.csv").empty());
  EXPECT_FALSE(slurp(std::filesystem::path(c.out_dir) / "reg-identity.svg").empty());
  const auto meta = nlohmann::json::parse(slurp(std::filesystem::path(c.out_dir) / "meta.json"));
  EXPECT_EQ(meta.at("config_hash"), config_hash(c));
  EXPECT_EQ(meta.at("rows").get<std::size_t>(), 3u);
  EXPECT_EQ(meta.at("schema_version"), kSchemaVersion);
}

TEST(Stats, MedianAndMeanSkipNan) {
  EXPECT_EQ(median_of({3.0, 1.0, 2.0}), 2.0);
  EXPECT_EQ(median_of({4.0, 1.0, 2.0, 3.0}), 2.5);
  EXPECT_EQ(median_of({std::nan(""), 1.0, 5.0}), 3.0);
  EXPECT_TRUE(std::isnan(median_of({})));
  EXPECT_EQ(mean_of({1.0, std::nan(""), 3.0}), 2.0);
}

TEST(Stats, RocAuc) {
  EXPECT_EQ(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}), 1.0);
  EXPECT_EQ(roc_auc({0.9, 0.8, 0.2, 0.1}, {0, 0, 1, 1}), 0.0);
  EXPECT_EQ(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}), 0.5);
  // One swapped pair out of four.
  EXPECT_EQ(roc_auc({0.1, 0.6, 0.5, 0.9}, {0, 0, 1, 1}), 0.75);
  EXPECT_THROW(roc_auc({0.1, 0.2}, {1, 1}), DomainError);
}

TEST(Stats, ExplainedVariance) {
  Vector y(4);
  y << 1, 2, 3, 4;
  EXPECT_EQ(explained_variance(y, y), 1.0);
  EXPECT_NEAR(explained_variance(y, Vector::Constant(4, 2.5)), 0.0, 1e-15);
  // A constant offset is not penalized.
  EXPECT_NEAR(explained_variance(y, (y.array() + 1.0).matrix()), 1.0, 1e-15);
}

TEST(Converge, OracleCouplingMatchesClosedForm) {
  ExperimentConfig c;
  c.experiment = "converge";
  c.m_list = {100};
  c.seeds = {1, 2};
  c.params = {{"oracle_self_test", true}};
  const Report r = run_converge(c);
  for (const auto& [m, mse] : summary_by_m(r, "median", "mse")) EXPECT_LE(mse, 1e-6) << m;
}

TEST(Converge, TrainingRunsAndReports) {
  ExperimentConfig c = small_training("converge");
  const Report r = run_converge(c);
  const auto med = summary_by_m(r, "median", "mse");
  ASSERT_EQ(med.size(), 1u);
  EXPECT_TRUE(std::isfinite(med.at(40)));
  EXPECT_EQ(r.plot.series.size(), 2u);
}

TEST(Converge, DivergenceIsRecorded) {
  ExperimentConfig c = small_training("converge");
  c.cot.optim.lr = 1e200;
  const Report r = run_converge(c);
  const auto cs = r.table.column("status");
  bool saw = false;
  for (const auto& row : r.table.rows) saw = saw || row[cs].rfind("diverged@", 0) == 0;
  EXPECT_TRUE(saw);
  EXPECT_TRUE(std::isnan(summary_by_m(r, "median", "mse").at(40)));
}

TEST(Barycenter, OracleCouplingIsNearlyExact) {
  ExperimentConfig c;
  c.experiment = "barycenter";
  c.m_list = {100};
  c.seeds = {1};
  c.eval_draws = 4000;
  c.params = {{"oracle_self_test", true}};
  const Report r = run_barycenter(c);
  // Only two-sample noise remains.
  EXPECT_LT(summary_by_m(r, "median", "mse").at(100), 5e-3);
  // Reading the barycenter variance as 2.5 leaves a systematic gap.
  EXPECT_GT(summary_by_m(r, "median", "mse_var2.5").at(100), 5e-3);
}

TEST(Barycenter, EndpointRhoOneRecoversSource) {
  ExperimentConfig c;
  c.experiment = "barycenter";
  c.m_list = {100};
  c.seeds = {1};
  c.eval_draws = 4000;
  c.params = {{"oracle_self_test", true}, {"rho", 1.0}};
  EXPECT_LT(summary_by_m(run_barycenter(c), "median", "mse").at(100), 5e-3);
  c.params["rho"] = 1.5;
  EXPECT_THROW(run_barycenter(c), DomainError);
}

TEST(Classify, NoSeparationGivesChanceAuc) {
  ExperimentConfig c;
  c.experiment = "classify";
  c.seeds = {1};
  c.hidden = {8};
  c.cot.optim.epochs = 30;
  c.params = {{"separation", 0.0}, {"n_train", 150}, {"n_test", 600}};
  const double auc = classify_cell(c, 1).auc;
  EXPECT_GT(auc, 0.4);
  EXPECT_LT(auc, 0.6);
}

TEST(Classify, SeparatedBlobsAreLearned) {
  ExperimentConfig c;
  c.experiment = "classify";
  c.hidden = {32, 32};
  c.cot.lambda1 = 100.0;
  c.cot.optim.epochs = 150;
  c.params = {{"separation", 6.0}, {"n_train", 150}, {"n_test", 150}};
  EXPECT_GT(classify_cell(c, 1).auc, 0.95);
}

TEST(CellToy, TrainingReducesMmd) {
  ExperimentConfig c;
  c.experiment = "cell-toy";
  c.seeds = {1};
  c.hidden = {16};
  c.noise_dim = 2;
  c.psi_residual = true;
  c.cot.lambda1 = 100.0;
  c.cot.optim.epochs = 150;
  c.params = {{"n_per_dose", 100}, {"n_unperturbed", 100}};
  const Report r = run_cell_toy(c);
  ASSERT_EQ(r.table.rows.size(), 3u);
  const auto ct = r.table.column("mmd2_trained"), cu = r.table.column("mmd2_untrained");
  for (const auto& row : r.table.rows)
    EXPECT_LT(std::stod(row[ct]), std::stod(row[cu]));
}

TEST(PromptToy, LossDecreases) {
  ExperimentConfig c;
  c.experiment = "prompt-toy";
  c.seeds = {1};
  c.hidden = {16};
  c.cot.lambda1 = 10.0;
  c.cot.optim.epochs = 100;
  const Report r = run_prompt_toy(c);
  const auto cl = r.table.column("loss");
  ASSERT_EQ(r.table.rows.size(), 2u);
  EXPECT_LT(std::stod(r.table.rows[1][cl]), std::stod(r.table.rows[0][cl]));
}

TEST(Concentration, ExactValueMatchesMonteCarlo) {
  ConcentrationSetup s;
  const double exact = s.exact();
  RngStream rng(5);
  const double big = s.empirical(gen_conditional_gaussian(rng, s.data, 400000));
  EXPECT_NEAR(big, exact, 2e-3);
  EXPECT_GT(exact, 0.0);
  EXPECT_LT(exact, 2.0);
}

TEST(Concentration, ClosedFormPerSampleMmdMatchesSamples) {
  const double s2 = 1.3, mu = 0.4, tau2 = 0.7, y = -0.2;
  RngStream rng(11);
  const Matrix z = (mu + std::sqrt(tau2) * rng.normal_matrix(3000, 1).array()).matrix();
  RowVector yr(1);
  yr(0) = y;
  const double mc = mmd2_to_dirac(Kernel::rbf(s2), WeightedSamples::uniform(z), yr);
  EXPECT_NEAR(harness::detail::rbf_gauss_dirac_mmd2(s2, mu, tau2, y), mc, 2e-2);
}

TEST(Concentration, BoundAndRatio) {
  EXPECT_NEAR(lemma_bound(100, 0.01), 2.0 * std::sqrt(0.02 * std::log(200.0)), 1e-15);
  ExperimentConfig c;
  c.experiment = "concentration";
  c.m_list = {100, 400};
  c.params = {{"resamples", 50}};
  const Report r = run_concentration(c);
  const auto ck = r.table.column("row"), cv = r.table.column("empirical");
  double ratio = 0.0;
  for (const auto& row : r.table.rows)
    if (row[ck] == "ratio") ratio = std::stod(row[cv]);
  EXPECT_GT(ratio, 1.0);
  c.cot.kernel = Kernel::imq(1.0);
  EXPECT_THROW(run_concentration(c), DomainError);
}

TEST(RegIdentity, GapIsRoundoff) {
  ExperimentConfig c;
  c.experiment = "reg-identity";
  c.params = {{"instances", 20}};
  const Report r = run_reg_identity(c);
  const auto cg = r.table.column("gap");
  for (const auto& row : r.table.rows) EXPECT_LT(std::abs(std::stod(row[cg])), 1e-12);
}

TEST(Regression, ShortRunIsFiniteAndDeterministic) {
  ExperimentConfig c = small_training("regression");
  c.cot.lambda2 = 0.0;
  c.params = {{"n_test", 30}};
  const Report a = run_regression(c), b = run_regression(c);
  EXPECT_EQ(csv_string(a.table), csv_string(b.table));
  EXPECT_TRUE(std::isfinite(regression_cell(c, 40, 1).explained_variance));
}

TEST(Dispatch, UnknownExperimentThrows) {
  ExperimentConfig c;
  c.experiment = "unknown";
  EXPECT_THROW(run_experiment(c), DomainError);
}
