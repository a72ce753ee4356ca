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

#include "cotmmd/harness/config.hpp"
#include "cotmmd/harness/gradcheck_suite.hpp"
#include "cotmmd/harness/report.hpp"
#include "cotmmd/kernels.hpp"
#include "cotmmd/models.hpp"
#include "cotmmd/objectives.hpp"
#include "cotmmd/oracles.hpp"
#include "cotmmd/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

namespace cotmmd::harness {

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Small statistics helpers.

inline double median_of(std::vector<double> v) {
  v.erase(std::remove_if(v.begin(), v.end(), [](double d) { return std::isnan(d); }), v.end());
  if (v.empty()) return kNaN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double d : v)
    if (!std::isnan(d)) s += d, ++n;
  return n ? s / static_cast<double>(n) : kNaN;
}

/// Area under the ROC curve via the rank-sum statistic; ties get average
/// ranks. Needs at least one positive and one negative.
inline double roc_auc(const std::vector<double>& score, const std::vector<int>& positive) {
  require_dims(score.size() == positive.size(), "roc_auc: size mismatch");
  std::vector<std::size_t> idx(score.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return score[a] < score[b]; });
  std::vector<double> rank(score.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && score[idx[j + 1]] == score[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = r;
    i = j + 1;
  }
  double n_pos = 0, n_neg = 0, sum = 0;
  for (std::size_t i = 0; i < score.size(); ++i) {
    if (positive[i]) {
      n_pos += 1;
      sum += rank[i];
    } else {
      n_neg += 1;
    }
  }
  require_domain(n_pos > 0 && n_neg > 0, "roc_auc: need both classes");
  return (sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg);
}

/// 1 - Var(y - yhat) / Var(y).
inline double explained_variance(const Vector& y, const Vector& yhat) {
  require_dims(y.size() == yhat.size() && y.size() > 1, "explained_variance: size mismatch");
  auto var = [](const Vector& v) { return (v.array() - v.mean()).square().mean(); };
  return 1.0 - var(y - yhat) / var(y);
}

// ---------------------------------------------------------------------------
// Shared plumbing.

/// Per-cell random streams: everything in a (m, seed) cell derives from
/// RngStream(seed).split(experiment).split(m).
struct CellStreams {
  RngStream root;
  CellStreams(const std::string& experiment, Eigen::Index m, std::uint64_t seed)
      : root(RngStream(seed).split(experiment).split(static_cast<std::uint64_t>(m))) {}
  RngStream data() const { return root.split("data"); }
  RngStream eval() const { return root.split("eval"); }
  std::uint64_t seed_for(const char* what) const { return root.split(what).next_u64(); }
};

inline ConditionalGaussianSpec spec_from_json(const nlohmann::json& j, ConditionalGaussianSpec s) {
  s.alpha = j.value("alpha", s.alpha);
  s.beta = j.value("beta", s.beta);
  s.mean_slope = j.value("mean_slope", s.mean_slope);
  s.mean_intercept = j.value("mean_intercept", s.mean_intercept);
  s.var_slope = j.value("var_slope", s.var_slope);
  s.var_intercept = j.value("var_intercept", s.var_intercept);
  s.var_floor = j.value("var_floor", s.var_floor);
  s.validate();
  return s;
}

struct ImplicitPair {
  ImplicitGenerator theta;
  ImplicitGenerator psi;
};

/// theta: (x, eta') -> target-side sample; psi: ([y, x], eta) -> source-side sample.
inline ImplicitPair make_implicit_pair(const ExperimentConfig& c, Eigen::Index x_dim,
                                       Eigen::Index y_dim, const CellStreams& s) {
  ImplicitConfig tc;
  tc.cond_dim = x_dim;
  tc.noise_dim = c.noise_dim;
  tc.out_dim = y_dim;
  tc.hidden = c.hidden;
  tc.activation = c.activation;
  tc.seed = s.seed_for("theta-init");
  ImplicitConfig pc = tc;
  pc.cond_dim = y_dim + x_dim;
  pc.residual = c.psi_residual;
  pc.seed = s.seed_for("psi-init");
  return {ImplicitGenerator(tc), ImplicitGenerator(pc)};
}

inline CotConfig cell_cot(const ExperimentConfig& c, const CellStreams& s) {
  CotConfig cot = c.cot;
  cot.seed = s.seed_for("train");
  return cot;
}

using PlanSampler = std::function<PlanSamples(const RowVector& x, Eigen::Index n, RngStream& rng)>;

inline PlanSampler trained_sampler(const ImplicitPair& p) {
  return [&p](const RowVector& x, Eigen::Index n, RngStream& rng) {
    return sample_plan(p.theta, p.psi, x, n, rng);
  };
}

/// n standard normal draws shifted and scaled to sample mean 0 and
/// population variance 1 exactly.
inline Vector moment_matched_normal(RngStream& rng, Eigen::Index n) {
  Vector z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
  z.array() -= z.mean();
  z /= std::sqrt(z.squaredNorm() / static_cast<double>(n));
  return z;
}

/// Samples from the optimal monotone coupling of two 1-D Gaussian
/// conditionals: theta_out on the target law, psi_out on the source law,
/// both driven by the same z.
inline PlanSampler gaussian_coupling_sampler(const ConditionalGaussianSpec& source,
                                             const ConditionalGaussianSpec& target,
                                             bool moment_match) {
  return [=](const RowVector& x, Eigen::Index n, RngStream& rng) {
    const Gaussian1D s = conditional_law(source, x(0));
    const Gaussian1D t = conditional_law(target, x(0));
    Vector z = moment_match ? moment_matched_normal(rng, n) : Vector(rng.normal_matrix(n, 1));
    PlanSamples out;
    out.theta_out = (t.mean + t.stddev() * z.array()).matrix();
    out.psi_out = (s.mean + s.stddev() * z.array()).matrix();
    return out;
  };
}

inline std::string divergence_status(const DivergenceError& e) {
  return "diverged@" + std::to_string(e.epoch());
}

/// Appends mean and median summary rows per m over the cells with status ok.
inline void add_summary_rows(Report& r, const std::map<Eigen::Index, std::vector<double>>& per_m,
                             const std::function<std::vector<std::string>(
                                 const std::string& kind, Eigen::Index m, double v)>& make_row) {
  for (const auto& [m, vals] : per_m) {
    r.table.add(make_row("mean", m, mean_of(vals)));
    r.table.add(make_row("median", m, median_of(vals)));
  }
}

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Conditional transport cost convergence.

/// Estimated conditional transport cost E c(theta_out, psi_out) per grid x.
inline std::vector<double> estimate_transport_cost(const PlanSampler& sampler,
                                                   const std::vector<double>& grid,
                                                   Eigen::Index draws, RngStream& rng) {
  std::vector<double> est;
  for (double x : grid) {
    RowVector xr(1);
    xr(0) = x;
    const PlanSamples s = sampler(xr, draws, rng);
    est.push_back((s.theta_out - s.psi_out).rowwise().squaredNorm().mean());
  }
  return est;
}

inline Report run_converge(const ExperimentConfig& c) {
  c.validate();
  const auto src = spec_from_json(c.params.value("source", nlohmann::json::object()),
                                  ConditionalGaussianSpec::converge_source());
  const auto tgt = spec_from_json(c.params.value("target", nlohmann::json::object()),
                                  ConditionalGaussianSpec::converge_target());
  const bool oracle = c.param<bool>("oracle_self_test", false);
  const bool moment_match = c.param<bool>("moment_match_noise", true);
  const auto grid = c.grid();
  std::vector<double> truth;
  for (double x : grid) truth.push_back(gaussian_w2sq(conditional_law(src, x), conditional_law(tgt, x)));

  Report r;
  r.experiment = "converge";
  r.table.columns = {"row", "m", "seed", "x", "estimate", "truth", "mse", "status"};
  r.plot = {"Conditional transport cost vs true W2^2", "x", "cost", false, {}};
  r.plot.series.push_back({"true", grid, truth});
  std::map<Eigen::Index, std::vector<double>> per_m;
  for (Eigen::Index m : c.m_list) {
    std::vector<std::vector<double>> curves;
    for (std::uint64_t seed : c.seeds) {
      const CellStreams s("converge", m, seed);
      std::vector<double> est(grid.size(), kNaN);
      std::string status = "ok";
      RngStream ev = s.eval();
      if (oracle) {
        est = estimate_transport_cost(gaussian_coupling_sampler(src, tgt, moment_match), grid,
                                      c.eval_draws, ev);
      } else {
        RngStream dr = s.data();
        const JointDataset source = gen_conditional_gaussian(dr, src, m);
        const JointDataset target = gen_conditional_gaussian(dr, tgt, m);
        ImplicitPair p = make_implicit_pair(c, 1, 1, s);
        try {
          train_implicit(p.theta, p.psi, source, target, cell_cot(c, s));
          est = estimate_transport_cost(trained_sampler(p), grid, c.eval_draws, ev);
        } catch (const DivergenceError& e) {
          status = divergence_status(e);
        }
      }
      double mse = 0.0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        mse += (est[g] - truth[g]) * (est[g] - truth[g]) / static_cast<double>(grid.size());
        r.table.add({"point", cell(m), cell(seed), cell(grid[g]), cell(est[g]), cell(truth[g]), "", status});
      }
      if (status != "ok") mse = kNaN;
      r.table.add({"cell", cell(m), cell(seed), "", "", "", cell(mse), status});
      per_m[m].push_back(mse);
      curves.push_back(est);
    }
    std::vector<double> avg(grid.size(), 0.0);
    for (std::size_t g = 0; g < grid.size(); ++g) {
      std::vector<double> col;
      for (const auto& cv : curves) col.push_back(cv[g]);
      avg[g] = median_of(col);
    }
    r.plot.series.push_back({"m=" + std::to_string(m) + " (median)", grid, avg});
  }
  add_summary_rows(r, per_m, [](const std::string& kind, Eigen::Index m, double v) {
    return std::vector<std::string>{kind, cell(m), "", "", "", "", cell(v), "ok"};
  });
  for (const auto& [m, v] : per_m)
    r.notes.push_back("m=" + std::to_string(m) + " median grid-MSE " + fmt_num(median_of(v)) +
                      " mean " + fmt_num(mean_of(v)));
  return r;
}

/// Median grid-MSE per m from a converge or barycenter report.
inline std::map<Eigen::Index, double> summary_by_m(const Report& r, const std::string& kind,
                                                   const std::string& column) {
  std::map<Eigen::Index, double> out;
  const auto ci = r.table.column("row"), cm = r.table.column("m"), cv = r.table.column(column);
  for (const auto& row : r.table.rows)
    if (row[ci] == kind) out[std::stoll(row[cm])] = std::strtod(row[cv].c_str(), nullptr);
  return out;
}

// ---------------------------------------------------------------------------
// Barycenter via McCann interpolation.

inline Report run_barycenter(const ExperimentConfig& c) {
  c.validate();
  const auto src = spec_from_json(c.params.value("source", nlohmann::json::object()),
                                  ConditionalGaussianSpec::barycenter_source());
  const auto tgt = spec_from_json(c.params.value("target", nlohmann::json::object()),
                                  ConditionalGaussianSpec::barycenter_target());
  const double rho = c.param<double>("rho", 0.5);
  const bool oracle = c.param<bool>("oracle_self_test", false);
  require_domain(rho >= 0.0 && rho <= 1.0, "barycenter: rho must lie in [0, 1]");
  const auto grid = c.grid();

  Report r;
  r.experiment = "barycenter";
  r.table.columns = {"row", "m", "seed", "x", "w1", "w1_var2.5", "mse", "mse_var2.5", "status"};
  r.plot = {"W1 between plan barycenter and analytic barycenter", "m", "W1-MSE", true, {}};
  std::map<Eigen::Index, std::vector<double>> per_m, per_m_25;
  for (Eigen::Index m : c.m_list) {
    for (std::uint64_t seed : c.seeds) {
      const CellStreams s("barycenter", m, seed);
      RngStream ev = s.eval();
      std::string status = "ok";
      std::vector<double> w1(grid.size(), kNaN), w1_25(grid.size(), kNaN);
      ImplicitPair p;
      PlanSampler sampler;
      if (oracle) {
        sampler = gaussian_coupling_sampler(src, tgt, false);
      } else {
        RngStream dr = s.data();
        const JointDataset source = gen_conditional_gaussian(dr, src, m);
        const JointDataset target = gen_conditional_gaussian(dr, tgt, m);
        p = make_implicit_pair(c, 1, 1, s);
        try {
          train_implicit(p.theta, p.psi, source, target, cell_cot(c, s));
          sampler = trained_sampler(p);
        } catch (const DivergenceError& e) {
          status = divergence_status(e);
        }
      }
      if (sampler) {
        for (std::size_t g = 0; g < grid.size(); ++g) {
          RowVector xr(1);
          xr(0) = grid[g];
          const PlanSamples ps = sampler(xr, c.eval_draws, ev);
          const Vector b = mccann_interpolate(rho, Vector(ps.psi_out.col(0)), Vector(ps.theta_out.col(0)));
          const Gaussian1D bary =
              gaussian_barycenter(conditional_law(src, grid[g]), conditional_law(tgt, grid[g]), rho);
          std::vector<double> ours(b.data(), b.data() + b.size()), ref, ref25;
          for (Eigen::Index i = 0; i < c.eval_draws; ++i) {
            const double z = ev.normal();
            ref.push_back(bary.mean + bary.stddev() * z);
            ref25.push_back(bary.mean + std::sqrt(2.5) * z);
          }
          w1[g] = empirical_w1_1d(ours, ref);
          w1_25[g] = empirical_w1_1d(ours, ref25);
        }
      }
      double mse = 0.0, mse25 = 0.0;
      for (std::size_t g = 0; g < grid.size(); ++g) {
        mse += w1[g] * w1[g] / static_cast<double>(grid.size());
        mse25 += w1_25[g] * w1_25[g] / static_cast<double>(grid.size());
        r.table.add({"point", cell(m), cell(seed), cell(grid[g]), cell(w1[g]), cell(w1_25[g]), "", "", status});
      }
      r.table.add({"cell", cell(m), cell(seed), "", "", "", cell(mse), cell(mse25), status});
      per_m[m].push_back(mse);
      per_m_25[m].push_back(mse25);
    }
  }
  for (const auto& [m, v] : per_m) {
    r.table.add({"mean", cell(m), "", "", "", "", cell(mean_of(v)), cell(mean_of(per_m_25[m])), "ok"});
    r.table.add({"median", cell(m), "", "", "", "", cell(median_of(v)), cell(median_of(per_m_25[m])), "ok"});
    r.notes.push_back("m=" + std::to_string(m) + " median W1-MSE " + fmt_num(median_of(v)) +
                      " (vs variance-2.5 reading " + fmt_num(median_of(per_m_25[m])) + ")");
  }
  Series med{"median (var 2.25)", {}, {}}, med25{"median (var 2.5)", {}, {}};
  for (const auto& [m, v] : per_m) {
    med.x.push_back(static_cast<double>(m));
    med.y.push_back(median_of(v));
    med25.x.push_back(static_cast<double>(m));
    med25.y.push_back(median_of(per_m_25[m]));
  }
  r.plot.series = {med, med25};
  return r;
}

// ---------------------------------------------------------------------------
// Toy classification.

struct ClassifyResult {
  double auc = kNaN;
  double accuracy = kNaN;
  double final_loss = kNaN;
  std::string status = "ok";
};

inline ClassifyResult classify_cell(const ExperimentConfig& c, std::uint64_t seed) {
  const int n_classes = c.param<int>("n_classes", 3);
  const double separation = c.param<double>("separation", 6.0);
  const Eigen::Index n_train = c.param<Eigen::Index>("n_train", 300);
  const Eigen::Index n_test = c.param<Eigen::Index>("n_test", 300);
  const CellStreams s("classify", n_train, seed);
  RngStream dr = s.data();
  const JointDataset train = gen_toy_classification(dr, n_classes, n_train, separation);
  const JointDataset test = gen_toy_classification(dr, n_classes, n_test, separation);
  ExplicitConfig ec;
  ec.x_dim = n_classes;
  ec.n_labels = n_classes;
  ec.hidden = c.hidden;
  ec.activation = c.activation;
  ec.seed = s.seed_for("classifier-init");
  ExplicitConditional clf(ec);
  ExplicitConfig pc = ec;
  pc.label_conditioned = true;
  pc.seed = s.seed_for("psi-init");
  ExplicitConditional psi(pc);
  const LabelSpace labels = LabelSpace::one_hot(n_classes, c.cot.cost, c.cot.kernel);
  ClassifyResult out;
  try {
    const auto trace = train_classifier(clf, psi, train, labels, cell_cot(c, s));
    out.final_loss = trace.empty() ? kNaN : trace.back().terms.total;
  } catch (const DivergenceError& e) {
    out.status = divergence_status(e);
    return out;
  }
  const Matrix prob = clf.forward(test.x);
  double auc = 0.0;
  for (int k = 0; k < n_classes; ++k) {
    std::vector<double> score;
    std::vector<int> pos;
    for (Eigen::Index i = 0; i < n_test; ++i) {
      score.push_back(prob(i, k));
      pos.push_back(test.y(i, k) > 0.5);
    }
    auc += roc_auc(score, pos) / n_classes;
  }
  int correct = 0;
  for (Eigen::Index i = 0; i < n_test; ++i) {
    Eigen::Index a = 0, b = 0;
    prob.row(i).maxCoeff(&a);
    test.y.row(i).maxCoeff(&b);
    correct += a == b;
  }
  out.auc = auc;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(n_test);
  return out;
}

inline Report run_classify(const ExperimentConfig& c) {
  c.validate();
  Report r;
  r.experiment = "classify";
  r.table.columns = {"row", "seed", "auc", "accuracy", "final_loss", "status"};
  r.plot = {"One-vs-rest AUC per seed", "seed", "AUC", false, {}};
  std::vector<double> aucs;
  Series s{"auc", {}, {}};
  for (std::uint64_t seed : c.seeds) {
    const ClassifyResult res = classify_cell(c, seed);
    r.table.add({"cell", cell(seed), cell(res.auc), cell(res.accuracy), cell(res.final_loss), res.status});
    aucs.push_back(res.auc);
    s.x.push_back(static_cast<double>(seed));
    s.y.push_back(res.auc);
  }
  r.table.add({"median", "", cell(median_of(aucs)), "", "", "ok"});
  r.plot.series.push_back(s);
  r.notes.push_back("median AUC " + fmt_num(median_of(aucs)));
  return r;
}

// ---------------------------------------------------------------------------
// Toy dosage response.

inline Report run_cell_toy(const ExperimentConfig& c) {
  c.validate();
  const auto doses = c.param<std::vector<double>>("doses", {10.0, 100.0, 1000.0});
  const auto shift_v = c.param<std::vector<double>>("shift_per_log_dose", {0.5, -0.25});
  const Eigen::Index n_per = c.param<Eigen::Index>("n_per_dose", 200);
  const Eigen::Index n_unperturbed = c.param<Eigen::Index>("n_unperturbed", 200);
  RowVector shift(static_cast<Eigen::Index>(shift_v.size()));
  for (std::size_t i = 0; i < shift_v.size(); ++i) shift(static_cast<Eigen::Index>(i)) = shift_v[i];
  const Eigen::Index d = shift.size();

  Report r;
  r.experiment = "cell-toy";
  r.table.columns = {"row", "seed", "dose", "mmd2_trained", "mmd2_untrained", "shift_error", "status"};
  r.plot = {"Per-dose MMD^2 after training", "dose", "MMD^2", true, {}};
  for (std::uint64_t seed : c.seeds) {
    const CellStreams s("cell-toy", n_unperturbed, seed);
    RngStream dr = s.data();
    const ToyCellData data = gen_toy_cell(dr, doses, std::vector<Eigen::Index>(doses.size(), n_per),
                                          n_unperturbed, shift);
    std::vector<double> log_doses;
    for (std::size_t q = 0; q < doses.size(); ++q) log_doses.push_back(data.log_dose(q));
    ImplicitConfig pc;
    pc.cond_dim = d + 1;
    pc.noise_dim = c.noise_dim;
    pc.out_dim = d;
    pc.hidden = c.hidden;
    pc.activation = c.activation;
    pc.residual = c.psi_residual;
    pc.seed = s.seed_for("psi-init");
    ImplicitGenerator psi(pc);
    const ImplicitGenerator untrained = psi;
    std::string status = "ok";
    try {
      train_cell(psi, log_doses, data.unperturbed, data.perturbed, cell_cot(c, s));
    } catch (const DivergenceError& e) {
      status = divergence_status(e);
    }
    RngStream ev = s.eval();
    Series se{"seed " + std::to_string(seed), {}, {}};
    for (std::size_t q = 0; q < doses.size(); ++q) {
      Matrix cond(n_unperturbed, d + 1);
      cond << data.unperturbed, Matrix::Constant(n_unperturbed, 1, log_doses[q]);
      const Matrix noise = ev.normal_matrix(n_unperturbed, c.noise_dim);
      const auto truth = WeightedSamples::uniform(data.perturbed[q]);
      double trained = kNaN, shift_err = kNaN;
      if (status == "ok") {
        const Matrix gen = psi.sample(cond, noise);
        trained = mmd2(c.cot.kernel, WeightedSamples::uniform(gen), truth);
        const RowVector moved = gen.colwise().mean() - data.unperturbed.colwise().mean();
        shift_err = (moved - data.true_shift[q]).norm();
      }
      const double before =
          mmd2(c.cot.kernel, WeightedSamples::uniform(untrained.sample(cond, noise)), truth);
      r.table.add({"dose", cell(seed), cell(doses[q]), cell(trained), cell(before), cell(shift_err), status});
      se.x.push_back(doses[q]);
      se.y.push_back(trained);
    }
    r.plot.series.push_back(se);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Toy prompt learning on synthetic features.

inline Report run_prompt_toy(const ExperimentConfig& c) {
  c.validate();
  const Eigen::Index n_prompts = c.param<Eigen::Index>("n_prompts", 4);
  const Eigen::Index k_images = c.param<Eigen::Index>("n_images", 8);
  const Eigen::Index m_feats = c.param<Eigen::Index>("n_visual", 6);
  const Eigen::Index dim = c.param<Eigen::Index>("dim", 5);
  const double noise = c.param<double>("feature_noise", 0.3);

  Report r;
  r.experiment = "prompt-toy";
  r.table.columns = {"row", "seed", "epoch", "loss", "transport", "reg1", "marginal_l1", "status"};
  r.plot = {"Prompt objective over training", "epoch", "loss", false, {}};
  for (std::uint64_t seed : c.seeds) {
    const CellStreams s("prompt-toy", k_images, seed);
    RngStream dr = s.data();
    const Matrix prompts = dr.normal_matrix(n_prompts, dim);
    std::vector<Matrix> visual;
    for (Eigen::Index q = 0; q < k_images; ++q) {
      Matrix v(m_feats, dim);
      for (Eigen::Index j = 0; j < m_feats; ++j)
        v.row(j) = prompts.row(static_cast<Eigen::Index>(dr.index(static_cast<std::uint64_t>(n_prompts)))) +
                   noise * dr.normal_matrix(1, dim);
      visual.push_back(std::move(v));
    }
    ExplicitConfig pc;
    pc.x_dim = 2 * dim;
    pc.n_labels = n_prompts;
    pc.hidden = c.hidden;
    pc.activation = c.activation;
    pc.seed = s.seed_for("psi-init");
    ExplicitConditional psi(pc);
    const CotConfig cot = cell_cot(c, s);
    std::string status = "ok";
    std::vector<TraceRow> trace;
    try {
      trace = train({&psi.net()}, cot.optim, 1, cot.seed,
                    [&](ad::Tape& t, const std::vector<std::vector<ad::Var>>& p, long, RngStream&) {
                      return cot_prompt_loss(t, psi, p[0], prompts, visual, cot);
                    });
    } catch (const DivergenceError& e) {
      status = divergence_status(e);
    }
    ad::Tape t;
    const auto p = psi.net().bind(t);
    const LossNodes final_loss = cot_prompt_loss(t, psi, p, prompts, visual, cot);
    // Cumulative marginal vs uniform, recomputed outside the graph.
    Matrix in(k_images * m_feats, 2 * dim);
    for (Eigen::Index q = 0; q < k_images; ++q) {
      const RowVector xq = visual[static_cast<std::size_t>(q)].colwise().mean();
      for (Eigen::Index j = 0; j < m_feats; ++j)
        in.row(q * m_feats + j) << visual[static_cast<std::size_t>(q)].row(j), xq;
    }
    const RowVector marg = psi.forward(in).colwise().mean();
    const double l1 = (marg.array() - 1.0 / static_cast<double>(n_prompts)).abs().sum();
    Series se{"seed " + std::to_string(seed), {}, {}};
    for (const auto& row : trace) {
      se.x.push_back(row.epoch);
      se.y.push_back(row.terms.total);
    }
    r.plot.series.push_back(se);
    const LossTerms ft = LossTerms::of(final_loss);
    r.table.add({"initial", cell(seed), "0", trace.empty() ? "nan" : cell(trace.front().terms.total),
                 trace.empty() ? "nan" : cell(trace.front().terms.transport),
                 trace.empty() ? "nan" : cell(trace.front().terms.reg1), "", status});
    r.table.add({"final", cell(seed), cell(static_cast<int>(trace.size())), cell(ft.total),
                 cell(ft.transport), cell(ft.reg1), cell(l1), status});
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient checks.

inline Report run_gradcheck(const ExperimentConfig& c) {
  c.validate();
  const double tol = c.param<double>("tolerance", 1e-4);
  const double step = c.param<double>("step", 1e-5);
  const double atol = c.param<double>("atol", 1e-10);
  Report r;
  r.experiment = "gradcheck";
  r.table.columns = {"case", "seed", "coordinates", "max_rel_error", "max_abs_error", "failures", "passed"};
  r.plot = {"Worst relative error per case", "case index", "max rel error", false, {}};
  Series se{"max rel error", {}, {}};
  int idx = 0;
  std::size_t failed = 0;
  for (const auto& gc : gradcheck_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed : c.seeds) {
      const GradCheckRow row = run_grad_case(gc, seed, tol, step, atol);
      r.table.add({row.name, cell(seed), cell(static_cast<std::uint64_t>(row.coordinates)),
                   cell(row.max_rel_error), cell(row.max_abs_error),
                   cell(static_cast<std::uint64_t>(row.failures)), cell(row.passed)});
      worst = std::max(worst, row.max_rel_error);
      failed += !row.passed;
    }
    se.x.push_back(idx++);
    se.y.push_back(worst);
  }
  r.plot.series.push_back(se);
  r.notes.push_back(std::to_string(failed) + " failing (case, seed) pairs");
  return r;
}

// ---------------------------------------------------------------------------
// Concentration of the empirical regularizer.

namespace detail {

/// Closed-form MMD^2(N(mu, tau2), delta_y) for the RBF kernel with
/// bandwidth s2 (normalized kernel, so k(y, y) = 1).
inline double rbf_gauss_dirac_mmd2(double s2, double mu, double tau2, double y) {
  const double kzz = std::sqrt(s2 / (s2 + 2.0 * tau2));
  const double kzy = std::sqrt(s2 / (s2 + tau2)) * std::exp(-(y - mu) * (y - mu) / (2.0 * (s2 + tau2)));
  return kzz - 2.0 * kzy + 1.0;
}

/// E_{y ~ N(m, v)} of rbf_gauss_dirac_mmd2.
inline double rbf_gauss_gauss_expected(double s2, double mu, double tau2, double m, double v) {
  const double kzz = std::sqrt(s2 / (s2 + 2.0 * tau2));
  const double w = s2 + tau2;
  const double kzy = std::sqrt(s2 / w) * std::sqrt(w / (w + v)) * std::exp(-(m - mu) * (m - mu) / (2.0 * (w + v)));
  return kzz - 2.0 * kzy + 1.0;
}

inline double beta_pdf(double x, double a, double b) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  const double lb = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
  return std::exp((a - 1.0) * std::log(x) + (b - 1.0) * std::log1p(-x) - lb);
}

}  // namespace detail

struct ConcentrationSetup {
  ConditionalGaussianSpec data = ConditionalGaussianSpec::converge_source();
  /// Fixed plan pi(. | x) = N(a x + b, tau2).
  double a = 2.0;
  double b = -1.0;
  double tau2 = 0.5;
  double sigma2 = 1.0;

  double plan_mean(double x) const { return a * x + b; }

  /// Exact regularizer by composite Simpson over x (the y integral is closed form).
  double exact(int intervals = 20000) const {
    auto f = [&](double x) {
      return detail::beta_pdf(x, data.alpha, data.beta) *
             detail::rbf_gauss_gauss_expected(sigma2, plan_mean(x), tau2, data.mean(x), data.variance(x));
    };
    const double h = 1.0 / intervals;
    double s = f(0.0) + f(1.0);
    for (int i = 1; i < intervals; ++i) s += (i % 2 ? 4.0 : 2.0) * f(i * h);
    return s * h / 3.0;
  }

  double empirical(const JointDataset& d) const {
    double s = 0.0;
    for (Eigen::Index i = 0; i < d.size(); ++i)
      s += detail::rbf_gauss_dirac_mmd2(sigma2, plan_mean(d.x(i, 0)), tau2, d.y(i, 0));
    return s / static_cast<double>(d.size());
  }
};

inline double lemma_bound(Eigen::Index m, double delta) {
  return 2.0 * std::sqrt(2.0 / static_cast<double>(m) * std::log(2.0 / delta));
}

inline Report run_concentration(const ExperimentConfig& c) {
  c.validate();
  require_domain(c.cot.kernel.family == KernelFamily::rbf,
                 "concentration: the closed-form plan needs the RBF kernel");
  ConcentrationSetup setup;
  setup.a = c.param<double>("plan_slope", setup.a);
  setup.b = c.param<double>("plan_intercept", setup.b);
  setup.tau2 = c.param<double>("plan_variance", setup.tau2);
  setup.sigma2 = c.cot.kernel.sigma2;
  const int resamples = c.param<int>("resamples", 200);
  const double delta = c.param<double>("delta", 0.01);
  const double exact = setup.exact();

  Report r;
  r.experiment = "concentration";
  r.table.columns = {"row", "m", "seed", "resample", "empirical", "exact", "deviation", "bound"};
  r.plot = {"Spread of the empirical regularizer", "m", "max - min", true, {}};
  Series spread_s{"spread", {}, {}}, bound_s{"bound", {}, {}};
  for (std::uint64_t seed : c.seeds) {
    std::vector<double> spreads;
    for (Eigen::Index m : c.m_list) {
      const CellStreams s("concentration", m, seed);
      RngStream dr = s.data();
      double lo = std::numeric_limits<double>::infinity(), hi = -lo, worst = 0.0;
      for (int k = 0; k < resamples; ++k) {
        const double e = setup.empirical(gen_conditional_gaussian(dr, setup.data, m));
        lo = std::min(lo, e);
        hi = std::max(hi, e);
        worst = std::max(worst, std::abs(e - exact));
        r.table.add({"resample", cell(m), cell(seed), cell(k), cell(e), cell(exact),
                     cell(std::abs(e - exact)), cell(lemma_bound(m, delta))});
      }
      r.table.add({"spread", cell(m), cell(seed), "", cell(hi - lo), cell(exact), cell(worst),
                   cell(lemma_bound(m, delta))});
      spreads.push_back(hi - lo);
      spread_s.x.push_back(static_cast<double>(m));
      spread_s.y.push_back(hi - lo);
      bound_s.x.push_back(static_cast<double>(m));
      bound_s.y.push_back(lemma_bound(m, delta));
    }
    for (std::size_t i = 0; i + 1 < spreads.size(); ++i) {
      const double ratio = spreads[i] / spreads[i + 1];
      r.table.add({"ratio", cell(c.m_list[i + 1]), cell(seed), "", cell(ratio), "", "", ""});
      r.notes.push_back("spread ratio m=" + std::to_string(c.m_list[i]) + " -> " +
                        std::to_string(c.m_list[i + 1]) + ": " + fmt_num(ratio));
    }
  }
  r.plot.series = {spread_s, bound_s};
  return r;
}

// ---------------------------------------------------------------------------
// Regularizer identity on enumerable joints.

inline Report run_reg_identity(const ExperimentConfig& c) {
  c.validate();
  const int instances = c.param<int>("instances", 50);
  const int max_support = c.param<int>("max_support", 4);
  Report r;
  r.experiment = "reg-identity";
  r.table.columns = {"seed", "instance", "nx", "ny", "gap", "v_s", "joint_a", "conditional_a"};
  r.plot = {"Regularizer identity gap", "instance", "|gap|", false, {}};
  Series se{"|gap|", {}, {}};
  double worst = 0.0;
  for (std::uint64_t seed : c.seeds) {
    RngStream rng = RngStream(seed).split("reg-identity");
    for (int k = 0; k < instances; ++k) {
      const Eigen::Index nx = 2 + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(max_support - 1)));
      const Eigen::Index ny = 2 + static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(max_support - 1)));
      DiscreteJoint s;
      s.y_support = rng.normal_matrix(ny, 2);
      s.prob = Matrix(nx, ny);
      for (Eigen::Index i = 0; i < s.prob.size(); ++i) s.prob(i) = rng.uniform();
      s.prob /= s.prob.sum();
      auto plan = [&] {
        Matrix p(nx, ny);
        for (Eigen::Index i = 0; i < p.size(); ++i) p(i) = rng.uniform();
        for (Eigen::Index a = 0; a < nx; ++a) p.row(a) /= p.row(a).sum();
        return p;
      };
      const Matrix pa = plan(), pb = plan();
      const double gap = regularizer_equivalence_gap(c.cot.kernel, s, pa, pb);
      const RegularizerForms fa = regularizer_forms(c.cot.kernel, s, pa);
      r.table.add({cell(seed), cell(k), cell(nx), cell(ny), cell(gap),
                   cell(regularizer_constant(c.cot.kernel, s)), cell(fa.joint), cell(fa.conditional)});
      se.x.push_back(static_cast<double>(se.x.size()));
      se.y.push_back(std::abs(gap));
      worst = std::max(worst, std::abs(gap));
    }
  }
  r.plot.series.push_back(se);
  r.notes.push_back("max |gap| " + fmt_num(worst));
  return r;
}

// ---------------------------------------------------------------------------
// Toy implicit regression.

struct RegressionResult {
  double explained_variance = kNaN;
  double final_loss = kNaN;
  std::string status = "ok";
  std::vector<double> test_x, test_y, pred;
};

inline RegressionResult regression_cell(const ExperimentConfig& c, Eigen::Index m, std::uint64_t seed) {
  const double amplitude = c.param<double>("amplitude", 3.0);
  const double noise_sd = c.param<double>("noise_sd", 0.25);
  const Eigen::Index n_test = c.param<Eigen::Index>("n_test", 200);
  const CellStreams s("regression", m, seed);
  RngStream dr = s.data();
  const JointDataset train = gen_toy_regression(dr, m, amplitude, noise_sd);
  const JointDataset test = gen_toy_regression(dr, n_test, amplitude, noise_sd);
  ImplicitPair p = make_implicit_pair(c, 1, 1, s);
  RegressionResult out;
  try {
    const auto trace = train_implicit(p.theta, p.psi, train, JointDataset{}, cell_cot(c, s));
    out.final_loss = trace.empty() ? kNaN : trace.back().terms.total;
  } catch (const DivergenceError& e) {
    out.status = divergence_status(e);
    return out;
  }
  RngStream ev = s.eval();
  Vector pred(n_test);
  for (Eigen::Index i = 0; i < n_test; ++i) {
    const PlanSamples ps = sample_plan(p.theta, p.psi, test.x.row(i), c.eval_draws, ev);
    pred(i) = ps.psi_out.mean();
    out.test_x.push_back(test.x(i, 0));
    out.test_y.push_back(test.y(i, 0));
    out.pred.push_back(pred(i));
  }
  out.explained_variance = explained_variance(test.y.col(0), pred);
  return out;
}

inline Report run_regression(const ExperimentConfig& c) {
  c.validate();
  Report r;
  r.experiment = "regression";
  r.table.columns = {"row", "m", "seed", "explained_variance", "final_loss", "status"};
  r.plot = {"Implicit regression: chain-mean prediction", "x", "y", false, {}};
  std::map<Eigen::Index, std::vector<double>> per_m;
  for (Eigen::Index m : c.m_list)
    for (std::uint64_t seed : c.seeds) {
      RegressionResult res = regression_cell(c, m, seed);
      r.table.add({"cell", cell(m), cell(seed), cell(res.explained_variance), cell(res.final_loss), res.status});
      per_m[m].push_back(res.explained_variance);
      if (r.plot.series.empty() && !res.test_x.empty()) {
        std::vector<std::size_t> order(res.test_x.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return res.test_x[a] < res.test_x[b]; });
        Series obs{"test data", {}, {}}, fit{"prediction", {}, {}};
        for (auto i : order) {
          obs.x.push_back(res.test_x[i]);
          obs.y.push_back(res.test_y[i]);
          fit.x.push_back(res.test_x[i]);
          fit.y.push_back(res.pred[i]);
        }
        r.plot.series = {obs, fit};
      }
    }
  for (const auto& [m, v] : per_m) {
    r.table.add({"median", cell(m), "", cell(median_of(v)), "", "ok"});
    r.notes.push_back("m=" + std::to_string(m) + " median explained variance " + fmt_num(median_of(v)));
  }
  return r;
}

// ---------------------------------------------------------------------------

inline Report run_experiment(const ExperimentConfig& c) {
  if (c.experiment == "converge") return run_converge(c);
  if (c.experiment == "barycenter") return run_barycenter(c);
  if (c.experiment == "classify") return run_classify(c);
  if (c.experiment == "cell-toy") return run_cell_toy(c);
  if (c.experiment == "prompt-toy") return run_prompt_toy(c);
  if (c.experiment == "gradcheck") return run_gradcheck(c);
  if (c.experiment == "concentration") return run_concentration(c);
  if (c.experiment == "reg-identity") return run_reg_identity(c);
  if (c.experiment == "regression") return run_regression(c);
  throw DomainError("unknown experiment '" + c.experiment + "'");
}

}  // namespace cotmmd::harness
