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

// Finite-difference checks for every tape primitive and every objective
// variant on small random instances.

#pragma once

#include "cotmmd/diffengine.hpp"
#include "cotmmd/models.hpp"
#include "cotmmd/objectives.hpp"
#include "cotmmd/rng.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cotmmd::harness {

struct GradInstance {
  ad::GraphFunction f;
  std::vector<Matrix> params;
};

struct GradCase {
  std::string name;
  std::function<GradInstance(RngStream&)> make;
};

namespace detail {

/// Normal entries pushed at least `gap` away from zero (keeps relu and
/// divisions away from their kinks).
inline Matrix away_from_zero(RngStream& rng, Eigen::Index r, Eigen::Index c, double gap = 0.05) {
  Matrix m = rng.normal_matrix(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    double& v = m.data()[i];
    if (std::abs(v) < gap) v = v < 0.0 ? v - gap : v + gap;
  }
  return m;
}

/// Scalar probe sum(out .* W) with a fixed random W.
inline ad::Var probe(const ad::Var& out, const Matrix& w) {
  return ad::dot(out, out.tape()->constant(w));
}

using Unary = std::function<ad::Var(const ad::Var&)>;
using Binary = std::function<ad::Var(const ad::Var&, const ad::Var&)>;

inline GradCase unary_case(std::string name, Eigen::Index r, Eigen::Index c, Unary op,
                           bool positive = false) {
  return {std::move(name), [r, c, op, positive](RngStream& rng) {
            Matrix a = away_from_zero(rng, r, c);
            if (positive) a = a.cwiseAbs().array() + 0.5;
            // Output shape is found by a dry run on a scratch tape.
            ad::Tape scratch;
            scratch.set_recording(false);
            const ad::Var o = op(scratch.constant(a));
            const Matrix w = rng.normal_matrix(o.rows(), o.cols());
            GradInstance g;
            g.params = {a};
            g.f = [op, w](ad::Tape&, const std::vector<ad::Var>& p) { return probe(op(p[0]), w); };
            return g;
          }};
}

inline GradCase binary_case(std::string name, Eigen::Index ra, Eigen::Index ca, Eigen::Index rb,
                            Eigen::Index cb, Binary op, bool positive_b = false) {
  return {std::move(name), [=](RngStream& rng) {
            const Matrix a = away_from_zero(rng, ra, ca);
            Matrix b = away_from_zero(rng, rb, cb);
            if (positive_b) b = b.cwiseAbs().array() + 0.5;
            ad::Tape scratch;
            scratch.set_recording(false);
            const ad::Var o = op(scratch.constant(a), scratch.constant(b));
            const Matrix w = rng.normal_matrix(o.rows(), o.cols());
            GradInstance g;
            g.params = {a, b};
            g.f = [op, w](ad::Tape&, const std::vector<ad::Var>& p) {
              return probe(op(p[0], p[1]), w);
            };
            return g;
          }};
}

/// Small networks for the objective checks.
inline ImplicitGenerator small_implicit(Eigen::Index cond, Eigen::Index noise, Eigen::Index out,
                                        std::uint64_t seed, bool residual = false) {
  ImplicitConfig c;
  c.cond_dim = cond;
  c.noise_dim = noise;
  c.out_dim = out;
  c.hidden = {5, 4};
  c.residual = residual;
  c.seed = seed;
  return ImplicitGenerator(c);
}

inline ExplicitConditional small_explicit(Eigen::Index x_dim, Eigen::Index n, bool label_cond,
                                          std::uint64_t seed) {
  ExplicitConfig c;
  c.x_dim = x_dim;
  c.n_labels = n;
  c.label_conditioned = label_cond;
  c.hidden = {5, 4};
  c.seed = seed;
  return ExplicitConditional(c);
}

inline std::vector<Matrix> params_of(Mlp& net) {
  std::vector<Matrix> out;
  for (Matrix* p : net.parameters()) out.push_back(*p);
  return out;
}

inline std::vector<Matrix> concat(std::vector<Matrix> a, const std::vector<Matrix>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<ad::Var> slice(const std::vector<ad::Var>& v, std::size_t begin,
                                  std::size_t count) {
  return {v.begin() + static_cast<std::ptrdiff_t>(begin),
          v.begin() + static_cast<std::ptrdiff_t>(begin + count)};
}

inline CotConfig toy_config(CostTag cost, const Kernel& k) {
  CotConfig c;
  c.lambda1 = 2.0;
  c.lambda2 = 3.0;
  c.cost = cost;
  c.kernel = k;
  return c;
}

inline Matrix one_hot_rows(RngStream& rng, Eigen::Index m, Eigen::Index n) {
  Matrix y = Matrix::Zero(m, n);
  for (Eigen::Index i = 0; i < m; ++i) y(i, static_cast<Eigen::Index>(rng.index(static_cast<std::uint64_t>(n)))) = 1.0;
  return y;
}

inline GradCase implicit_case(std::string name, CostTag cost, Kernel k) {
  return {std::move(name), [cost, k](RngStream& rng) {
            const std::uint64_t s = rng.next_u64();
            auto theta = std::make_shared<ImplicitGenerator>(small_implicit(1, 2, 2, s));
            auto psi = std::make_shared<ImplicitGenerator>(small_implicit(3, 2, 2, s + 1, true));
            const JointDataset src(rng.normal_matrix(2, 1), rng.normal_matrix(2, 2));
            const JointDataset tgt(rng.normal_matrix(3, 1), rng.normal_matrix(3, 2));
            const Matrix eta = rng.normal_matrix(3, 2);
            const Matrix eta_p = rng.normal_matrix(3, 2);
            const CotConfig cfg = toy_config(cost, k);
            GradInstance g;
            g.params = concat(params_of(theta->net()), params_of(psi->net()));
            const std::size_t nt = theta->net().parameters().size();
            const std::size_t np = psi->net().parameters().size();
            g.f = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
              return cot_implicit_loss(t, *theta, slice(p, 0, nt), *psi, slice(p, nt, np), src,
                                       tgt, eta, eta_p, cfg)
                  .total;
            };
            return g;
          }};
}

inline GradCase joint_alt_case() {
  return {"objective.joint_alt", [](RngStream& rng) {
            const std::uint64_t s = rng.next_u64();
            auto theta = std::make_shared<ImplicitGenerator>(small_implicit(1, 2, 1, s));
            auto psi = std::make_shared<ImplicitGenerator>(small_implicit(2, 2, 1, s + 1));
            const JointDataset src(rng.normal_matrix(3, 1), rng.normal_matrix(3, 1));
            const JointDataset tgt(rng.normal_matrix(2, 1), rng.normal_matrix(2, 1));
            const Matrix eta = rng.normal_matrix(3, 2);
            const Matrix eta_p = rng.normal_matrix(3, 2);
            const Matrix eta_pt = rng.normal_matrix(2, 2);
            const CotConfig cfg = toy_config(CostTag::squared_euclidean, Kernel::rbf(0.8));
            GradInstance g;
            g.params = concat(params_of(theta->net()), params_of(psi->net()));
            const std::size_t nt = theta->net().parameters().size();
            const std::size_t np = psi->net().parameters().size();
            g.f = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
              return cot_joint_alt_loss(t, *theta, slice(p, 0, nt), *psi, slice(p, nt, np), src,
                                        tgt, eta, eta_p, eta_pt, Kernel::rbf(1.2), cfg)
                  .total;
            };
            return g;
          }};
}

inline GradCase explicit_case(std::string name, bool classification, Kernel k) {
  return {std::move(name), [classification, k](RngStream& rng) {
            const std::uint64_t s = rng.next_u64();
            const Eigen::Index n = 2;
            auto theta = std::make_shared<ExplicitConditional>(small_explicit(2, n, false, s));
            auto psi = std::make_shared<ExplicitConditional>(small_explicit(2, n, true, s + 1));
            const JointDataset src(rng.normal_matrix(3, 2), one_hot_rows(rng, 3, n));
            const JointDataset tgt(rng.normal_matrix(2, 2), one_hot_rows(rng, 2, n));
            const CotConfig cfg = toy_config(CostTag::squared_euclidean, k);
            const LabelSpace labels = LabelSpace::one_hot(n, cfg.cost, cfg.kernel);
            GradInstance g;
            g.params = concat(params_of(theta->net()), params_of(psi->net()));
            const std::size_t nt = theta->net().parameters().size();
            const std::size_t np = psi->net().parameters().size();
            g.f = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
              if (classification)
                return cot_classification_loss(t, *theta, slice(p, 0, nt), *psi, slice(p, nt, np),
                                               src, labels, cfg)
                    .total;
              return cot_explicit_loss(t, *theta, slice(p, 0, nt), *psi, slice(p, nt, np), src, tgt,
                                       labels, cfg)
                  .total;
            };
            return g;
          }};
}

inline GradCase cell_case(Kernel k) {
  return {"objective.cell", [k](RngStream& rng) {
            const std::uint64_t s = rng.next_u64();
            auto psi = std::make_shared<ImplicitGenerator>(small_implicit(3, 2, 2, s, true));
            const Matrix y0 = rng.normal_matrix(3, 2);
            const std::vector<Matrix> pert{rng.normal_matrix(2, 2), rng.normal_matrix(4, 2)};
            const std::vector<double> doses{0.0, 1.0};
            const Matrix eta = rng.normal_matrix(3, 2);
            const CotConfig cfg = toy_config(CostTag::squared_euclidean, k);
            GradInstance g;
            g.params = params_of(psi->net());
            g.f = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
              return cot_cell_loss(t, *psi, p, doses, y0, pert, eta, cfg).total;
            };
            return g;
          }};
}

inline GradCase prompt_case(Kernel k) {
  return {"objective.prompt", [k](RngStream& rng) {
            const std::uint64_t s = rng.next_u64();
            const Eigen::Index d = 3, n = 2, m = 2;
            auto psi = std::make_shared<ExplicitConditional>(small_explicit(2 * d, n, false, s));
            const Matrix prompts = away_from_zero(rng, n, d);
            const std::vector<Matrix> vis{away_from_zero(rng, m, d), away_from_zero(rng, m, d)};
            const CotConfig cfg = toy_config(CostTag::cosine, k);
            GradInstance g;
            g.params = params_of(psi->net());
            g.f = [=](ad::Tape& t, const std::vector<ad::Var>& p) {
              return cot_prompt_loss(t, *psi, p, prompts, vis, cfg).total;
            };
            return g;
          }};
}

}  // namespace detail

/// Every primitive op followed by every objective variant.
inline std::vector<GradCase> gradcheck_cases() {
  using namespace detail;
  std::vector<GradCase> c;
  c.push_back(binary_case("op.add", 3, 2, 3, 2, [](auto& a, auto& b) { return ad::add(a, b); }));
  c.push_back(binary_case("op.sub", 3, 2, 3, 2, [](auto& a, auto& b) { return ad::sub(a, b); }));
  c.push_back(binary_case("op.mul", 3, 2, 3, 2, [](auto& a, auto& b) { return ad::mul(a, b); }));
  c.push_back(binary_case("op.div", 3, 2, 3, 2, [](auto& a, auto& b) { return ad::div(a, b); }, true));
  c.push_back(unary_case("op.scale", 3, 2, [](auto& a) { return ad::scale(a, -1.7); }));
  c.push_back(unary_case("op.add_scalar", 3, 2, [](auto& a) { return ad::add_scalar(a, 0.3); }));
  c.push_back(binary_case("op.matmul", 3, 4, 4, 2, [](auto& a, auto& b) { return ad::matmul(a, b); }));
  c.push_back(binary_case("op.add_row", 3, 4, 1, 4, [](auto& a, auto& b) { return ad::add_row(a, b); }));
  c.push_back(binary_case("op.scale_rows", 3, 4, 3, 1, [](auto& a, auto& b) { return ad::scale_rows(a, b); }));
  c.push_back(unary_case("op.tanh", 3, 3, [](auto& a) { return ad::tanh(a); }));
  c.push_back(unary_case("op.relu", 3, 3, [](auto& a) { return ad::relu(a); }));
  c.push_back(unary_case("op.exp", 3, 3, [](auto& a) { return ad::exp(a); }));
  c.push_back(unary_case("op.square", 3, 3, [](auto& a) { return ad::square(a); }));
  c.push_back(unary_case("op.sqrt", 3, 3, [](auto& a) { return ad::sqrt(a); }, true));
  c.push_back(unary_case("op.pow", 3, 3, [](auto& a) { return ad::pow(a, -0.5); }, true));
  c.push_back(binary_case("op.sqdist", 4, 3, 2, 3, [](auto& a, auto& b) { return ad::sqdist(a, b); }));
  c.push_back(unary_case("op.block_sqdist", 6, 2, [](auto& a) { return ad::block_sqdist(a, 3); }));
  c.push_back(binary_case("op.block_sqdist_to", 6, 2, 2, 2,
                          [](auto& a, auto& b) { return ad::block_sqdist_to(a, b, 3); }));
  c.push_back(binary_case("op.block_combine", 2, 3, 6, 4,
                          [](auto& a, auto& b) { return ad::block_combine(a, b); }));
  c.push_back(unary_case("op.softmax_rows", 3, 4, [](auto& a) { return ad::softmax_rows(a); }));
  c.push_back(unary_case("op.sum", 3, 4, [](auto& a) { return ad::sum(a); }));
  c.push_back(unary_case("op.mean", 3, 4, [](auto& a) { return ad::mean(a); }));
  c.push_back(unary_case("op.row_sum", 3, 4, [](auto& a) { return ad::row_sum(a); }));
  c.push_back(unary_case("op.row_mean", 3, 4, [](auto& a) { return ad::row_mean(a); }));
  c.push_back(binary_case("op.dot", 3, 4, 3, 4, [](auto& a, auto& b) { return ad::dot(a, b); }));
  c.push_back(binary_case("op.concat_cols", 3, 2, 3, 3,
                          [](auto& a, auto& b) { return ad::concat_cols(a, b); }));
  c.push_back(unary_case("op.rows", 5, 2, [](auto& a) { return ad::rows(a, 1, 3); }));
  c.push_back(binary_case("op.rbf_gram", 4, 2, 3, 2, [](auto& a, auto& b) {
    return cotmmd::detail::kernel_of(Kernel::rbf(0.7), ad::sqdist(a, b));
  }));
  c.push_back(binary_case("op.imq_gram", 4, 2, 3, 2, [](auto& a, auto& b) {
    return cotmmd::detail::kernel_of(Kernel::imq(1.5, true), ad::sqdist(a, b));
  }));
  c.push_back(binary_case("op.cosine_cost", 4, 3, 4, 3, [](auto& a, auto& b) {
    return cotmmd::detail::rowwise_cost(CostTag::cosine, a, b);
  }));
  c.push_back(implicit_case("objective.implicit", CostTag::squared_euclidean, Kernel::rbf(1.0)));
  c.push_back(implicit_case("objective.implicit_imq", CostTag::squared_euclidean, Kernel::imq(1.0)));
  c.push_back(implicit_case("objective.implicit_cosine", CostTag::cosine, Kernel::imq2(2.0)));
  c.push_back(explicit_case("objective.explicit", false, Kernel::rbf(1.0)));
  c.push_back(explicit_case("objective.classification", true, Kernel::imq(0.5)));
  c.push_back(cell_case(Kernel::rbf(1.5)));
  c.push_back(prompt_case(Kernel::rbf(2.0)));
  c.push_back(joint_alt_case());
  return c;
}

struct GradCheckRow {
  std::string name;
  std::uint64_t seed = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t failures = 0;
  bool passed = false;
};

inline GradCheckRow run_grad_case(const GradCase& c, std::uint64_t seed, double tolerance = 1e-4,
                                  double step = 1e-5, double atol = 1e-10) {
  RngStream rng = RngStream(seed).split(c.name);
  GradInstance inst = c.make(rng);
  const ad::GradCheckReport r = ad::grad_check(inst.f, inst.params, step, tolerance, atol);
  GradCheckRow row;
  row.name = c.name;
  row.seed = seed;
  row.coordinates = r.rel_error.size();
  row.max_rel_error = r.max_rel_error;
  row.max_abs_error = r.max_abs_error;
  row.failures = r.failures;
  row.passed = r.passed();
  return row;
}

}  // namespace cotmmd::harness
