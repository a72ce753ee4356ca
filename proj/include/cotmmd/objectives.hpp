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

// MMD-regularized conditional OT objectives on the autodiff tape.
//
// Conventions shared by every variant:
//   * pi_theta generates samples that are matched against the target
//     responses (the reg2 term), pi_psi maps them back and its output is
//     matched against the source responses (the reg1 term).
//   * The transport term averages c(theta output, psi output) over the
//     source covariates (the auxiliary measure is the empirical source
//     covariate law).
//   * MMD^2 is the biased V-statistic; on the graph each per-sample MMD^2 is
//     passed through relu so round-off never makes it negative.

#pragma once

#include "cotmmd/dataset.hpp"
#include "cotmmd/diffengine.hpp"
#include "cotmmd/kernels.hpp"
#include "cotmmd/models.hpp"
#include "cotmmd/rng.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

namespace cotmmd {

enum class CostTag { squared_euclidean, cosine };

inline std::string to_string(CostTag c) {
  return c == CostTag::squared_euclidean ? "sqeuclidean" : "cosine";
}

inline CostTag cost_from_string(const std::string& s) {
  if (s == "sqeuclidean" || s == "squared_euclidean") return CostTag::squared_euclidean;
  if (s == "cosine") return CostTag::cosine;
  throw DomainError("unknown cost '" + s + "'");
}

/// n x p matrix of c(A_i, B_j).
inline Matrix ground_cost(CostTag tag, const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "ground_cost: " + shape_str(a) + " vs " + shape_str(b));
  if (tag == CostTag::squared_euclidean) return pairwise_sqdist(a, b);
  const Vector na = a.rowwise().norm();
  const Vector nb = b.rowwise().norm();
  require_domain((na.array() > 0.0).all() && (nb.array() > 0.0).all(),
                 "ground_cost: cosine cost of a zero-norm row");
  Matrix c(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j)
      c(i, j) = 1.0 - a.row(i).dot(b.row(j)) / (na(i) * nb(j));
  return c;
}

namespace detail {

/// n x 1 column of c(a_i, b_i) on the graph.
inline ad::Var rowwise_cost(CostTag tag, const ad::Var& a, const ad::Var& b) {
  if (tag == CostTag::squared_euclidean) return ad::row_sum(ad::square(ad::sub(a, b)));
  require_domain((a.value().rowwise().norm().array() > 0.0).all() &&
                     (b.value().rowwise().norm().array() > 0.0).all(),
                 "cosine cost of a zero-norm row");
  ad::Var ab = ad::row_sum(ad::mul(a, b));
  ad::Var na = ad::sqrt(ad::row_sum(ad::square(a)));
  ad::Var nb = ad::sqrt(ad::row_sum(ad::square(b)));
  return ad::add_scalar(ad::scale(ad::div(ab, ad::mul(na, nb)), -1.0), 1.0);
}

/// Kernel values from squared distances, on the graph.
inline ad::Var kernel_of(const Kernel& k, const ad::Var& d2) {
  k.validate();
  ad::Var v;
  switch (k.family) {
    case KernelFamily::rbf: v = ad::exp(ad::scale(d2, -1.0 / (2.0 * k.sigma2))); break;
    case KernelFamily::imq: v = ad::pow(ad::add_scalar(d2, k.sigma2), -0.5); break;
    case KernelFamily::imq2:
      v = ad::pow(ad::scale(ad::add_scalar(d2, 1.0), 1.0 / k.sigma2), -0.5);
      break;
  }
  return k.rescaled ? ad::scale(v, 1.0 / k.raw_diagonal()) : v;
}

/// Row i*block + j = x_i.
inline Matrix repeat_rows(const Matrix& x, Eigen::Index block) {
  Matrix out(x.rows() * block, x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < block; ++j) out.row(i * block + j) = x.row(i);
  return out;
}

/// Row i*block + j = noise_j, for `count` blocks.
inline Matrix tile_rows(const Matrix& noise, Eigen::Index count) {
  Matrix out(count * noise.rows(), noise.cols());
  for (Eigen::Index i = 0; i < count; ++i) out.middleRows(i * noise.rows(), noise.rows()) = noise;
  return out;
}

/// Per-block MMD^2 between the empirical measure of each block of `block`
/// generated rows and the Dirac at the matching row of y; B x 1.
inline ad::Var block_mmd2_to_dirac(const Kernel& k, const ad::Var& g, const ad::Var& y,
                                   Eigen::Index block) {
  ad::Var kgg = ad::row_mean(kernel_of(k, ad::block_sqdist(g, block)));
  ad::Var kgy = ad::row_mean(kernel_of(k, ad::block_sqdist_to(g, y, block)));
  return ad::relu(ad::add_scalar(ad::sub(kgg, ad::scale(kgy, 2.0)), k.diagonal()));
}

/// MMD^2 between the uniform empirical measures of g and p (p constant).
inline ad::Var sample_mmd2(const Kernel& k, const ad::Var& g, const Matrix& p) {
  ad::Tape& t = *g.tape();
  const double kpp = gram(k, p, p).mean();
  ad::Var kgg = ad::mean(kernel_of(k, ad::sqdist(g, g)));
  ad::Var kgp = ad::mean(kernel_of(k, ad::sqdist(g, t.constant(p))));
  return ad::relu(ad::add_scalar(ad::sub(kgg, ad::scale(kgp, 2.0)), kpp));
}

inline void check_finite(const ad::Var& v, const char* term) {
  const double s = v.scalar();
  if (!std::isfinite(s))
    throw NonFiniteError(std::string("non-finite value in loss term '") + term + "'", term);
}

}  // namespace detail

enum class LambdaMode { fixed, m_quarter };

inline std::string to_string(LambdaMode m) { return m == LambdaMode::fixed ? "fixed" : "m_quarter"; }

inline LambdaMode lambda_mode_from_string(const std::string& s) {
  if (s == "fixed") return LambdaMode::fixed;
  if (s == "m_quarter") return LambdaMode::m_quarter;
  throw DomainError("unknown lambda mode '" + s + "'");
}

struct OptimConfig {
  double lr = 5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int epochs = 1000;
  /// 0 means full batch.
  Eigen::Index batch_size = 0;

  void validate() const {
    require_domain(lr > 0.0, "learning rate must be positive");
    require_domain(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                   "Adam betas must lie in [0, 1)");
    require_domain(eps > 0.0, "Adam eps must be positive");
    require_domain(epochs >= 0, "epochs must be >= 0");
    require_domain(batch_size >= 0, "batch size must be >= 0");
  }
};

struct CotConfig {
  double lambda1 = 1000.0;
  double lambda2 = 1000.0;
  /// m_quarter multiplies both weights by m^(1/4).
  LambdaMode lambda_mode = LambdaMode::fixed;
  CostTag cost = CostTag::squared_euclidean;
  Kernel kernel = Kernel::rbf(1.0);
  /// Noise draws per conditioning point for the inner empirical measures.
  Eigen::Index inner_draws = 16;
  OptimConfig optim;
  std::uint64_t seed = 0;

  void validate() const {
    require_domain(lambda1 >= 0.0 && lambda2 >= 0.0, "lambda weights must be >= 0");
    require_domain(inner_draws >= 1, "inner_draws must be >= 1");
    kernel.validate();
    optim.validate();
  }

  /// Copy with the lambda mode applied for sample size m.
  CotConfig resolved(Eigen::Index m) const {
    CotConfig c = *this;
    if (lambda_mode == LambdaMode::m_quarter) {
      const double f = std::pow(static_cast<double>(m), 0.25);
      c.lambda1 *= f;
      c.lambda2 *= f;
      c.lambda_mode = LambdaMode::fixed;
    }
    return c;
  }
};

/// Graph nodes for the loss and its parts. total = transport + l1 reg1 + l2 reg2.
struct LossNodes {
  ad::Var total;
  ad::Var transport;
  ad::Var reg1;
  ad::Var reg2;
};

struct LossTerms {
  double total = 0.0;
  double transport = 0.0;
  double reg1 = 0.0;
  double reg2 = 0.0;

  static LossTerms of(const LossNodes& n) {
    return {n.total.scalar(), n.transport.scalar(), n.reg1.scalar(), n.reg2.scalar()};
  }
};

namespace detail {
inline LossNodes assemble(ad::Tape& t, ad::Var transport, ad::Var reg1, ad::Var reg2,
                          double l1, double l2) {
  if (!reg1.valid()) reg1 = t.constant(Matrix::Zero(1, 1));
  if (!reg2.valid()) reg2 = t.constant(Matrix::Zero(1, 1));
  check_finite(transport, "transport");
  check_finite(reg1, "reg1");
  check_finite(reg2, "reg2");
  ad::Var total = ad::add(ad::add(transport, ad::scale(reg1, l1)), ad::scale(reg2, l2));
  check_finite(total, "total");
  return {total, transport, reg1, reg2};
}
}  // namespace detail

/// Implicit-plan estimator. `eta` (J x psi noise) and `eta_prime`
/// (J x theta noise) are shared by every conditioning point, so each point
/// gets J samples y(x_i, eta'_j; theta) and y(x_i, eta_j, eta'_j; theta, psi).
///   transport = mean_{i,j} c(theta sample, psi sample) at source x_i
///   reg1 = mean_i MMD^2(J psi samples at x_i, delta_{y_i})
///   reg2 = mean_i MMD^2(J theta samples at x'_i, delta_{y'_i})
/// An empty target batch drops reg2.
inline LossNodes cot_implicit_loss(ad::Tape& t, const ImplicitGenerator& theta,
                                   const std::vector<ad::Var>& tp, const ImplicitGenerator& psi,
                                   const std::vector<ad::Var>& pp, const JointDataset& source,
                                   const JointDataset& target, const Matrix& eta,
                                   const Matrix& eta_prime, const CotConfig& cfg) {
  require_dims(eta.rows() == eta_prime.rows() && eta.rows() >= 1,
               "cot_implicit_loss: eta and eta' need the same, non-zero row count");
  require_dims(source.size() >= 1, "cot_implicit_loss: empty source batch");
  require_dims(source.y_dim() == theta.out_dim() && psi.out_dim() == source.y_dim(),
               "cot_implicit_loss: response dimension mismatch");
  const Eigen::Index J = eta.rows();
  const Eigen::Index B = source.size();

  ad::Var xs = t.constant(detail::repeat_rows(source.x, J));
  ad::Var y_theta = theta.sample(tp, xs, t.constant(detail::tile_rows(eta_prime, B)));
  ad::Var y_psi = psi.sample(pp, ad::concat_cols(y_theta, xs), t.constant(detail::tile_rows(eta, B)));

  ad::Var transport = ad::mean(detail::rowwise_cost(cfg.cost, y_theta, y_psi));
  ad::Var reg1 = ad::mean(detail::block_mmd2_to_dirac(cfg.kernel, y_psi, t.constant(source.y), J));
  ad::Var reg2;
  if (target.size() > 0) {
    require_dims(target.y_dim() == theta.out_dim() && target.x_dim() == source.x_dim(),
                 "cot_implicit_loss: target batch dimension mismatch");
    ad::Var xt = t.constant(detail::repeat_rows(target.x, J));
    ad::Var yt_gen =
        theta.sample(tp, xt, t.constant(detail::tile_rows(eta_prime, target.size())));
    reg2 = ad::mean(detail::block_mmd2_to_dirac(cfg.kernel, yt_gen, t.constant(target.y), J));
  }
  return detail::assemble(t, transport, reg1, reg2, cfg.lambda1, cfg.lambda2);
}

/// Finite label set with embeddings, pairwise ground costs and kernel Gram.
struct LabelSpace {
  Matrix embeddings;
  Matrix cost;
  Matrix gram;

  Eigen::Index size() const { return embeddings.rows(); }

  static LabelSpace from_embeddings(Matrix emb, CostTag tag, const Kernel& k) {
    LabelSpace s;
    s.cost = ground_cost(tag, emb, emb);
    s.gram = cotmmd::gram(k, emb, emb);
    s.embeddings = std::move(emb);
    return s;
  }

  static LabelSpace one_hot(Eigen::Index n, CostTag tag, const Kernel& k) {
    return from_embeddings(Matrix::Identity(n, n), tag, k);
  }
};

namespace detail {

/// Row-wise MMD^2 between weight rows q (B x n) and w (B x n, constant) on
/// a finite space with Gram K; B x 1.
inline ad::Var label_mmd2(ad::Tape& t, const ad::Var& q, const Matrix& w, const Matrix& k) {
  ad::Var kc = t.constant(k);
  ad::Var qk = ad::matmul(q, kc);
  const Matrix wkw = (w * k).cwiseProduct(w).rowwise().sum();
  ad::Var qq = ad::row_sum(ad::mul(qk, q));
  ad::Var qw = ad::row_sum(ad::mul(qk, t.constant(w)));
  return ad::relu(ad::add(ad::sub(qq, ad::scale(qw, 2.0)), t.constant(wkw)));
}

/// Sum_{i,j} C(i, j) psi(l_i | l_j, x_b) theta(l_j | x_b) per row b; B x 1.
inline ad::Var label_transport(ad::Tape& t, const ad::Var& theta_p, const ad::Var& psi_all,
                               const Matrix& cost) {
  const Eigen::Index n = cost.rows();
  const Eigen::Index rows = psi_all.rows();
  // Row (b*n + j) of (psi_all * C) holds sum_i psi(i | j) C(i, j') for every j';
  // keep column j' = j.
  Matrix mask = Matrix::Zero(rows, n);
  for (Eigen::Index r = 0; r < rows; ++r) mask(r, r % n) = 1.0;
  ad::Var per = ad::row_sum(ad::mul(ad::matmul(psi_all, t.constant(cost)), t.constant(mask)));
  return ad::block_combine(theta_p, per);
}

}  // namespace detail

/// Explicit-plan estimator over a finite label set. Responses are weight
/// rows over the labels (one-hot for observed labels).
///   transport = mean_b sum_ij c(l_i, l_j) psi(l_i | l_j, x_b) theta(l_j | x_b)
///   reg1 = mean_b MMD^2(sum_j psi(. | l_j, x_b) theta(l_j | x_b), y_b)
///   reg2 = mean_b MMD^2(theta(. | x'_b), y'_b)
inline LossNodes cot_explicit_loss(ad::Tape& t, const ExplicitConditional& theta,
                                   const std::vector<ad::Var>& tp, const ExplicitConditional& psi,
                                   const std::vector<ad::Var>& pp, const JointDataset& source,
                                   const JointDataset& target, const LabelSpace& labels,
                                   const CotConfig& cfg) {
  const Eigen::Index n = labels.size();
  require_dims(theta.n_labels() == n && psi.n_labels() == n,
               "cot_explicit_loss: label count mismatch");
  require_dims(source.y_dim() == n, "cot_explicit_loss: source responses must be label weights");
  ad::Var th = theta.forward(tp, t.constant(source.x));
  ad::Var ps = psi.forward_all_labels(pp, t, source.x);
  ad::Var transport = ad::mean(detail::label_transport(t, th, ps, labels.cost));
  ad::Var q = ad::block_combine(th, ps);
  ad::Var reg1 = ad::mean(detail::label_mmd2(t, q, source.y, labels.gram));
  ad::Var reg2;
  if (target.size() > 0) {
    require_dims(target.y_dim() == n, "cot_explicit_loss: target responses must be label weights");
    ad::Var tt = theta.forward(tp, t.constant(target.x));
    reg2 = ad::mean(detail::label_mmd2(t, tt, target.y, labels.gram));
  }
  return detail::assemble(t, transport, reg1, reg2, cfg.lambda1, cfg.lambda2);
}

/// Classification form: theta is the classifier f_theta and only the reg1
/// term is used.
inline LossNodes cot_classification_loss(ad::Tape& t, const ExplicitConditional& classifier,
                                         const std::vector<ad::Var>& cp,
                                         const ExplicitConditional& psi,
                                         const std::vector<ad::Var>& pp,
                                         const JointDataset& batch, const LabelSpace& labels,
                                         const CotConfig& cfg) {
  CotConfig c = cfg;
  c.lambda2 = 0.0;
  return cot_explicit_loss(t, classifier, cp, psi, pp, batch, JointDataset{}, labels, c);
}

/// Dosage-response objective. pi_theta is the empirical law of the
/// unperturbed cells; psi maps (y', log dose, eta) to a perturbed cell.
///   transport = mean_q mean_i c(y'_i, psi(y'_i, x_q, eta_i))
///   reg1 = mean_q MMD^2(generated set at x_q, observed set at x_q)
/// `eta` has one row per unperturbed cell.
inline LossNodes cot_cell_loss(ad::Tape& t, const ImplicitGenerator& psi,
                               const std::vector<ad::Var>& pp, const std::vector<double>& log_doses,
                               const Matrix& unperturbed, const std::vector<Matrix>& perturbed,
                               const Matrix& eta, const CotConfig& cfg) {
  require_dims(log_doses.size() == perturbed.size() && !log_doses.empty(),
               "cot_cell_loss: one perturbed set per dosage level");
  require_dims(eta.rows() == unperturbed.rows(), "cot_cell_loss: one noise row per cell");
  const Eigen::Index m = unperturbed.rows();
  const double q_count = static_cast<double>(log_doses.size());
  ad::Var y0 = t.constant(unperturbed);
  ad::Var noise = t.constant(eta);
  ad::Var transport, reg1;
  for (std::size_t q = 0; q < log_doses.size(); ++q) {
    require_dims(perturbed[q].cols() == unperturbed.cols() && perturbed[q].rows() >= 1,
                 "cot_cell_loss: perturbed set " + std::to_string(q) + " has the wrong shape");
    ad::Var cond = ad::concat_cols(y0, t.constant(Matrix::Constant(m, 1, log_doses[q])));
    ad::Var gen = psi.sample(pp, cond, noise);
    ad::Var c = ad::scale(ad::mean(detail::rowwise_cost(cfg.cost, y0, gen)), 1.0 / q_count);
    ad::Var r = ad::scale(detail::sample_mmd2(cfg.kernel, gen, perturbed[q]), 1.0 / q_count);
    transport = q == 0 ? c : ad::add(transport, c);
    reg1 = q == 0 ? r : ad::add(reg1, r);
  }
  return detail::assemble(t, transport, reg1, ad::Var{}, cfg.lambda1, 0.0);
}

/// Prompt-learning objective over N prompt features G (N x d). Each of the
/// K images contributes M visual features V_q (M x d) and an image-level
/// feature x_q = mean of its rows. psi_r sees [V_qj, x_q] and outputs a
/// distribution over the N prompts; v and u are uniform.
///   transport = (1/K) sum_q sum_ij c(G_i, V_qj) psi(i | V_qj, x_q) / M
///   reg1 = MMD^2((1/K) sum_q sum_j psi(. | V_qj, x_q) / M, u) with the
///          kernel on prompt features.
/// The cumulative marginal carries mass K and is divided by K before the
/// MMD.
inline LossNodes cot_prompt_loss(ad::Tape& t, const ExplicitConditional& psi,
                                 const std::vector<ad::Var>& pp, const Matrix& prompts,
                                 const std::vector<Matrix>& visual, const CotConfig& cfg) {
  require_dims(!visual.empty(), "cot_prompt_loss: need at least one image");
  const Eigen::Index n = prompts.rows();
  const Eigen::Index d = prompts.cols();
  const Eigen::Index m = visual.front().rows();
  const auto k_img = static_cast<Eigen::Index>(visual.size());
  require_dims(psi.n_labels() == n, "cot_prompt_loss: psi must output one weight per prompt");
  Matrix in(k_img * m, 2 * d);
  Matrix cost(k_img * m, n);
  for (Eigen::Index q = 0; q < k_img; ++q) {
    const Matrix& v = visual[static_cast<std::size_t>(q)];
    require_dims(v.rows() == m && v.cols() == d, "cot_prompt_loss: image " + std::to_string(q) +
                                                     " has shape " + shape_str(v));
    const RowVector xq = v.colwise().mean();
    const Matrix c = ground_cost(cfg.cost, v, prompts);
    for (Eigen::Index j = 0; j < m; ++j) {
      in.block(q * m + j, 0, 1, d) = v.row(j);
      in.block(q * m + j, d, 1, d) = xq;
      cost.row(q * m + j) = c.row(j);
    }
  }
  ad::Var p = psi.forward(pp, t.constant(in));
  const double scale = 1.0 / static_cast<double>(k_img * m);
  ad::Var transport = ad::scale(ad::dot(p, t.constant(cost)), scale);
  ad::Var w = ad::matmul(t.constant(Matrix::Constant(1, k_img * m, scale)), p);
  ad::Var diff = ad::sub(w, t.constant(Matrix::Constant(1, n, 1.0 / static_cast<double>(n))));
  ad::Var reg1 =
      ad::relu(ad::dot(ad::matmul(diff, t.constant(gram(cfg.kernel, prompts, prompts))), diff));
  return detail::assemble(t, transport, reg1, ad::Var{}, cfg.lambda1, 0.0);
}

/// Product-kernel joint MMD^2 between {(x_i, g_i)} and {(x_i, y_i)}; the
/// covariates are shared constants.
inline ad::Var joint_mmd2(ad::Tape& t, const Kernel& kx, const Kernel& ky, const Matrix& x,
                          const ad::Var& g, const Matrix& y) {
  const Matrix gx = gram(kx, x, x);
  ad::Var gxc = t.constant(gx);
  ad::Var kgg = ad::mean(ad::mul(gxc, detail::kernel_of(ky, ad::sqdist(g, g))));
  ad::Var kgy = ad::mean(ad::mul(gxc, detail::kernel_of(ky, ad::sqdist(g, t.constant(y)))));
  const double kyy = gx.cwiseProduct(gram(ky, y, y)).mean();
  return ad::relu(ad::add_scalar(ad::sub(kgg, ad::scale(kgy, 2.0)), kyy));
}

/// Alternate form with the MMD taken between joints. One noise row per data
/// index: `eta`, `eta_prime` are B_s x dim for the source batch and
/// `eta_prime_t` is B_t x dim for the target batch.
inline LossNodes cot_joint_alt_loss(ad::Tape& t, const ImplicitGenerator& theta,
                                    const std::vector<ad::Var>& tp, const ImplicitGenerator& psi,
                                    const std::vector<ad::Var>& pp, const JointDataset& source,
                                    const JointDataset& target, const Matrix& eta,
                                    const Matrix& eta_prime, const Matrix& eta_prime_t,
                                    const Kernel& kx, const CotConfig& cfg) {
  require_dims(eta.rows() == source.size() && eta_prime.rows() == source.size(),
               "cot_joint_alt_loss: one noise row per source sample");
  ad::Var xs = t.constant(source.x);
  ad::Var y_theta = theta.sample(tp, xs, t.constant(eta_prime));
  ad::Var y_psi = psi.sample(pp, ad::concat_cols(y_theta, xs), t.constant(eta));
  ad::Var transport = ad::mean(detail::rowwise_cost(cfg.cost, y_theta, y_psi));
  ad::Var reg1 = joint_mmd2(t, kx, cfg.kernel, source.x, y_psi, source.y);
  ad::Var reg2;
  if (target.size() > 0) {
    require_dims(eta_prime_t.rows() == target.size(),
                 "cot_joint_alt_loss: one noise row per target sample");
    ad::Var yt = theta.sample(tp, t.constant(target.x), t.constant(eta_prime_t));
    reg2 = joint_mmd2(t, kx, cfg.kernel, target.x, yt, target.y);
  }
  return detail::assemble(t, transport, reg1, reg2, cfg.lambda1, cfg.lambda2);
}

/// Discrete joint s over (x_a, y_b): probabilities s(a, b) on an nx x ny
/// table, with y support points (ny x d).
struct DiscreteJoint {
  Matrix y_support;
  Matrix prob;

  void validate() const {
    require_dims(prob.cols() == y_support.rows(), "DiscreteJoint: table/support mismatch");
    require_domain((prob.array() >= 0.0).all(), "DiscreteJoint: negative probability");
    require_domain(std::abs(prob.sum() - 1.0) <= 1e-9, "DiscreteJoint: mass must be 1");
  }

  Vector x_marginal() const { return prob.rowwise().sum(); }
};

struct RegularizerForms {
  /// sum_{x,y} s(x, y) MMD^2(pi(. | x), delta_y)
  double joint = 0.0;
  /// sum_x s(x) MMD^2(pi(. | x), s(. | x))
  double conditional = 0.0;
};

/// Both regularizer forms for a plan given as row-stochastic weights over
/// the y support (one row per x value).
inline RegularizerForms regularizer_forms(const Kernel& k, const DiscreteJoint& s,
                                          const Matrix& plan) {
  s.validate();
  require_dims(plan.rows() == s.prob.rows() && plan.cols() == s.prob.cols(),
               "regularizer_forms: plan shape " + shape_str(plan) + " vs joint " +
                   shape_str(s.prob));
  const Matrix g = gram(k, s.y_support, s.y_support);
  const Vector sx = s.x_marginal();
  RegularizerForms r;
  for (Eigen::Index a = 0; a < plan.rows(); ++a) {
    if (!(sx(a) > 0.0))
      throw DomainError("regularizer_forms: x value " + std::to_string(a) +
                        " is absent from the support");
    const RowVector p = plan.row(a);
    const RowVector cond = s.prob.row(a) / sx(a);
    const double ppk = p * g * p.transpose();
    for (Eigen::Index b = 0; b < plan.cols(); ++b) {
      if (s.prob(a, b) == 0.0) continue;
      r.joint += s.prob(a, b) * (ppk - 2.0 * p.dot(g.col(b)) + g(b, b));
    }
    const RowVector diff = p - cond;
    r.conditional += sx(a) * (diff * g * diff.transpose())(0, 0);
  }
  return r;
}

/// [R_joint(pi) - R_cond(pi)] - [R_joint(pi') - R_cond(pi')]; zero up to
/// round-off because the difference is a constant of s alone.
inline double regularizer_equivalence_gap(const Kernel& k, const DiscreteJoint& s,
                                          const Matrix& plan_a, const Matrix& plan_b) {
  const RegularizerForms a = regularizer_forms(k, s, plan_a);
  const RegularizerForms b = regularizer_forms(k, s, plan_b);
  return (a.joint - a.conditional) - (b.joint - b.conditional);
}

/// The common gap v(s) = sum_x s(x) [sum_y s(y|x) k(y, y) - s(.|x)' K s(.|x)].
inline double regularizer_constant(const Kernel& k, const DiscreteJoint& s) {
  s.validate();
  const Matrix g = gram(k, s.y_support, s.y_support);
  const Vector sx = s.x_marginal();
  double v = 0.0;
  for (Eigen::Index a = 0; a < s.prob.rows(); ++a) {
    if (!(sx(a) > 0.0))
      throw DomainError("regularizer_constant: x value " + std::to_string(a) +
                        " is absent from the support");
    const RowVector cond = s.prob.row(a) / sx(a);
    v += sx(a) * (cond.dot(g.diagonal().transpose()) - (cond * g * cond.transpose())(0, 0));
  }
  return v;
}

/// Adam over a fixed, ordered parameter list.
class Adam {
 public:
  explicit Adam(OptimConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  void step(const std::vector<std::pair<Matrix*, const Matrix*>>& params) {
    if (m_.empty()) {
      for (const auto& [p, g] : params) {
        m_.push_back(Matrix::Zero(p->rows(), p->cols()));
        v_.push_back(Matrix::Zero(p->rows(), p->cols()));
      }
    }
    require_dims(m_.size() == params.size(), "Adam: parameter list changed between steps");
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Matrix& p = *params[i].first;
      const Matrix& g = *params[i].second;
      require_dims(g.rows() == p.rows() && g.cols() == p.cols(), "Adam: gradient shape mismatch");
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseProduct(g);
      p.array() -= cfg_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
    }
  }

  long steps() const { return t_; }

 private:
  OptimConfig cfg_;
  std::vector<Matrix> m_, v_;
  long t_ = 0;
};

/// Thrown when a loss turns non-finite during training.
class DivergenceError : public NonFiniteError {
 public:
  DivergenceError(int epoch, const std::string& term)
      : NonFiniteError("training diverged at epoch " + std::to_string(epoch) + " (term '" + term +
                           "')",
                       term),
        epoch_(epoch) {}

  int epoch() const noexcept { return epoch_; }

 private:
  int epoch_;
};

struct TraceRow {
  int epoch = 0;
  LossTerms terms;
};

inline void write_trace_csv(std::ostream& os, const std::vector<TraceRow>& trace) {
  os << "epoch,loss,transport_term,reg1,reg2\n";
  for (const auto& r : trace)
    os << r.epoch << ',' << format_double(r.terms.total) << ',' << format_double(r.terms.transport)
       << ',' << format_double(r.terms.reg1) << ',' << format_double(r.terms.reg2) << '\n';
}

/// One optimization step's loss. `step` counts steps since the start of
/// training; `rng` is that step's private stream.
using StepObjective = std::function<LossNodes(ad::Tape&, const std::vector<std::vector<ad::Var>>&,
                                              long step, RngStream& rng)>;
using EpochCallback = std::function<void(const TraceRow&)>;

/// Generic loop: `steps_per_epoch` Adam steps per epoch on the parameters of
/// `nets`; the trace holds per-epoch averages of the loss terms. Zero epochs
/// leave the parameters untouched.
inline std::vector<TraceRow> train(const std::vector<Mlp*>& nets, const OptimConfig& optim,
                                   long steps_per_epoch, std::uint64_t seed,
                                   const StepObjective& objective,
                                   const EpochCallback& on_epoch = {}) {
  optim.validate();
  require_domain(steps_per_epoch >= 1, "train: steps_per_epoch must be >= 1");
  Adam adam(optim);
  const RngStream root = RngStream(seed).split("train");
  std::vector<TraceRow> trace;
  long step = 0;
  for (int epoch = 0; epoch < optim.epochs; ++epoch) {
    TraceRow row;
    row.epoch = epoch;
    for (long s = 0; s < steps_per_epoch; ++s, ++step) {
      ad::Tape tape;
      std::vector<std::vector<ad::Var>> params;
      for (Mlp* n : nets) params.push_back(n->bind(tape));
      RngStream rng = root.split(static_cast<std::uint64_t>(step));
      LossNodes loss;
      try {
        loss = objective(tape, params, step, rng);
      } catch (const DivergenceError&) {
        throw;
      } catch (const NonFiniteError& e) {
        throw DivergenceError(epoch, e.term());
      }
      tape.backward(loss.total);
      for (const auto& [p, g] : tape.parameters())
        if (!g->allFinite()) throw DivergenceError(epoch, "gradient");
      adam.step(tape.parameters());
      const LossTerms t = LossTerms::of(loss);
      row.terms.total += t.total;
      row.terms.transport += t.transport;
      row.terms.reg1 += t.reg1;
      row.terms.reg2 += t.reg2;
    }
    const double inv = 1.0 / static_cast<double>(steps_per_epoch);
    row.terms.total *= inv;
    row.terms.transport *= inv;
    row.terms.reg1 *= inv;
    row.terms.reg2 *= inv;
    trace.push_back(row);
    if (on_epoch) on_epoch(row);
  }
  return trace;
}

namespace detail {
/// Rows [begin, begin + count) of the permuted dataset.
inline JointDataset batch_of(const JointDataset& d, const std::vector<Eigen::Index>& perm,
                             Eigen::Index begin, Eigen::Index count) {
  std::vector<Eigen::Index> idx(perm.begin() + begin, perm.begin() + begin + count);
  return d.subset(idx);
}

inline Eigen::Index effective_batch(Eigen::Index requested, Eigen::Index m) {
  return requested <= 0 || requested >= m ? m : requested;
}
}  // namespace detail

/// Trains an implicit plan (theta, psi) on source/target samples. Each
/// epoch shuffles both sets into minibatches; every step draws fresh
/// J-row noise. The target set may be empty (reg2 dropped).
inline std::vector<TraceRow> train_implicit(ImplicitGenerator& theta, ImplicitGenerator& psi,
                                            const JointDataset& source, const JointDataset& target,
                                            const CotConfig& config,
                                            const EpochCallback& on_epoch = {}) {
  config.validate();
  const CotConfig cfg = config.resolved(source.size());
  const Eigen::Index bs = detail::effective_batch(cfg.optim.batch_size, source.size());
  const long steps = static_cast<long>((source.size() + bs - 1) / bs);
  const RngStream shuffle_root = RngStream(cfg.seed).split("shuffle");
  std::vector<Eigen::Index> ps, pt;
  const Eigen::Index bt =
      target.size() == 0 ? 0 : std::max<Eigen::Index>(1, target.size() / steps);
  auto objective = [&](ad::Tape& t, const std::vector<std::vector<ad::Var>>& p, long step,
                       RngStream& rng) {
    const long s = step % steps;
    if (s == 0) {
      RngStream sh = shuffle_root.split(static_cast<std::uint64_t>(step / steps));
      ps = sh.permutation(source.size());
      pt = sh.permutation(target.size());
    }
    const Eigen::Index begin = s * bs;
    const JointDataset sb =
        detail::batch_of(source, ps, begin, std::min(bs, source.size() - begin));
    const JointDataset tb =
        target.size() == 0
            ? JointDataset{}
            : detail::batch_of(target, pt, std::min(s * bt, target.size() - 1),
                               std::min(bt, target.size() - std::min(s * bt, target.size() - 1)));
    const Matrix eta = rng.normal_matrix(cfg.inner_draws, psi.noise_dim());
    const Matrix eta_prime = rng.normal_matrix(cfg.inner_draws, theta.noise_dim());
    return cot_implicit_loss(t, theta, p[0], psi, p[1], sb, tb, eta, eta_prime, cfg);
  };
  return train({&theta.net(), &psi.net()}, cfg.optim, steps, cfg.seed, objective, on_epoch);
}

/// Trains a classifier with the classification objective (full batch or
/// minibatches).
inline std::vector<TraceRow> train_classifier(ExplicitConditional& classifier,
                                              ExplicitConditional& psi, const JointDataset& data,
                                              const LabelSpace& labels, const CotConfig& config,
                                              const EpochCallback& on_epoch = {}) {
  config.validate();
  const CotConfig cfg = config.resolved(data.size());
  const Eigen::Index bs = detail::effective_batch(cfg.optim.batch_size, data.size());
  const long steps = static_cast<long>((data.size() + bs - 1) / bs);
  const RngStream shuffle_root = RngStream(cfg.seed).split("shuffle");
  std::vector<Eigen::Index> perm;
  auto objective = [&](ad::Tape& t, const std::vector<std::vector<ad::Var>>& p, long step,
                       RngStream&) {
    const long s = step % steps;
    if (s == 0) perm = shuffle_root.split(static_cast<std::uint64_t>(step / steps)).permutation(data.size());
    const Eigen::Index begin = s * bs;
    const JointDataset b = detail::batch_of(data, perm, begin, std::min(bs, data.size() - begin));
    return cot_classification_loss(t, classifier, p[0], psi, p[1], b, labels, cfg);
  };
  return train({&classifier.net(), &psi.net()}, cfg.optim, steps, cfg.seed, objective, on_epoch);
}

/// Trains the dosage generator psi on toy or real perturbation data,
/// full batch, fresh noise each epoch.
inline std::vector<TraceRow> train_cell(ImplicitGenerator& psi, const std::vector<double>& log_doses,
                                        const Matrix& unperturbed,
                                        const std::vector<Matrix>& perturbed,
                                        const CotConfig& config,
                                        const EpochCallback& on_epoch = {}) {
  config.validate();
  const CotConfig cfg = config.resolved(unperturbed.rows());
  auto objective = [&](ad::Tape& t, const std::vector<std::vector<ad::Var>>& p, long,
                       RngStream& rng) {
    const Matrix eta = rng.normal_matrix(unperturbed.rows(), psi.noise_dim());
    return cot_cell_loss(t, psi, p[0], log_doses, unperturbed, perturbed, eta, cfg);
  };
  return train({&psi.net()}, cfg.optim, 1, cfg.seed, objective, on_epoch);
}

/// n composed samples (theta output, psi output) at a single covariate
/// value, with fresh noise from `rng`.
struct PlanSamples {
  Matrix theta_out;
  Matrix psi_out;
};

inline PlanSamples sample_plan(const ImplicitGenerator& theta, const ImplicitGenerator& psi,
                               const RowVector& x, Eigen::Index n, RngStream& rng) {
  const Matrix xs = x.replicate(n, 1);
  const Matrix eta_prime = rng.normal_matrix(n, theta.noise_dim());
  const Matrix eta = rng.normal_matrix(n, psi.noise_dim());
  PlanSamples s;
  s.theta_out = theta.sample(xs, eta_prime);
  s.psi_out = psi.sample(ad::eval::concat_cols(s.theta_out, xs), eta);
  return s;
}

}  // namespace cotmmd
