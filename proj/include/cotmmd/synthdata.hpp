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

#include "cotmmd/dataset.hpp"
#include "cotmmd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cotmmd {

/// x ~ Beta(alpha, beta), y | x ~ N(mu(x), v(x)) with an affine mean and an
/// affine variance clipped below at `var_floor`.
struct ConditionalGaussianSpec {
  double alpha = 2.0;
  double beta = 4.0;
  double mean_slope = 0.0;
  double mean_intercept = 0.0;
  double var_slope = 0.0;
  double var_intercept = 1.0;
  double var_floor = 1e-6;

  double mean(double x) const { return mean_slope * x + mean_intercept; }
  double variance(double x) const {
    return std::max(var_floor, var_slope * x + var_intercept);
  }

  void validate() const {
    require_domain(alpha > 0.0 && beta > 0.0, "ConditionalGaussianSpec: Beta shapes must be > 0");
    require_domain(var_floor > 0.0, "ConditionalGaussianSpec: variance floor must be > 0");
  }

  /// y ~ N(4(x - 0.5), 1), x ~ Beta(2, 4).
  static ConditionalGaussianSpec converge_source() { return {2.0, 4.0, 4.0, -2.0, 0.0, 1.0, 1e-6}; }
  /// y' ~ N(-2(x - 0.5), 8x + 1), x ~ Beta(4, 2).
  static ConditionalGaussianSpec converge_target() { return {4.0, 2.0, -2.0, 1.0, 8.0, 1.0, 1e-6}; }
  /// y ~ N(2(x - 0.5), 1), x ~ Beta(2, 4).
  static ConditionalGaussianSpec barycenter_source() { return {2.0, 4.0, 2.0, -1.0, 0.0, 1.0, 1e-6}; }
  /// y' ~ N(-4(x - 0.5), 4), x ~ Beta(4, 2).
  static ConditionalGaussianSpec barycenter_target() { return {4.0, 2.0, -4.0, 2.0, 0.0, 4.0, 1e-6}; }
};

inline std::vector<double> sample_beta(RngStream& rng, double alpha, double beta, std::size_t m) {
  require_domain(alpha > 0.0 && beta > 0.0, "sample_beta: shapes must be positive");
  std::vector<double> out(m);
  for (double& v : out) v = rng.beta(alpha, beta);
  return out;
}

/// m rows (x_i, y_i) with y_i = mu(x_i) + sqrt(v(x_i)) z_i.
inline JointDataset gen_conditional_gaussian(RngStream& rng, const ConditionalGaussianSpec& spec,
                                             Eigen::Index m) {
  spec.validate();
  Matrix x(m, 1), y(m, 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    const double xi = rng.beta(spec.alpha, spec.beta);
    x(i, 0) = xi;
    y(i, 0) = spec.mean(xi) + std::sqrt(spec.variance(xi)) * rng.normal();
  }
  return {std::move(x), std::move(y)};
}

/// Class means for gen_toy_classification: separation / sqrt(2) times the
/// standard basis of R^n_classes, so every pair is `separation` apart.
inline Matrix toy_class_means(int n_classes, double separation) {
  return Matrix::Identity(n_classes, n_classes) * (separation / std::sqrt(2.0));
}

/// Isotropic unit-variance Gaussian blobs in R^n_classes with balanced
/// labels (i mod n_classes, then shuffled); y is one-hot.
inline JointDataset gen_toy_classification(RngStream& rng, int n_classes, Eigen::Index m,
                                           double separation) {
  require_domain(n_classes >= 2, "gen_toy_classification: need at least two classes");
  const Matrix means = toy_class_means(n_classes, separation);
  const auto order = rng.permutation(m);
  Matrix x(m, n_classes);
  Matrix y = Matrix::Zero(m, n_classes);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Eigen::Index c = order[static_cast<std::size_t>(i)] % n_classes;
    y(i, c) = 1.0;
    for (int j = 0; j < n_classes; ++j) x(i, j) = means(c, j) + rng.normal();
  }
  return {std::move(x), std::move(y)};
}

/// Synthetic perturbation data: an unperturbed population N(0, I_d) and, for
/// each dosage level, the same law translated by log10(dosage) * shift_per_log_dose.
struct ToyCellData {
  std::vector<double> dosages;
  Matrix unperturbed;
  std::vector<Matrix> perturbed;
  std::vector<RowVector> true_shift;

  /// Conditioning value fed to models for level q.
  double log_dose(std::size_t q) const { return std::log10(dosages[q]); }
};

inline ToyCellData gen_toy_cell(RngStream& rng, const std::vector<double>& dosages,
                                const std::vector<Eigen::Index>& sizes, Eigen::Index m_unperturbed,
                                const RowVector& shift_per_log_dose) {
  const Eigen::Index d = shift_per_log_dose.size();
  require_domain(d >= 1, "gen_toy_cell: dimension must be >= 1");
  require_dims(sizes.size() == dosages.size(), "gen_toy_cell: one size per dosage level");
  for (double dose : dosages) require_domain(dose > 0.0, "gen_toy_cell: dosages must be positive");
  ToyCellData out;
  out.dosages = dosages;
  out.unperturbed = rng.normal_matrix(m_unperturbed, d);
  for (std::size_t q = 0; q < dosages.size(); ++q) {
    const RowVector shift = std::log10(dosages[q]) * shift_per_log_dose;
    Matrix p = rng.normal_matrix(sizes[q], d);
    p.rowwise() += shift;
    out.perturbed.push_back(std::move(p));
    out.true_shift.push_back(shift);
  }
  return out;
}

/// Toy 1-D regression: x ~ U[0, 1], y = amplitude * sin(2 pi x) + N(0, noise_sd^2).
inline JointDataset gen_toy_regression(RngStream& rng, Eigen::Index m, double amplitude,
                                       double noise_sd) {
  require_domain(noise_sd >= 0.0, "gen_toy_regression: noise_sd must be >= 0");
  Matrix x(m, 1), y(m, 1);
  for (Eigen::Index i = 0; i < m; ++i) {
    x(i, 0) = rng.uniform();
    y(i, 0) = amplitude * std::sin(2.0 * M_PI * x(i, 0)) + noise_sd * rng.normal();
  }
  return {std::move(x), std::move(y)};
}

}  // namespace cotmmd
