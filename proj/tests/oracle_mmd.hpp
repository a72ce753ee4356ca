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

// Test-side reference implementations. These share no code with the
// library beyond the data types.

#pragma once

#include "cotmmd/kernels.hpp"
#include "cotmmd/rng.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace cotmmd::test {

/// Kernel value written out from the formulas, one scalar at a time.
inline double kernel_scalar(const Kernel& k, const double* a, const double* b, Eigen::Index d,
                            Eigen::Index stride_a, Eigen::Index stride_b) {
  double s = 0.0;
  for (Eigen::Index c = 0; c < d; ++c) {
    const double diff = a[c * stride_a] - b[c * stride_b];
    s += diff * diff;
  }
  double v = 0.0;
  if (k.family == KernelFamily::rbf) v = std::exp(-s / (2.0 * k.sigma2));
  if (k.family == KernelFamily::imq) v = 1.0 / std::sqrt(k.sigma2 + s);
  if (k.family == KernelFamily::imq2) v = 1.0 / std::sqrt((1.0 + s) / k.sigma2);
  if (k.rescaled && k.family == KernelFamily::imq) v *= std::sqrt(k.sigma2);
  if (k.rescaled && k.family == KernelFamily::imq2) v /= std::sqrt(k.sigma2);
  return v;
}

inline double loop_kernel(const Kernel& k, const Matrix& a, Eigen::Index i, const Matrix& b,
                          Eigen::Index j) {
  return kernel_scalar(k, &a(i, 0), &b(j, 0), a.cols(), a.rows(), b.rows());
}

/// sum_ij a_i a_j k(p_i, p_j) + sum_ij b_i b_j k(q_i, q_j) - 2 sum_ij a_i b_j k(p_i, q_j)
inline double loop_mmd2(const Kernel& k, const WeightedSamples& p, const WeightedSamples& q) {
  double pp = 0.0, qq = 0.0, pq = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i)
    for (Eigen::Index j = 0; j < p.size(); ++j)
      pp += p.weights()(i) * p.weights()(j) * loop_kernel(k, p.points(), i, p.points(), j);
  for (Eigen::Index i = 0; i < q.size(); ++i)
    for (Eigen::Index j = 0; j < q.size(); ++j)
      qq += q.weights()(i) * q.weights()(j) * loop_kernel(k, q.points(), i, q.points(), j);
  for (Eigen::Index i = 0; i < p.size(); ++i)
    for (Eigen::Index j = 0; j < q.size(); ++j)
      pq += p.weights()(i) * q.weights()(j) * loop_kernel(k, p.points(), i, q.points(), j);
  return pp + qq - 2.0 * pq;
}

/// Random weights from normalized exponentials, Gaussian points.
inline WeightedSamples random_measure(RngStream& rng, Eigen::Index n, Eigen::Index d) {
  Vector w(n);
  for (Eigen::Index i = 0; i < n; ++i) w(i) = -std::log(rng.uniform());
  w /= w.sum();
  return {rng.normal_matrix(n, d), w};
}

/// Minimum of (1/n) sum_i c(i, sigma(i)) over every permutation.
inline double exhaustive_assignment(const Matrix& c) {
  std::vector<Eigen::Index> p(static_cast<std::size_t>(c.rows()));
  std::iota(p.begin(), p.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (Eigen::Index i = 0; i < c.rows(); ++i) s += c(i, p[static_cast<std::size_t>(i)]);
    best = std::min(best, s / static_cast<double>(c.rows()));
  } while (std::next_permutation(p.begin(), p.end()));
  return best;
}

}  // namespace cotmmd::test
