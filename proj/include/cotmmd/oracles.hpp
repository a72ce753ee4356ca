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

// Exact ground truths: closed-form Gaussian Wasserstein distances, Gaussian
// barycenters, sorted-matching 1-D OT and assignment OT via the Hungarian
// method.

#pragma once

#include "cotmmd/synthdata.hpp"
#include "cotmmd/types.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

namespace cotmmd {

struct Gaussian1D {
  double mean = 0.0;
  double variance = 1.0;

  Gaussian1D() = default;
  Gaussian1D(double m, double v) : mean(m), variance(v) {
    require_domain(v > 0.0 && std::isfinite(v), "Gaussian1D: variance must be positive");
  }

  double stddev() const { return std::sqrt(variance); }
};

/// W2^2 between 1-D Gaussians: (m1 - m2)^2 + (s1 - s2)^2.
inline double gaussian_w2sq(const Gaussian1D& p, const Gaussian1D& q) {
  const double dm = p.mean - q.mean;
  const double ds = p.stddev() - q.stddev();
  return dm * dm + ds * ds;
}

inline Gaussian1D conditional_law(const ConditionalGaussianSpec& spec, double x) {
  return {spec.mean(x), spec.variance(x)};
}

/// Closed-form W2^2 between N(4(x-0.5), 1) and N(-2(x-0.5), 8x+1).
inline double true_conditional_w2sq(double x) {
  require_domain(x >= 0.0 && x <= 1.0, "true_conditional_w2sq: x must lie in [0, 1]");
  const double a = 6.0 * (x - 0.5);
  const double b = std::sqrt(8.0 * x + 1.0) - 1.0;
  return a * a + b * b;
}

/// 1-D W2 barycenter rho * p + (1 - rho) * q: means and standard
/// deviations interpolate linearly.
inline Gaussian1D gaussian_barycenter(const Gaussian1D& p, const Gaussian1D& q, double rho) {
  require_domain(rho >= 0.0 && rho <= 1.0, "gaussian_barycenter: rho must lie in [0, 1]");
  const double m = rho * p.mean + (1.0 - rho) * q.mean;
  const double s = rho * p.stddev() + (1.0 - rho) * q.stddev();
  return {m, s * s};
}

/// Barycenter of N(2(x-0.5), 1) (weight rho) and N(-4(x-0.5), 4).
inline Gaussian1D analytic_barycenter(double x, double rho) {
  return gaussian_barycenter(conditional_law(ConditionalGaussianSpec::barycenter_source(), x),
                             conditional_law(ConditionalGaussianSpec::barycenter_target(), x),
                             rho);
}

/// The equal-weight barycenter read as N(-x + 0.5, 2.5), i.e. averaging
/// variances instead of standard deviations. Kept for side-by-side reporting.
inline Gaussian1D variance_averaged_barycenter(double x) { return {-x + 0.5, 2.5}; }

inline double mccann_interpolate(double rho, double y_source, double y_transported) {
  require_domain(rho >= 0.0 && rho <= 1.0, "mccann_interpolate: rho must lie in [0, 1]");
  return rho * y_source + (1.0 - rho) * y_transported;
}

inline Vector mccann_interpolate(double rho, const Vector& y_source, const Vector& y_transported) {
  require_domain(rho >= 0.0 && rho <= 1.0, "mccann_interpolate: rho must lie in [0, 1]");
  require_dims(y_source.size() == y_transported.size(), "mccann_interpolate: unpaired samples");
  return rho * y_source + (1.0 - rho) * y_transported;
}

enum class OtCost { squared_euclidean, euclidean };

inline double ot_cost(OtCost cost, const RowVector& a, const RowVector& b) {
  const double d2 = (a - b).squaredNorm();
  return cost == OtCost::squared_euclidean ? d2 : std::sqrt(d2);
}

/// Equal-weight 1-D OT for a convex cost of |a - b|: match sorted samples.
inline double exact_ot_1d(std::vector<double> a, std::vector<double> b,
                          OtCost cost = OtCost::squared_euclidean) {
  require_dims(a.size() == b.size() && !a.empty(), "exact_ot_1d: need equal, non-zero counts");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    total += cost == OtCost::squared_euclidean ? d * d : d;
  }
  return total / static_cast<double>(a.size());
}

/// (1/m) sum_i |sort(a)_i - sort(b)_i|.
inline double empirical_w1_1d(std::vector<double> a, std::vector<double> b) {
  return exact_ot_1d(std::move(a), std::move(b), OtCost::euclidean);
}

struct AssignmentResult {
  double cost = 0.0;
  /// permutation[i] is the target row matched to source row i.
  std::vector<std::size_t> permutation;
};

inline constexpr std::size_t kMaxAssignmentSize = 512;

/// Minimum-cost perfect matching on a square cost matrix (Hungarian method
/// with row/column potentials, O(n^3)). Returns the permutation only.
inline std::vector<std::size_t> hungarian(const Matrix& c) {
  require_dims(c.rows() == c.cols(), "hungarian: cost matrix must be square");
  const auto n = static_cast<std::size_t>(c.rows());
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based potentials; p[j] is the row assigned to column j, way[] the
  // augmenting path.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(static_cast<Eigen::Index>(i0 - 1), static_cast<Eigen::Index>(j - 1)) -
                           u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> perm(n);
  for (std::size_t j = 1; j <= n; ++j) perm[p[j] - 1] = j - 1;
  return perm;
}

/// Equal-weight OT between two n-point clouds. The cost is summed in source
/// row order so that equal permutations give bit-identical costs.
inline AssignmentResult exact_assignment_ot(const Matrix& source, const Matrix& target,
                                            OtCost cost = OtCost::squared_euclidean) {
  require_dims(source.rows() == target.rows(), "exact_assignment_ot: unequal counts " +
                                                   std::to_string(source.rows()) + " vs " +
                                                   std::to_string(target.rows()));
  require_dims(source.cols() == target.cols(), "exact_assignment_ot: dimension mismatch");
  require_dims(source.rows() >= 1, "exact_assignment_ot: empty input");
  require_domain(static_cast<std::size_t>(source.rows()) <= kMaxAssignmentSize,
                 "exact_assignment_ot: n exceeds the cap of 512");
  const Eigen::Index n = source.rows();
  Matrix c(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) c(i, j) = ot_cost(cost, source.row(i), target.row(j));
  AssignmentResult r;
  r.permutation = hungarian(c);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i)
    total += c(i, static_cast<Eigen::Index>(r.permutation[static_cast<std::size_t>(i)]));
  r.cost = total / static_cast<double>(n);
  return r;
}

}  // namespace cotmmd
