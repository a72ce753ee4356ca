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

#include "cotmmd/types.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

namespace cotmmd {

enum class KernelFamily { rbf, imq, imq2 };

inline std::string to_string(KernelFamily f) {
  switch (f) {
    case KernelFamily::rbf: return "rbf";
    case KernelFamily::imq: return "imq";
    case KernelFamily::imq2: return "imq2";
  }
  return "?";
}

inline KernelFamily kernel_family_from_string(const std::string& s) {
  if (s == "rbf") return KernelFamily::rbf;
  if (s == "imq") return KernelFamily::imq;
  if (s == "imq2") return KernelFamily::imq2;
  throw DomainError("unknown kernel family '" + s + "'");
}

/// Radial kernel k(a, b) = f(|a - b|^2).
///
///   rbf:  exp(-d2 / (2 sigma2))
///   imq:  (sigma2 + d2)^(-1/2)
///   imq2: ((1 + d2) / sigma2)^(-1/2)
///
/// The imq families are not normalized. With `rescaled` set, every value is
/// divided by k(a, a) so that the kernel becomes normalized; for rbf this is
/// a no-op.
struct Kernel {
  KernelFamily family = KernelFamily::rbf;
  double sigma2 = 1.0;
  bool rescaled = false;

  static Kernel rbf(double sigma2) { return {KernelFamily::rbf, sigma2, false}; }
  static Kernel imq(double sigma2, bool rescaled = false) {
    return {KernelFamily::imq, sigma2, rescaled};
  }
  static Kernel imq2(double sigma2, bool rescaled = false) {
    return {KernelFamily::imq2, sigma2, rescaled};
  }

  void validate() const {
    require_domain(sigma2 > 0.0 && std::isfinite(sigma2),
                   "kernel bandwidth must be positive, got " + std::to_string(sigma2));
  }

  /// k(a, a), before rescaling.
  double raw_diagonal() const {
    switch (family) {
      case KernelFamily::rbf: return 1.0;
      case KernelFamily::imq: return 1.0 / std::sqrt(sigma2);
      case KernelFamily::imq2: return std::sqrt(sigma2);
    }
    return 1.0;
  }

  double diagonal() const { return rescaled ? 1.0 : raw_diagonal(); }

  bool normalized() const { return family == KernelFamily::rbf || rescaled; }

  double from_sqdist(double d2) const {
    double v = 0.0;
    switch (family) {
      case KernelFamily::rbf: v = std::exp(-d2 / (2.0 * sigma2)); break;
      case KernelFamily::imq: v = 1.0 / std::sqrt(sigma2 + d2); break;
      case KernelFamily::imq2: v = 1.0 / std::sqrt((1.0 + d2) / sigma2); break;
    }
    return rescaled ? v / raw_diagonal() : v;
  }

  template <class A, class B>
  double operator()(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) const {
    return from_sqdist((a - b).squaredNorm());
  }
};

/// Entry (i, j) is |A_i - B_j|^2, computed by direct differences so that the
/// diagonal of pairwise_sqdist(A, A) is exactly zero.
inline Matrix pairwise_sqdist(const Matrix& a, const Matrix& b) {
  require_dims(a.cols() == b.cols(), "pairwise_sqdist: column mismatch " + shape_str(a) +
                                         " vs " + shape_str(b));
  Matrix out(a.rows(), b.rows());
  const Eigen::Index d = a.cols();
  for (Eigen::Index j = 0; j < b.rows(); ++j) {
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double s = 0.0;
      for (Eigen::Index k = 0; k < d; ++k) {
        const double diff = a(i, k) - b(j, k);
        s += diff * diff;
      }
      out(i, j) = s;
    }
  }
  return out;
}

inline Matrix apply_kernel(const Kernel& kernel, const Matrix& sqdist) {
  return sqdist.unaryExpr([&kernel](double d2) { return kernel.from_sqdist(d2); });
}

inline Matrix gram(const Kernel& kernel, const Matrix& a, const Matrix& b) {
  kernel.validate();
  return apply_kernel(kernel, pairwise_sqdist(a, b));
}

/// Median pairwise squared distance over distinct pairs of rows; the
/// "median" bandwidth heuristic.
inline double median_sqdist(const Matrix& points) {
  require_dims(points.rows() >= 2, "median_sqdist needs at least two points");
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(points.rows() * (points.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = i + 1; j < points.rows(); ++j)
      d.push_back((points.row(i) - points.row(j)).squaredNorm());
  const auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  if (d.size() % 2 == 1) return *mid;
  const double hi = *mid;
  const double lo = *std::max_element(d.begin(), mid);
  return 0.5 * (lo + hi);
}

/// Discrete probability measure sum_i w_i delta_{points_i}.
class WeightedSamples {
 public:
  WeightedSamples(Matrix points, Vector weights)
      : points_(std::move(points)), weights_(std::move(weights)) {
    require_dims(points_.rows() >= 1, "WeightedSamples needs at least one point");
    require_dims(weights_.size() == points_.rows(), "WeightedSamples: weight count " +
                                                        std::to_string(weights_.size()) +
                                                        " != point count " +
                                                        std::to_string(points_.rows()));
    require_domain((weights_.array() >= 0.0).all(), "WeightedSamples: negative weight");
    require_domain(std::abs(weights_.sum() - 1.0) <= 1e-9,
                   "WeightedSamples: weights must sum to 1");
  }

  static WeightedSamples uniform(Matrix points) {
    const auto n = points.rows();
    require_dims(n >= 1, "WeightedSamples needs at least one point");
    return {std::move(points), Vector::Constant(n, 1.0 / static_cast<double>(n))};
  }

  static WeightedSamples dirac(const RowVector& y) {
    return {Matrix(y), Vector::Ones(1)};
  }

  const Matrix& points() const { return points_; }
  const Vector& weights() const { return weights_; }
  Eigen::Index size() const { return points_.rows(); }
  Eigen::Index dim() const { return points_.cols(); }

 private:
  Matrix points_;
  Vector weights_;
};

namespace detail {
inline double clamp_mmd2(double v) { return (v < 0.0 && v >= -1e-10) ? 0.0 : v; }
}  // namespace detail

/// Biased (V-statistic) squared MMD between two weighted empirical measures:
/// a'K_PP a + b'K_QQ b - 2 a'K_PQ b. Values in [-1e-10, 0) are clamped to 0.
inline double mmd2(const Kernel& kernel, const WeightedSamples& p, const WeightedSamples& q) {
  require_dims(p.dim() == q.dim(), "mmd2: dimension mismatch " + std::to_string(p.dim()) +
                                       " vs " + std::to_string(q.dim()));
  const Vector& a = p.weights();
  const Vector& b = q.weights();
  const double pp = a.dot(gram(kernel, p.points(), p.points()) * a);
  const double qq = b.dot(gram(kernel, q.points(), q.points()) * b);
  const double pq = a.dot(gram(kernel, p.points(), q.points()) * b);
  return detail::clamp_mmd2(pp + qq - 2.0 * pq);
}

inline double mmd2_to_dirac(const Kernel& kernel, const WeightedSamples& p, const RowVector& y) {
  require_dims(p.dim() == y.size(), "mmd2_to_dirac: dimension mismatch");
  kernel.validate();
  const Vector& a = p.weights();
  const double pp = a.dot(gram(kernel, p.points(), p.points()) * a);
  const double py = a.dot(gram(kernel, p.points(), Matrix(y)).col(0));
  return detail::clamp_mmd2(pp - 2.0 * py + kernel.diagonal());
}

}  // namespace cotmmd
