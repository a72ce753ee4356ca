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

#include "cotmmd/kernels.hpp"
#include "cotmmd/rng.hpp"

#include <gtest/gtest.h>

#include <Eigen/Eigenvalues>

#include <cmath>

#include "oracle_mmd.hpp"

namespace {

using cotmmd::Kernel;
using cotmmd::Matrix;
using cotmmd::Vector;
using cotmmd::WeightedSamples;

Matrix pts(std::initializer_list<double> v) {
  Matrix m(static_cast<Eigen::Index>(v.size()), 1);
  Eigen::Index i = 0;
  for (double x : v) m(i++, 0) = x;
  return m;
}

TEST(Gram, RbfSelfIsOne) {
  EXPECT_DOUBLE_EQ(cotmmd::gram(Kernel::rbf(1.0), pts({0}), pts({0}))(0, 0), 1.0);
}

TEST(Gram, RbfHalfBandwidth) {
  EXPECT_NEAR(cotmmd::gram(Kernel::rbf(0.5), pts({0}), pts({1}))(0, 0), std::exp(-1.0), 1e-15);
}

TEST(Gram, ImqUnitBandwidthAtZero) {
  EXPECT_DOUBLE_EQ(cotmmd::gram(Kernel::imq(1.0), pts({0}), pts({0}))(0, 0), 1.0);
}

TEST(Gram, Imq2Formula) {
  const double v = cotmmd::gram(Kernel::imq2(2.0), pts({0}), pts({3}))(0, 0);
  EXPECT_NEAR(v, std::pow((1.0 + 9.0) / 2.0, -0.5), 1e-15);
}

TEST(Gram, RescaledImqIsNormalized) {
  for (auto k : {Kernel::imq(4.0, true), Kernel::imq2(0.3, true)}) {
    EXPECT_NEAR(cotmmd::gram(k, pts({1.7}), pts({1.7}))(0, 0), 1.0, 1e-15);
    EXPECT_TRUE(k.normalized());
  }
  EXPECT_FALSE(Kernel::imq(4.0).normalized());
}

TEST(Gram, DimensionMismatchThrows) {
  EXPECT_THROW(cotmmd::gram(Kernel::rbf(1.0), Matrix::Zero(2, 2), Matrix::Zero(2, 3)),
               cotmmd::DimensionError);
}

TEST(Gram, NonPositiveBandwidthThrows) {
  EXPECT_THROW(cotmmd::gram(Kernel::rbf(0.0), pts({0}), pts({1})), cotmmd::DomainError);
  EXPECT_THROW(cotmmd::gram(Kernel::imq(-1.0), pts({0}), pts({1})), cotmmd::DomainError);
}

TEST(Gram, SymmetricAndPositiveSemidefinite) {
  cotmmd::RngStream rng(11);
  for (auto k : {Kernel::rbf(0.7), Kernel::imq(1.3), Kernel::imq2(2.0)}) {
    const Matrix a = rng.normal_matrix(20, 3);
    const Matrix g = cotmmd::gram(k, a, a);
    EXPECT_EQ((g - g.transpose()).cwiseAbs().maxCoeff(), 0.0);
    Eigen::SelfAdjointEigenSolver<Matrix> es(g);
    EXPECT_GE(es.eigenvalues().minCoeff(), -1e-8);
    if (k.family == cotmmd::KernelFamily::rbf) {
      EXPECT_TRUE((g.array() > 0.0).all());
      EXPECT_TRUE((g.array() <= 1.0).all());
    }
  }
}

TEST(MedianBandwidth, OddAndEvenCounts) {
  // Pairwise squared distances of {0, 1, 3}: 1, 9, 4 -> median 4.
  EXPECT_DOUBLE_EQ(cotmmd::median_sqdist(pts({0, 1, 3})), 4.0);
  // {0, 1}: single pair.
  EXPECT_DOUBLE_EQ(cotmmd::median_sqdist(pts({0, 1})), 1.0);
  // {0, 1, 2, 4}: 1 4 16 1 9 4 -> sorted 1 1 4 4 9 16 -> 4.
  EXPECT_DOUBLE_EQ(cotmmd::median_sqdist(pts({0, 1, 2, 4})), 4.0);
}

TEST(WeightedSamplesTest, Validation) {
  EXPECT_THROW(WeightedSamples(pts({0, 1}), Vector::Constant(2, 0.4)), cotmmd::DomainError);
  Vector w(2);
  w << 1.5, -0.5;
  EXPECT_THROW(WeightedSamples(pts({0, 1}), w), cotmmd::DomainError);
  EXPECT_THROW(WeightedSamples(pts({0, 1}), Vector::Ones(1)), cotmmd::DimensionError);
}

TEST(Mmd2, IdenticalMeasuresAreZero) {
  const auto p = WeightedSamples::uniform(pts({0, 1}));
  for (auto k : {Kernel::rbf(1.0), Kernel::imq(1.0), Kernel::imq2(1.0)})
    EXPECT_EQ(cotmmd::mmd2(k, p, p), 0.0);
}

TEST(Mmd2, TwoDiracs) {
  const auto p = WeightedSamples::uniform(pts({0}));
  const auto q = WeightedSamples::uniform(pts({1}));
  EXPECT_NEAR(cotmmd::mmd2(Kernel::rbf(0.5), p, q), 2.0 - 2.0 * std::exp(-1.0), 1e-15);
  EXPECT_NEAR(cotmmd::mmd2(Kernel::rbf(0.5), p, q), 1.264241, 1e-6);
  EXPECT_EQ(cotmmd::mmd2(Kernel::rbf(0.5), p, p), 0.0);
}

TEST(Mmd2, DimensionMismatchThrows) {
  EXPECT_THROW(cotmmd::mmd2(Kernel::rbf(1.0), WeightedSamples::uniform(Matrix::Zero(2, 1)),
                            WeightedSamples::uniform(Matrix::Zero(2, 2))),
               cotmmd::DimensionError);
}

TEST(Mmd2ToDirac, Examples) {
  cotmmd::RowVector y(1);
  y << 1.0;
  EXPECT_EQ(cotmmd::mmd2_to_dirac(Kernel::rbf(0.5), WeightedSamples::dirac(y), y), 0.0);
  const double v = cotmmd::mmd2_to_dirac(Kernel::rbf(0.5), WeightedSamples::uniform(pts({0, 2})), y);
  const double expected = 1.0 + 0.25 * (2.0 + 2.0 * std::exp(-4.0)) - 2.0 * std::exp(-1.0);
  EXPECT_NEAR(v, expected, 1e-15);
  EXPECT_NEAR(v, 0.773399, 1e-6);
}

TEST(Mmd2, SymmetricAndBoundedAndMatchesLoop) {
  cotmmd::RngStream rng(5);
  for (int rep = 0; rep < 50; ++rep) {
    const Eigen::Index n = 1 + static_cast<Eigen::Index>(rng.index(8));
    const Eigen::Index p = 1 + static_cast<Eigen::Index>(rng.index(8));
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(rng.index(3));
    const auto a = cotmmd::test::random_measure(rng, n, d);
    const auto b = cotmmd::test::random_measure(rng, p, d);
    const Kernel k = Kernel::rbf(0.2 + rng.uniform() * 3.0);
    const double ab = cotmmd::mmd2(k, a, b);
    EXPECT_NEAR(ab, cotmmd::mmd2(k, b, a), 1e-14);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, 4.0);
    EXPECT_NEAR(ab, cotmmd::test::loop_mmd2(k, a, b), 1e-10);
  }
}

TEST(Mmd2, DiracPairIdentity) {
  cotmmd::RngStream rng(9);
  const Kernel k = Kernel::rbf(1.5);
  for (int rep = 0; rep < 20; ++rep) {
    const cotmmd::RowVector a = rng.normal_matrix(1, 2);
    const cotmmd::RowVector b = rng.normal_matrix(1, 2);
    const double v = cotmmd::mmd2(k, WeightedSamples::dirac(a), WeightedSamples::dirac(b));
    EXPECT_NEAR(v, 2.0 - 2.0 * k(a, b), 1e-14);
  }
}

TEST(Mmd2, TriangleInequalityOfRoot) {
  cotmmd::RngStream rng(21);
  for (auto k : {Kernel::rbf(1.0), Kernel::imq(1.0), Kernel::imq2(2.0)}) {
    for (int rep = 0; rep < 30; ++rep) {
      const auto a = cotmmd::test::random_measure(rng, 4, 2);
      const auto b = cotmmd::test::random_measure(rng, 3, 2);
      const auto c = cotmmd::test::random_measure(rng, 5, 2);
      const double ab = std::sqrt(std::max(cotmmd::mmd2(k, a, b), 0.0));
      const double bc = std::sqrt(std::max(cotmmd::mmd2(k, b, c), 0.0));
      const double ac = std::sqrt(std::max(cotmmd::mmd2(k, a, c), 0.0));
      EXPECT_LE(ac, ab + bc + 1e-8);
    }
  }
}

TEST(Mmd2, ToDiracMatchesGeneralForm) {
  cotmmd::RngStream rng(3);
  for (auto k : {Kernel::rbf(0.8), Kernel::imq(2.0), Kernel::imq2(0.5, true)}) {
    const auto p = cotmmd::test::random_measure(rng, 6, 2);
    const cotmmd::RowVector y = rng.normal_matrix(1, 2);
    EXPECT_NEAR(cotmmd::mmd2_to_dirac(k, p, y), cotmmd::mmd2(k, p, WeightedSamples::dirac(y)),
                1e-13);
  }
}

}  // namespace
