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

#include "cotmmd/diffengine.hpp"
#include "cotmmd/harness/gradcheck_suite.hpp"
#include "cotmmd/rng.hpp"

#include <gtest/gtest.h>

namespace {

using cotmmd::Matrix;
namespace ad = cotmmd::ad;

Matrix row(std::initializer_list<double> v) {
  Matrix m(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) m(0, i++) = x;
  return m;
}

TEST(Tape, SumOfSquaresGradient) {
  ad::Tape t;
  ad::Var x = t.variable(row({1, 2}));
  ad::Var loss = ad::sum(ad::square(x));
  t.backward(loss);
  EXPECT_EQ(x.grad()(0, 0), 2.0);
  EXPECT_EQ(x.grad()(0, 1), 4.0);
}

TEST(Tape, SoftmaxOfZeros) {
  ad::Tape t;
  ad::Var s = ad::softmax_rows(t.constant(row({0, 0})));
  EXPECT_EQ(s.value()(0, 0), 0.5);
  EXPECT_EQ(s.value()(0, 1), 0.5);
}

TEST(Tape, SecondBackwardIsRejected) {
  ad::Tape t;
  ad::Var x = t.variable(row({1, 2}));
  ad::Var loss = ad::sum(ad::square(x));
  t.backward(loss);
  EXPECT_THROW(t.backward(loss), cotmmd::Error);
  EXPECT_EQ(x.grad()(0, 1), 4.0);
}

TEST(Tape, ResetAllowsReuse) {
  ad::Tape t;
  ad::Var x = t.variable(row({3}));
  t.backward(ad::sum(ad::square(x)));
  t.reset();
  EXPECT_EQ(t.size(), 0u);
  ad::Var y = t.variable(row({5}));
  t.backward(ad::sum(ad::square(y)));
  EXPECT_EQ(y.grad()(0, 0), 10.0);
}

TEST(Tape, BackwardNeedsScalarLoss) {
  ad::Tape t;
  ad::Var x = t.variable(row({1, 2}));
  EXPECT_THROW(t.backward(ad::square(x)), cotmmd::DimensionError);
}

TEST(Tape, BackwardBeforeForwardIsRejected) {
  ad::Tape t;
  ad::Var nothing;
  EXPECT_THROW(t.backward(nothing), cotmmd::Error);
  ad::Tape other;
  ad::Var foreign = other.variable(row({1}));
  EXPECT_THROW(t.backward(foreign), cotmmd::Error);
}

TEST(Tape, NonRecordingTapeRejectsBackward) {
  ad::Tape t;
  t.set_recording(false);
  ad::Var x = t.variable(row({1, 2}));
  ad::Var loss = ad::sum(ad::square(x));
  EXPECT_EQ(loss.scalar(), 5.0);
  EXPECT_THROW(t.backward(loss), cotmmd::Error);
}

TEST(Tape, ShapeMismatchThrows) {
  ad::Tape t;
  ad::Var a = t.variable(Matrix::Zero(2, 3));
  ad::Var b = t.variable(Matrix::Zero(3, 2));
  EXPECT_THROW(ad::add(a, b), cotmmd::DimensionError);
  EXPECT_THROW(ad::matmul(a, a), cotmmd::DimensionError);
  EXPECT_THROW(ad::add_row(a, b), cotmmd::DimensionError);
  EXPECT_THROW(ad::sqdist(a, b), cotmmd::DimensionError);
}

TEST(Tape, OperandsFromDifferentTapesThrow) {
  ad::Tape t1, t2;
  ad::Var a = t1.variable(row({1}));
  ad::Var b = t2.variable(row({1}));
  EXPECT_THROW(ad::add(a, b), cotmmd::Error);
}

TEST(Tape, ConstantsReceiveNoGradient) {
  ad::Tape t;
  ad::Var c = t.constant(row({1, 2}));
  ad::Var x = t.variable(row({3, 4}));
  t.backward(ad::dot(c, x));
  EXPECT_EQ(c.grad().size(), 0);
  EXPECT_EQ(x.grad()(0, 0), 1.0);
  EXPECT_EQ(x.grad()(0, 1), 2.0);
}

TEST(Tape, ReusedNodeAccumulates) {
  ad::Tape t;
  ad::Var x = t.variable(row({3}));
  t.backward(ad::sum(ad::mul(x, x)));
  EXPECT_EQ(x.grad()(0, 0), 6.0);
}

TEST(Tape, ReluGradientAtKinkIsZero) {
  ad::Tape t;
  ad::Var x = t.variable(row({0.0, 1.0, -1.0}));
  t.backward(ad::sum(ad::relu(x)));
  EXPECT_EQ(x.grad()(0, 0), 0.0);
  EXPECT_EQ(x.grad()(0, 1), 1.0);
  EXPECT_EQ(x.grad()(0, 2), 0.0);
}

TEST(Tape, ParametersReportStorageAndGradient) {
  Matrix w = row({1.0, -2.0});
  ad::Tape t;
  ad::Var p = t.parameter(w);
  t.backward(ad::sum(ad::square(p)));
  auto ps = t.parameters();
  ASSERT_EQ(ps.size(), 1u);
  EXPECT_EQ(ps[0].first, &w);
  EXPECT_EQ((*ps[0].second)(0, 1), -4.0);
}

TEST(Tape, RecordingOffMatchesRecordingOnExactly) {
  cotmmd::RngStream rng(17);
  const Matrix a = rng.normal_matrix(5, 3);
  const Matrix w = rng.normal_matrix(3, 4);
  const Matrix b = rng.normal_matrix(1, 4);
  auto build = [&](ad::Tape& t) {
    ad::Var h = ad::tanh(ad::add_row(ad::matmul(t.constant(a), t.variable(w)), t.variable(b)));
    ad::Var s = ad::softmax_rows(h);
    ad::Var d = ad::sqdist(h, s);
    return ad::mean(ad::exp(ad::scale(d, -0.5)));
  };
  ad::Tape on, off;
  off.set_recording(false);
  EXPECT_EQ(build(on).scalar(), build(off).scalar());
}

TEST(Eval, TapedForwardMatchesPureForwardBitwise) {
  cotmmd::RngStream rng(4);
  const Matrix a = rng.normal_matrix(6, 3);
  const Matrix b = rng.normal_matrix(4, 3);
  ad::Tape t;
  ad::Var va = t.variable(a), vb = t.variable(b);
  EXPECT_EQ(ad::sqdist(va, vb).value(), ad::eval::sqdist(a, b));
  EXPECT_EQ(ad::tanh(va).value(), ad::eval::tanh(a));
  EXPECT_EQ(ad::softmax_rows(va).value(), ad::eval::softmax_rows(a));
  EXPECT_EQ(ad::block_sqdist(va, 3).value(), ad::eval::block_sqdist(a, 3));
  EXPECT_EQ(ad::matmul(va, t.constant(b.transpose())).value(),
            ad::eval::matmul(a, b.transpose()));
}

TEST(Eval, TanhMatchesLibm) {
  Matrix a(1, 7);
  a << -800.0, -3.0, -1e-3, 0.0, 1e-8, 2.5, 900.0;
  const Matrix t = ad::eval::tanh(a);
  for (Eigen::Index j = 0; j < a.cols(); ++j) EXPECT_NEAR(t(0, j), std::tanh(a(0, j)), 1e-15);
}

TEST(Eval, BlockSqdistLayout) {
  Matrix g(4, 1);
  g << 0, 1, 5, 7;
  const Matrix d = ad::eval::block_sqdist(g, 2);
  ASSERT_EQ(d.rows(), 2);
  ASSERT_EQ(d.cols(), 4);
  EXPECT_EQ(d(0, 1), 1.0);
  EXPECT_EQ(d(1, 2), 4.0);
  EXPECT_EQ(d(1, 3), 0.0);
  Matrix y(2, 1);
  y << 1, 6;
  const Matrix dt = ad::eval::block_sqdist_to(g, y, 2);
  EXPECT_EQ(dt(0, 0), 1.0);
  EXPECT_EQ(dt(1, 1), 1.0);
}

TEST(GradCheck, QuadraticIsExact) {
  cotmmd::RngStream rng(2);
  const auto r = ad::grad_check(
      [](ad::Tape&, const std::vector<ad::Var>& p) { return ad::sum(ad::square(p[0])); },
      {rng.normal_matrix(3, 3)});
  EXPECT_LE(r.max_rel_error, 1e-7);
  EXPECT_TRUE(r.passed());
}

TEST(GradCheck, DetectsWrongGradient) {
  // f = sum(x^2) but the taped op claims d/dx = x (half the truth).
  ad::GraphFunction f = [](ad::Tape& t, const std::vector<ad::Var>& p) {
    ad::Var x = p[0];
    ad::Var sq = t.record(x.value().array().square().matrix(), {x},
                          [ix = x.id()](ad::Tape& tp, std::size_t self) {
                            tp.grad_ref(ix).array() +=
                                tp.grad(self).array() * tp.value(ix).array();
                          },
                          "bad_square");
    return ad::sum(sq);
  };
  const auto r = ad::grad_check(f, {row({1.0, 2.0})});
  EXPECT_FALSE(r.passed());
  EXPECT_EQ(r.failures, 2u);
}

TEST(GradCheck, NonFiniteLossThrows) {
  ad::GraphFunction f = [](ad::Tape&, const std::vector<ad::Var>& p) {
    return ad::sum(ad::pow(p[0], -1.0));
  };
  EXPECT_THROW(ad::grad_check(f, {row({0.0})}), cotmmd::NonFiniteError);
}

class PrimitiveGradients : public ::testing::TestWithParam<std::string> {};

TEST_P(PrimitiveGradients, TenSeeds) {
  for (const auto& c : cotmmd::harness::gradcheck_cases()) {
    if (c.name != GetParam()) continue;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto row = cotmmd::harness::run_grad_case(c, seed);
      EXPECT_TRUE(row.passed) << c.name << " seed " << seed << " max rel " << row.max_rel_error
                              << " max abs " << row.max_abs_error;
    }
    return;
  }
  FAIL() << "unknown case " << GetParam();
}

std::vector<std::string> primitive_names() {
  std::vector<std::string> out;
  for (const auto& c : cotmmd::harness::gradcheck_cases())
    if (c.name.rfind("op.", 0) == 0) out.push_back(c.name);
  return out;
}

INSTANTIATE_TEST_SUITE_P(Ops, PrimitiveGradients, ::testing::ValuesIn(primitive_names()),
                         [](const auto& info) {
                           std::string s = info.param.substr(3);
                           return s;
                         });

}  // namespace
