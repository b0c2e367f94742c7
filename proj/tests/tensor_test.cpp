// Copyright 2026 The miaudit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "miaudit/tensor.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "testing_util.hpp"

namespace miaudit {
namespace {

using testing::max_grad_rel_err;
using testing::numeric_grad;
using testing::rel_err;

TEST(ElementwiseTest, AddVectors) {
  Tensor a = constant({2}, {1, 2});
  Tensor b = constant({2}, {3, 4});
  Tensor c = add(a, b);
  EXPECT_EQ(c.data(), (std::vector<double>{4, 6}));
}

TEST(ElementwiseTest, MulByZeroTensorAnnihilatesValueAndGradient) {
  Tape tape;
  Tensor x = leaf(tape, {3}, {1.5, -2.0, 7.0});
  Tensor z = constant({3}, {0, 0, 0});
  Tensor y = mul(x, z);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
  Gradients g = backward(sum(y));
  for (double v : g.wrt(x)) EXPECT_EQ(v, 0.0);
}

TEST(ElementwiseTest, LogExpInversePair) {
  Rng rng(7);
  for (int i = 0; i < 50; ++i) {
    double x = rng.uniform(-10.0, 10.0);
    Tensor t = scalar_constant(x);
    EXPECT_NEAR(log(exp(t)).scalar(), x, 1e-12);
  }
}

TEST(ElementwiseTest, ShapeMismatchNamesBothShapes) {
  Tensor a = constant({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = constant({4}, std::vector<double>(4, 1.0));
  try {
    add(a, b);
    FAIL() << "expected shape mismatch";
  } catch (const std::invalid_argument& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4]"), std::string::npos) << msg;
  }
}

TEST(ElementwiseTest, ScalarBroadcast) {
  Tensor s = scalar_constant(2.0);
  Tensor v = constant({3}, {1, 2, 3});
  EXPECT_EQ(mul(s, v).data(), (std::vector<double>{2, 4, 6}));
  EXPECT_EQ(sub(v, s).data(), (std::vector<double>{-1, 0, 1}));
}

TEST(MatmulTest, IdentityLeavesMatrixUnchanged) {
  std::vector<double> eye(9, 0.0);
  eye[0] = eye[4] = eye[8] = 1.0;
  Tensor id = constant({3, 3}, eye);
  Tensor b = constant({3, 2}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(matmul(id, b).data(), b.data());
}

TEST(MatmulTest, HandProduct) {
  Tensor a = constant({1, 2}, {1, 2});
  Tensor b = constant({2, 1}, {3, 4});
  EXPECT_EQ(matmul(a, b).data(), (std::vector<double>{11}));
}

TEST(MatmulTest, DimensionMismatchThrows) {
  Tensor a = constant({2, 3}, std::vector<double>(6, 1.0));
  Tensor b = constant({2, 2}, std::vector<double>(4, 1.0));
  EXPECT_THROW(matmul(a, b), std::invalid_argument);
}

// Gradient of sum(A.B) wrt A against the finite-difference oracle.
TEST(MatmulTest, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  std::vector<double> av(6), bv(12);
  for (auto& x : av) x = rng.uniform(-1, 1);
  for (auto& x : bv) x = rng.uniform(-1, 1);

  auto loss_of_a = [&](const std::vector<double>& a_in) {
    Tensor a = constant({2, 3}, a_in);
    Tensor b = constant({3, 4}, bv);
    return sum(matmul(a, b)).scalar();
  };
  Tape tape;
  Tensor a = leaf(tape, {2, 3}, av);
  Tensor b = constant({3, 4}, bv);
  Gradients g = backward(sum(matmul(a, b)));
  EXPECT_LE(max_grad_rel_err(g.wrt(a), numeric_grad(loss_of_a, av)), 1e-4);
}

TEST(LogSoftmaxTest, UniformRow) {
  Tensor a = constant({4}, {0.7, 0.7, 0.7, 0.7});
  Tensor y = log_softmax(a);
  for (double v : y.data()) EXPECT_NEAR(v, -std::log(4.0), 1e-12);
}

TEST(LogSoftmaxTest, StabilizedAgainstOverflow) {
  Tensor a = constant({2}, {1000.0, 0.0});
  Tensor y = log_softmax(a);
  EXPECT_NEAR(y.at(0), 0.0, 1e-12);
  EXPECT_NEAR(y.at(1), -1000.0, 1e-9);
}

TEST(LogSoftmaxTest, RowsNormalizeToOne) {
  Rng rng(3);
  std::vector<double> v(12);
  for (auto& x : v) x = rng.uniform(-5, 5);
  Tensor y = log_softmax(constant({3, 4}, v));
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < 4; ++j) s += std::exp(y.at(r * 4 + j));
    EXPECT_NEAR(s, 1.0, 1e-9);
  }
}

TEST(LogSoftmaxTest, GradientMatchesFiniteDifferences) {
  Rng rng(5);
  std::vector<double> v(8), w(8);
  for (auto& x : v) x = rng.uniform(-2, 2);
  for (auto& x : w) x = rng.uniform(-1, 1);
  auto f = [&](const std::vector<double>& in) {
    return dot(log_softmax(constant({2, 4}, in)), constant({2, 4}, w)).scalar();
  };
  Tape tape;
  Tensor a = leaf(tape, {2, 4}, v);
  Gradients g = backward(dot(log_softmax(a), constant({2, 4}, w)));
  EXPECT_LE(max_grad_rel_err(g.wrt(a), numeric_grad(f, v)), 1e-4);
}

TEST(LogsumexpTest, HalvesSumToHalf) {
  Tensor a = constant({2}, {std::log(0.25), std::log(0.25)});
  EXPECT_NEAR(logsumexp(a, 0).scalar(), std::log(0.5), 1e-12);
}

TEST(LogsumexpTest, NegInfIsAbsorbingZero) {
  Tensor a = constant({2}, {kNegInf, 1.25});
  EXPECT_EQ(logsumexp(a, 0).scalar(), 1.25);
  Tensor b = constant({3}, {kNegInf, kNegInf, kNegInf});
  EXPECT_EQ(logsumexp(b, 0).scalar(), kNegInf);
}

// Extended-precision oracle: long double accumulation without stabilization.
TEST(LogsumexpTest, MatchesExtendedPrecisionOracle) {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> v(8);
    for (auto& x : v) x = rng.uniform(-8, 8);
    long double s = 0.0L;
    for (double x : v) s += expl(static_cast<long double>(x));
    double expected = static_cast<double>(logl(s));
    EXPECT_NEAR(logsumexp(constant({8}, v), 0).scalar(), expected, 1e-10);
  }
}

TEST(LogsumexpTest, ReducesChosenAxis) {
  Tensor a = constant({2, 3}, {0, 0, 0, 1, 1, 1});
  Tensor r0 = logsumexp(a, 0);
  EXPECT_EQ(r0.shape, Shape({3}));
  for (std::size_t j = 0; j < 3; ++j)
    EXPECT_NEAR(r0.at(j), std::log(std::exp(0.0) + std::exp(1.0)), 1e-12);
  Tensor r1 = logsumexp(a, 1);
  EXPECT_EQ(r1.shape, Shape({2}));
  EXPECT_NEAR(r1.at(0), std::log(3.0), 1e-12);
}

TEST(LogaddexpTest, MatchesLogsumexpPairwise) {
  Rng rng(23);
  for (int i = 0; i < 30; ++i) {
    double x = rng.uniform(-20, 20), y = rng.uniform(-20, 20);
    double got = logaddexp(scalar_constant(x), scalar_constant(y)).scalar();
    EXPECT_NEAR(got, logsumexp(constant({2}, {x, y}), 0).scalar(), 1e-12);
  }
  EXPECT_EQ(logaddexp(scalar_constant(kNegInf), scalar_constant(kNegInf)).scalar(), kNegInf);
  EXPECT_EQ(logaddexp(scalar_constant(kNegInf), scalar_constant(3.0)).scalar(), 3.0);
}

TEST(BackwardTest, SumGivesOnes) {
  Tape tape;
  Tensor x = leaf(tape, {4}, {1, 2, 3, 4});
  Gradients g = backward(sum(x));
  EXPECT_EQ(g.wrt(x), (std::vector<double>{1, 1, 1, 1}));
}

TEST(BackwardTest, SumOfSquaresGivesTwoX) {
  Tape tape;
  std::vector<double> v = {0.5, -1.5, 2.0};
  Tensor x = leaf(tape, {3}, v);
  Gradients g = backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_DOUBLE_EQ(g.wrt(x)[i], 2 * v[i]);
}

TEST(BackwardTest, NonScalarLossRejected) {
  Tape tape;
  Tensor x = leaf(tape, {2}, {1, 2});
  EXPECT_THROW(backward(x), std::invalid_argument);
}

TEST(BackwardTest, UnreachedLeafGetsZeros) {
  Tape tape;
  Tensor x = leaf(tape, {2}, {1, 2});
  Tensor y = leaf(tape, {2}, {3, 4});
  Gradients g = backward(sum(x));
  EXPECT_EQ(g.wrt(y), (std::vector<double>{0, 0}));
}

TEST(BackwardTest, RepeatedBackwardIsBitwiseIdentical) {
  Tape tape;
  Rng rng(29);
  std::vector<double> v(6);
  for (auto& x : v) x = rng.uniform(-1, 1);
  Tensor x = leaf(tape, {2, 3}, v);
  Tensor loss = sum(mul(tanh(x), x));
  Gradients g1 = backward(loss);
  Gradients g2 = backward(loss);
  EXPECT_EQ(g1.wrt(x), g2.wrt(x));
}

TEST(BackwardTest, ConstantOnlyGraphRegistersNothing) {
  Tape tape;
  Tensor a = constant({2}, {1, 2});
  Tensor b = constant({2}, {3, 4});
  Tensor c = mul(add(a, b), b);
  EXPECT_FALSE(c.tracked());
  EXPECT_EQ(tape.size(), 0u);
}

// Every differentiable op, reduced to a scalar through fixed random
// weights, must agree with central finite differences (step 1e-4) to
// relative error <= 1e-3 on seeded small tensors.
TEST(GradientSuiteTest, AllOpsMatchFiniteDifferences) {
  struct Case {
    const char* name;
    std::function<Tensor(const Tensor&)> apply;
    double lo, hi;  // input range keeps us away from kinks and poles
  };
  std::vector<Case> cases = {
      {"neg", [](const Tensor& t) { return neg(t); }, -2, 2},
      {"tanh", [](const Tensor& t) { return tanh(t); }, -2, 2},
      {"relu", [](const Tensor& t) { return relu(t); }, 0.1, 2},
      {"exp", [](const Tensor& t) { return exp(t); }, -2, 2},
      {"log", [](const Tensor& t) { return log(t); }, 0.5, 3},
      {"scale", [](const Tensor& t) { return scale(t, -1.7); }, -2, 2},
      {"add_const", [](const Tensor& t) { return add_const(t, 0.3); }, -2, 2},
      {"add_self", [](const Tensor& t) { return add(t, t); }, -2, 2},
      {"mul_self", [](const Tensor& t) { return mul(t, t); }, -2, 2},
      {"sub_const_tensor",
       [](const Tensor& t) { return sub(t, constant({2, 3}, {1, 2, 3, 4, 5, 6})); }, -2, 2},
      {"log_softmax", [](const Tensor& t) { return log_softmax(t); }, -2, 2},
      {"softmax", [](const Tensor& t) { return softmax(t); }, -2, 2},
      {"logsumexp0", [](const Tensor& t) { return logsumexp(t, 0); }, -2, 2},
      {"logsumexp1", [](const Tensor& t) { return logsumexp(t, 1); }, -2, 2},
      {"logaddexp_self", [](const Tensor& t) { return logaddexp(t, scale(t, 0.5)); }, -2, 2},
      {"reshape", [](const Tensor& t) { return reshape(t, {6}); }, -2, 2},
      {"slice_row", [](const Tensor& t) { return slice_row(t, 1); }, -2, 2},
      {"shift_right",
       [](const Tensor& t) { return shift_right(reshape(t, {6}), 2); }, -2, 2},
      {"gather",
       [](const Tensor& t) { return gather(reshape(t, {6}), {5, 0, 0, 3}); }, -2, 2},
      {"stack_rows",
       [](const Tensor& t) {
         return stack_rows({slice_row(t, 1), slice_row(t, 0), slice_row(t, 1)});
       }, -2, 2},
      {"matmul",
       [](const Tensor& t) { return matmul(t, constant({3, 2}, {1, -1, 2, 0.5, -0.25, 3})); }, -2, 2},
      {"matvec",
       [](const Tensor& t) { return matvec(t, constant({3}, {0.3, -1.2, 0.7})); }, -2, 2},
      {"add_rowvec",
       [](const Tensor& t) { return add_rowvec(t, constant({3}, {0.1, 0.2, 0.3})); }, -2, 2},
  };

  Rng rng(101);
  for (const auto& c : cases) {
    std::vector<double> v(6);
    for (auto& x : v) x = rng.uniform(c.lo, c.hi);
    // Fixed random weights turn the op output into a scalar with
    // non-degenerate upstream gradients.
    Tensor probe = c.apply(constant({2, 3}, v));
    std::vector<double> w(probe.numel());
    for (auto& x : w) x = rng.uniform(-1, 1);
    Tensor wt = constant(probe.shape, w);

    auto f = [&](const std::vector<double>& in) {
      return dot(c.apply(constant({2, 3}, in)), wt).scalar();
    };
    Tape tape;
    Tensor x = leaf(tape, {2, 3}, v);
    Gradients g = backward(dot(c.apply(x), wt));
    double err = max_grad_rel_err(g.wrt(x), numeric_grad(f, v));
    EXPECT_LE(err, 1e-3) << "op " << c.name;
  }
}

// The enum dispatcher must hit the same implementations.
TEST(GradientSuiteTest, ElementwiseDispatcherRoutes) {
  Tensor a = constant({2}, {1.0, 2.0});
  Tensor b = constant({2}, {0.5, 0.25});
  EXPECT_EQ(elementwise(EwOp::kAdd, a, &b).data(), add(a, b).data());
  EXPECT_EQ(elementwise(EwOp::kNeg, a).data(), neg(a).data());
  EXPECT_EQ(elementwise(EwOp::kScale, a, nullptr, 2.0).data(), scale(a, 2.0).data());
}

TEST(TensorTest, ValuesLengthMustMatchShape) {
  EXPECT_THROW(constant({2, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(TensorTest, MixedTapesRejected) {
  Tape t1, t2;
  Tensor a = leaf(t1, {2}, {1, 2});
  Tensor b = leaf(t2, {2}, {3, 4});
  EXPECT_THROW(add(a, b), std::invalid_argument);
}

}  // namespace
}  // namespace miaudit
