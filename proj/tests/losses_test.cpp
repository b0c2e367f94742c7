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

#include "miaudit/losses.hpp"

#include <cmath>

#include "gtest/gtest.h"
#include "testing_util.hpp"

namespace miaudit {
namespace {

using testing::max_grad_rel_err;
using testing::numeric_grad;

Matrix uniform_logprob_rows(std::size_t t, std::size_t v) {
  return Matrix(t, v, -std::log(static_cast<double>(v)));
}

// Random normalized log-probability rows.
Matrix random_logprob_rows(std::size_t t, std::size_t v, Rng& rng) {
  Matrix m(t, v);
  for (std::size_t r = 0; r < t; ++r) {
    double z = 0.0;
    std::vector<double> logits(v);
    for (std::size_t j = 0; j < v; ++j) logits[j] = rng.uniform(-2, 2);
    double mx = *std::max_element(logits.begin(), logits.end());
    for (std::size_t j = 0; j < v; ++j) z += std::exp(logits[j] - mx);
    double lz = mx + std::log(z);
    for (std::size_t j = 0; j < v; ++j) m.at(r, j) = logits[j] - lz;
  }
  return m;
}

Tensor as_tensor(const Matrix& m) { return constant({m.rows, m.cols}, m.v); }

TEST(CtcLossTest, SinglePathSingleFrame) {
  Matrix lp = uniform_logprob_rows(1, 2);
  CtcLoss r = ctc_loss(as_tensor(lp), {1});
  EXPECT_FALSE(r.infeasible);
  EXPECT_NEAR(r.loss.scalar(), -std::log(0.5), 1e-12);
}

// T=2, V=2, uniform rows, target=[1]: the valid paths are (1,blank),
// (blank,1), (1,1), so P = 3 * 0.25. Frozen value computed with the
// enumeration oracle below.
TEST(CtcLossTest, ThreePathCaseMatchesEnumeration) {
  Matrix lp = uniform_logprob_rows(2, 2);
  CtcLoss r = ctc_loss(as_tensor(lp), {1});
  double expected = -std::log(0.75);  // 0.28768...
  EXPECT_NEAR(r.loss.scalar(), expected, 1e-12);
  EXPECT_NEAR(ctc_brute_force(lp, {1}), expected, 1e-12);
  EXPECT_NEAR(r.loss.scalar(), 0.2876820724517809, 1e-12);
}

TEST(CtcLossTest, EmptyTargetIsAllBlankPath) {
  Rng rng(31);
  Matrix lp = random_logprob_rows(5, 3, rng);
  double expected = 0.0;
  for (std::size_t t = 0; t < 5; ++t) expected -= lp.at(t, 0);
  CtcLoss r = ctc_loss(as_tensor(lp), {});
  EXPECT_FALSE(r.infeasible);
  EXPECT_NEAR(r.loss.scalar(), expected, 1e-10);
}

TEST(CtcLossTest, InfeasibleTargetFlaggedNotThrown) {
  Matrix lp = uniform_logprob_rows(1, 2);
  CtcLoss r = ctc_loss(as_tensor(lp), {1, 1});  // needs 3 frames
  EXPECT_TRUE(r.infeasible);
  EXPECT_TRUE(std::isinf(r.loss.scalar()));
  // Repeated labels require a separating blank; distinct labels do not.
  EXPECT_EQ(ctc_min_frames({1, 1}), 3u);
  EXPECT_EQ(ctc_min_frames({1, 2}), 2u);
}

TEST(CtcLossTest, ZeroProbabilityTargetInfiniteOnBothPaths) {
  Matrix lp(1, 2);
  lp.at(0, 0) = 0.0;  // all mass on blank
  lp.at(0, 1) = kNegInf;
  CtcLoss r = ctc_loss(as_tensor(lp), {1});
  EXPECT_TRUE(std::isinf(r.loss.scalar()));
  EXPECT_FALSE(r.infeasible);
  EXPECT_TRUE(std::isinf(ctc_brute_force(lp, {1})));
}

TEST(CtcBruteForceTest, SingleFrameEmptyTarget) {
  Rng rng(37);
  Matrix lp = random_logprob_rows(1, 3, rng);
  EXPECT_NEAR(ctc_brute_force(lp, {}), -lp.at(0, 0), 1e-12);
}

TEST(CtcBruteForceTest, BoundsEnforced) {
  Matrix lp = uniform_logprob_rows(9, 2);
  EXPECT_THROW(ctc_brute_force(lp, {1}), std::invalid_argument);
  Matrix wide = uniform_logprob_rows(2, 5);
  EXPECT_THROW(ctc_brute_force(wide, {1}), std::invalid_argument);
}

// The seeded oracle-equivalence sweep; the acceptance suite runs the full
// 200-instance version of this with its timing budget.
TEST(CtcLossTest, ForwardMatchesBruteForceOnSeededInstances) {
  Rng rng(1234);
  int checked = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::size_t t = 1 + rng.below(6);
    std::size_t v = 2 + rng.below(2);
    std::size_t n = rng.below(4);  // |target| <= 3
    TokenSeq target;
    for (std::size_t i = 0; i < n; ++i) target.push_back(1 + static_cast<int>(rng.below(v - 1)));
    Matrix lp = random_logprob_rows(t, v, rng);
    CtcLoss r = ctc_loss(as_tensor(lp), target);
    double oracle = ctc_brute_force(lp, target);
    if (r.infeasible) {
      EXPECT_TRUE(std::isinf(oracle));
      continue;
    }
    ++checked;
    if (std::isinf(oracle)) {
      EXPECT_TRUE(std::isinf(r.loss.scalar()));
    } else {
      EXPECT_NEAR(r.loss.scalar(), oracle, 1e-6);
    }
  }
  EXPECT_GT(checked, 100);
}

TEST(CtcLossTest, GradientWrtLogitsMatchesFiniteDifferences) {
  Rng rng(77);
  const std::size_t t = 4, v = 3;
  std::vector<double> logits(t * v);
  for (auto& x : logits) x = rng.uniform(-1.5, 1.5);
  TokenSeq target = {1, 2};

  auto f = [&](const std::vector<double>& in) {
    Tensor lp = log_softmax(constant({t, v}, in));
    return ctc_loss(lp, target).loss.scalar();
  };
  Tape tape;
  Tensor x = leaf(tape, {t, v}, logits);
  Gradients g = backward(ctc_loss(log_softmax(x), target).loss);
  EXPECT_LE(max_grad_rel_err(g.wrt(x), numeric_grad(f, logits)), 1e-3);
}

// Helper for the monotonicity property: W[v] = sum over valid paths with
// frame t fixed to v of the product of the other frames' probabilities.
// Enumeration-based, independent of the forward recursion.
std::vector<double> frame_fix_weights(const Matrix& lp, const TokenSeq& target, std::size_t frame) {
  const std::size_t tt = lp.rows, vv = lp.cols;
  std::size_t n_paths = 1;
  for (std::size_t t = 0; t < tt; ++t) n_paths *= vv;
  std::vector<double> w(vv, 0.0);
  std::vector<int> path(tt);
  for (std::size_t code = 0; code < n_paths; ++code) {
    std::size_t c = code;
    for (std::size_t t = 0; t < tt; ++t) {
      path[t] = static_cast<int>(c % vv);
      c /= vv;
    }
    TokenSeq collapsed;
    int prev = -1;
    for (int lab : path) {
      if (lab != prev && lab != kBlankId) collapsed.push_back(lab);
      prev = lab;
    }
    if (collapsed != target) continue;
    double p = 1.0;
    for (std::size_t t = 0; t < tt; ++t)
      if (t != frame) p *= std::exp(lp.at(t, static_cast<std::size_t>(path[t])));
    w[static_cast<std::size_t>(path[frame])] += p;
  }
  return w;
}

// Raising mass toward the enumeration-optimal label of any single frame
// (renormalized) never increases the loss. Note the label must be the one
// maximizing the fixed-frame path weight: boosting an arbitrary valid
// alignment's label can increase the loss, so the stronger phrasing is not
// a theorem.
TEST(CtcLossTest, MonotoneUnderCertainty) {
  Rng rng(555);
  const double boost = 0.5;
  for (int trial = 0; trial < 40; ++trial) {
    std::size_t t = 2 + rng.below(3);  // T in [2,4]
    std::size_t v = 2 + rng.below(2);
    TokenSeq target = {1};
    if (rng.below(2) && t >= 2) target.push_back(1 + static_cast<int>(rng.below(v - 1)));
    if (ctc_min_frames(target) > t) continue;
    Matrix lp = random_logprob_rows(t, v, rng);
    double base = ctc_loss(as_tensor(lp), target).loss.scalar();
    if (std::isinf(base)) continue;
    for (std::size_t frame = 0; frame < t; ++frame) {
      std::vector<double> w = frame_fix_weights(lp, target, frame);
      std::size_t best = static_cast<std::size_t>(
          std::max_element(w.begin(), w.end()) - w.begin());
      Matrix boosted = lp;
      for (std::size_t j = 0; j < v; ++j) {
        double p = std::exp(lp.at(frame, j)) + (j == best ? boost : 0.0);
        boosted.at(frame, j) = std::log(p / (1.0 + boost));
      }
      double after = ctc_loss(as_tensor(boosted), target).loss.scalar();
      EXPECT_LE(after, base + 1e-12) << "frame " << frame;
    }
  }
}

TEST(AttentionKlTest, UniformPredictionNoSmoothing) {
  // V' = 5, U = 3, uniform rows: mean NLL = log 5.
  Matrix lp = uniform_logprob_rows(3, 5);
  Tensor loss = attention_kl_loss(as_tensor(lp), {1, 2}, 0.0);
  EXPECT_NEAR(loss.scalar(), std::log(5.0), 1e-12);
}

TEST(AttentionKlTest, ExactMatchGivesZero) {
  const std::size_t vp = 5;
  const double s = 0.2;
  TokenSeq target = {2, 1};
  Matrix lp(target.size() + 1, vp);
  for (std::size_t u = 0; u <= target.size(); ++u) {
    std::size_t hot = u < target.size() ? static_cast<std::size_t>(target[u]) : vp - 1;
    std::vector<double> q = smoothed_onehot(vp, hot, s);
    for (std::size_t j = 0; j < vp; ++j) lp.at(u, j) = std::log(q[j]);
  }
  EXPECT_NEAR(attention_kl_loss(as_tensor(lp), target, s).scalar(), 0.0, 1e-12);
}

// Direct-summation oracle for the smoothed case.
TEST(AttentionKlTest, SmoothedUniformPredictionMatchesDirectSum) {
  const std::size_t vp = 5;
  const double s = 0.1;
  TokenSeq target = {1, 3, 2};
  Matrix lp = uniform_logprob_rows(target.size() + 1, vp);

  double expected = 0.0;
  for (std::size_t u = 0; u <= target.size(); ++u) {
    std::size_t hot = u < target.size() ? static_cast<std::size_t>(target[u]) : vp - 1;
    std::vector<double> q = smoothed_onehot(vp, hot, s);
    double kl = 0.0;
    for (std::size_t j = 0; j < vp; ++j)
      kl += q[j] * (std::log(q[j]) - std::log(1.0 / vp));
    expected += kl;
  }
  expected /= static_cast<double>(target.size() + 1);
  EXPECT_NEAR(attention_kl_loss(as_tensor(lp), target, s).scalar(), expected, 1e-12);
}

TEST(AttentionKlTest, NonNegativeOnRandomInstances) {
  Rng rng(99);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t vp = 4 + rng.below(4);
    TokenSeq target;
    std::size_t n = rng.below(4);
    for (std::size_t i = 0; i < n; ++i) target.push_back(1 + static_cast<int>(rng.below(vp - 3)));
    Matrix lp = random_logprob_rows(target.size() + 1, vp, rng);
    double s = rng.uniform(0.0, 0.5);
    EXPECT_GE(attention_kl_loss(as_tensor(lp), target, s).scalar(), -1e-12);
  }
}

TEST(AttentionKlTest, PositionCountMismatchThrows) {
  Matrix lp = uniform_logprob_rows(2, 5);
  EXPECT_THROW(attention_kl_loss(as_tensor(lp), {1, 2}, 0.0), std::invalid_argument);
}

TEST(AttentionKlTest, GradientMatchesFiniteDifferences) {
  Rng rng(41);
  const std::size_t u = 3, vp = 5;
  std::vector<double> logits(u * vp);
  for (auto& x : logits) x = rng.uniform(-1, 1);
  TokenSeq target = {2, 3};
  auto f = [&](const std::vector<double>& in) {
    return attention_kl_loss(log_softmax(constant({u, vp}, in)), target, 0.1).scalar();
  };
  Tape tape;
  Tensor x = leaf(tape, {u, vp}, logits);
  Gradients g = backward(attention_kl_loss(log_softmax(x), target, 0.1));
  EXPECT_LE(max_grad_rel_err(g.wrt(x), numeric_grad(f, logits)), 1e-3);
}

TEST(CombinedLossTest, WeightEndpointsAndInterpolation) {
  Tensor att = scalar_constant(2.0);
  Tensor ctc = scalar_constant(4.0);
  EXPECT_DOUBLE_EQ(combined_loss(att, ctc, 1.0).scalar(), 2.0);
  EXPECT_DOUBLE_EQ(combined_loss(att, ctc, 0.0).scalar(), 4.0);
  EXPECT_NEAR(combined_loss(att, ctc, 0.7).scalar(), 2.6, 1e-12);
  EXPECT_THROW(combined_loss(att, ctc, 1.1), std::invalid_argument);
}

}  // namespace
}  // namespace miaudit
