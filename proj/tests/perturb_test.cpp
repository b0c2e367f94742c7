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

#include "miaudit/perturb.hpp"

#include "gtest/gtest.h"
#include "miaudit/data.hpp"

namespace miaudit {
namespace {

struct Fixture {
  Fixture() {
    corpus = gen_corpus(4, 4, 6, 4, 50);
    ModelConfig c;
    c.input_dim = 4;
    c.hidden_dim = 8;
    c.vocab_size = 6;
    c.seed = 3;
    ckpt = init_model(c);
    mt = model_constants(ckpt);
  }
  Corpus corpus;
  Checkpoint ckpt;
  ModelTensors mt;
};

Fixture& fixture() {
  static Fixture f;
  return f;
}

TEST(ScaleNoiseTest, UnitSnrMatchesSignalEnergy) {
  std::vector<double> x = {3.0, 4.0};        // |x|^2 = 25
  std::vector<double> d = {1.0, 1.0};
  std::vector<double> s = scale_noise_to_snr(x, d, 1.0);
  double e = s[0] * s[0] + s[1] * s[1];
  EXPECT_NEAR(e, 25.0, 25.0 * 1e-12);
}

TEST(ScaleNoiseTest, TenDbFormulaCase) {
  // |x|^2 = 100, snr 10 dB -> linear 10 -> |delta|^2 = 10.
  std::vector<double> x = {10.0, 0.0, 0.0};
  std::vector<double> d = {0.3, -2.0, 1.1};
  std::vector<double> s = scale_noise_to_snr(x, d, db_to_linear(10.0));
  double e = 0.0;
  for (double v : s) e += v * v;
  EXPECT_NEAR(e, 10.0, 1e-9);
}

TEST(ScaleNoiseTest, MeasuredSnrWithinHundredthDb) {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 8 + rng.below(64);
    std::vector<double> x(n), d(n);
    for (auto& v : x) v = rng.uniform(-2, 2);
    for (auto& v : d) v = rng.normal();
    double requested_db = rng.uniform(0.0, 50.0);
    std::vector<double> s = scale_noise_to_snr(x, d, db_to_linear(requested_db));
    double ex = 0.0, es = 0.0;
    for (double v : x) ex += v * v;
    for (double v : s) es += v * v;
    double measured_db = 10.0 * std::log10(ex / es);
    EXPECT_NEAR(measured_db, requested_db, 0.01);
  }
}

TEST(ScaleNoiseTest, ZeroEnergyInputsRejected) {
  std::vector<double> zero = {0.0, 0.0};
  std::vector<double> ok = {1.0, 2.0};
  EXPECT_THROW(scale_noise_to_snr(zero, ok, 1.0), NumericalError);
  EXPECT_THROW(scale_noise_to_snr(ok, zero, 1.0), NumericalError);
}

TEST(GaussianFeaturesTest, SingleRunHasZeroStddev) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[0];
  GaussianConfig cfg = GaussianConfig::defaults();
  cfg.runs_per_snr = 1;
  std::vector<double> feats = gaussian_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  ASSERT_EQ(feats.size(), 32u);
  for (std::size_t si = 0; si < 8; ++si) {
    EXPECT_EQ(feats[4 * si + 2], 0.0);
    EXPECT_EQ(feats[4 * si + 3], 0.0);
  }
}

TEST(GaussianFeaturesTest, VanishingNoiseRecoversCleanLosses) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[1];
  LossPair clean = loss_pair(f.mt, u.frames, u.target);
  GaussianConfig cfg;
  cfg.snrs_db = {300.0};
  cfg.runs_per_snr = 2;
  std::vector<double> feats = gaussian_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  ASSERT_EQ(feats.size(), 4u);
  EXPECT_NEAR(feats[0], clean.attention_kl, 1e-3);
  EXPECT_NEAR(feats[1], clean.ctc, 1e-3);
}

TEST(GaussianFeaturesTest, DeterministicAcrossCalls) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[2];
  GaussianConfig cfg = GaussianConfig::defaults();
  cfg.seed = 9;
  std::vector<double> a = gaussian_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  std::vector<double> b = gaussian_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  EXPECT_EQ(a, b);
  cfg.seed = 10;
  std::vector<double> c = gaussian_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  EXPECT_NE(a, c);
}

TEST(GaussianFeaturesTest, DefaultGridIsEightLinearlySpacedSnrs) {
  GaussianConfig cfg = GaussianConfig::defaults();
  ASSERT_EQ(cfg.snrs_db.size(), 8u);
  EXPECT_DOUBLE_EQ(cfg.snrs_db.front(), 0.0);
  EXPECT_DOUBLE_EQ(cfg.snrs_db.back(), 50.0);
  for (std::size_t i = 1; i < 8; ++i)
    EXPECT_NEAR(cfg.snrs_db[i] - cfg.snrs_db[i - 1], 50.0 / 7.0, 1e-12);
  EXPECT_EQ(cfg.runs_per_snr, 4);
}

TEST(PgdTest, ZeroRadiusGivesZeroDeltaAndCleanFeatures) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[3];
  Matrix delta = pgd_perturb(f.mt, u.utterance_id, u.frames, u.target, 0.0, 1.0, 1, 5);
  for (double v : delta.v) EXPECT_EQ(v, 0.0);

  AdvConfig cfg;
  cfg.radii = {0.0};
  // Radii of zero are rejected as a config (must be positive in ascending
  // grids), so compare through the loss pair directly.
  Matrix perturbed = u.frames;
  for (std::size_t i = 0; i < perturbed.v.size(); ++i) perturbed.v[i] += delta.v[i];
  LossPair clean = loss_pair(f.mt, u.frames, u.target);
  LossPair at_zero = loss_pair(f.mt, perturbed, u.target);
  EXPECT_EQ(clean.attention_kl, at_zero.attention_kl);
  EXPECT_EQ(clean.ctc, at_zero.ctc);
}

// With eta = 1 >= epsilon, one step saturates every coordinate whose
// sign-gradient is nonzero.
TEST(PgdTest, UnitStepSaturatesNonzeroGradientCoordinates) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[4];
  const double eps = 0.05;
  Matrix delta = pgd_perturb(f.mt, u.utterance_id, u.frames, u.target, eps, 1.0, 1, 5);

  // Recompute the sign gradient at the initial draw.
  Rng rng(seed_mix(5, {fnv1a64("adversarial"), fnv1a64(u.utterance_id), 0ull}));
  Matrix delta0(u.frames.rows, u.frames.cols);
  for (double& v : delta0.v) v = rng.uniform(-eps, eps);
  Tape tape;
  std::vector<double> perturbed(u.frames.v.size());
  for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = u.frames.v[i] + delta0.v[i];
  Tensor x = leaf(tape, {u.frames.rows, u.frames.cols}, std::move(perturbed));
  Gradients g = backward(utterance_loss(f.mt, x, u.target));
  const std::vector<double>& grad = g.wrt(x);

  for (std::size_t i = 0; i < delta.v.size(); ++i) {
    EXPECT_LE(std::abs(delta.v[i]), eps);
    if (grad[i] != 0.0) {
      EXPECT_EQ(std::abs(delta.v[i]), eps) << "coordinate " << i;
      EXPECT_EQ(delta.v[i] > 0, grad[i] > 0);
    } else {
      EXPECT_EQ(delta.v[i], delta0.v[i]);
    }
  }
}

TEST(PgdTest, LinfConstraintHoldsExactly) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[5];
  for (double eps : {0.001, 0.01, 0.07}) {
    for (int steps : {1, 3}) {
      Matrix delta = pgd_perturb(f.mt, u.utterance_id, u.frames, u.target, eps, 1.0, steps, 6);
      for (double v : delta.v) EXPECT_LE(std::abs(v), eps);
    }
  }
}

TEST(AdversarialFeaturesTest, OutputLengthAndDeterminism) {
  Fixture& f = fixture();
  const Utterance& u = f.corpus.utterances[6];
  AdvConfig cfg = AdvConfig::defaults();
  ASSERT_EQ(cfg.radii.size(), 16u);
  EXPECT_DOUBLE_EQ(cfg.radii.front(), 0.001);
  EXPECT_DOUBLE_EQ(cfg.radii.back(), 0.07);
  EXPECT_DOUBLE_EQ(cfg.step_size, 1.0);
  EXPECT_EQ(cfg.steps, 1);
  cfg.seed = 11;
  std::vector<double> a = adversarial_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  ASSERT_EQ(a.size(), 32u);
  std::vector<double> b = adversarial_features(f.mt, u.utterance_id, u.frames, u.target, cfg);
  EXPECT_EQ(a, b);
}

TEST(AdversarialFeaturesTest, AscendingRadiiEnforced) {
  AdvConfig cfg;
  cfg.radii = {0.01, 0.01};
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg.radii = {0.02, 0.01};
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(LossPairTest, InfiniteCtcClampedToCeiling) {
  Fixture& f = fixture();
  // An infeasible target (too many repeated tokens for the frame count)
  // drives CTC to +inf, which must clamp, not propagate.
  const Utterance& u = f.corpus.utterances[7];
  TokenSeq impossible;
  for (std::size_t i = 0; i < u.frames.rows; ++i) {
    impossible.push_back(1);
    impossible.push_back(1);
  }
  LossPair lp = loss_pair(f.mt, u.frames, impossible);
  EXPECT_EQ(lp.ctc, kLossCeiling);
  EXPECT_LT(lp.attention_kl, kLossCeiling);
}

}  // namespace
}  // namespace miaudit
