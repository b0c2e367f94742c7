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

#include "miaudit/forest.hpp"

#include "gtest/gtest.h"

namespace miaudit {
namespace {

std::vector<MIExample> separable_1d(std::size_t n, Rng& rng) {
  std::vector<MIExample> xs;
  for (std::size_t i = 0; i < n; ++i) {
    MIExample e;
    double x = rng.uniform(0.1, 2.0) * (i % 2 == 0 ? 1.0 : -1.0);
    e.features = {x};
    e.label = x > 0 ? 1 : 0;
    e.utterance_id = "u" + std::to_string(1000 + i);
    e.speaker_id = "s0";
    e.feature_set = "losses";
    xs.push_back(std::move(e));
  }
  return xs;
}

TEST(RfTrainTest, SeparableDataReachesPerfectTrainingAccuracy) {
  Rng rng(0);
  std::vector<MIExample> xs = separable_1d(100, rng);
  Forest f = rf_train(xs, 100, 0);
  for (const MIExample& e : xs) EXPECT_EQ(rf_predict(f, e.features), e.label);
}

TEST(RfTrainTest, SingleClassRejected) {
  std::vector<MIExample> xs(4);
  for (std::size_t i = 0; i < xs.size(); ++i) {
    xs[i].features = {static_cast<double>(i)};
    xs[i].label = 1;
    xs[i].utterance_id = "u" + std::to_string(i);
  }
  EXPECT_THROW(rf_train(xs, 10, 0), ConfigError);
}

TEST(RfTrainTest, SameDataAndSeedGiveByteIdenticalForests) {
  Rng rng(42);
  std::vector<MIExample> xs = separable_1d(60, rng);
  Forest a = rf_train(xs, 25, 7);
  Forest b = rf_train(xs, 25, 7);
  EXPECT_EQ(forest_serialize(a), forest_serialize(b));
}

TEST(RfTrainTest, TrainingOrderDoesNotMatter) {
  Rng rng(43);
  std::vector<MIExample> xs = separable_1d(60, rng);
  Forest a = rf_train(xs, 25, 7);
  std::vector<MIExample> shuffled = xs;
  Rng shuffler(99);
  shuffler.shuffle(shuffled);
  Forest b = rf_train(shuffled, 25, 7);
  EXPECT_EQ(forest_serialize(a), forest_serialize(b));
}

TEST(RfScoreTest, HandBuiltForests) {
  Forest f;
  f.n_features = 1;
  f.trees.push_back({TreeNode{-1, 0, -1, -1, 0.75}});
  EXPECT_DOUBLE_EQ(rf_score(f, {0.3}), 0.75);
  f.trees.push_back({TreeNode{-1, 0, -1, -1, 0.2}});
  f.trees[0][0].leaf_fraction = 0.6;
  EXPECT_DOUBLE_EQ(rf_score(f, {0.3}), 0.4);  // mean of 0.6 and 0.2
}

TEST(RfScoreTest, AllPureTreesGiveOne) {
  Forest f;
  f.n_features = 2;
  for (int i = 0; i < 10; ++i) f.trees.push_back({TreeNode{-1, 0, -1, -1, 1.0}});
  EXPECT_DOUBLE_EQ(rf_score(f, {1.0, 2.0}), 1.0);
}

TEST(RfScoreTest, FeatureLengthMismatchRejected) {
  Forest f;
  f.n_features = 2;
  f.trees.push_back({TreeNode{-1, 0, -1, -1, 0.5}});
  EXPECT_THROW(rf_score(f, {1.0}), DataError);
}

TEST(RfPredictTest, BoundaryScoreMapsToOne) {
  Forest f;
  f.n_features = 1;
  f.trees.push_back({TreeNode{-1, 0, -1, -1, 0.5}});
  EXPECT_EQ(rf_predict(f, {0.0}), 1);
  f.trees[0][0].leaf_fraction = 0.49;
  EXPECT_EQ(rf_predict(f, {0.0}), 0);
}

TEST(RfScoreTest, ScoresStayInUnitInterval) {
  Rng rng(77);
  std::vector<MIExample> xs;
  for (std::size_t i = 0; i < 80; ++i) {
    MIExample e;
    e.features = {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    e.label = static_cast<int>(rng.below(2));
    e.utterance_id = "u" + std::to_string(100 + i);
    xs.push_back(std::move(e));
  }
  xs[0].label = 0;
  xs[1].label = 1;
  Forest f = rf_train(xs, 30, 3);
  for (int trial = 0; trial < 50; ++trial) {
    double s = rf_score(f, {rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2)});
    EXPECT_GE(s, 0.0);
    EXPECT_LE(s, 1.0);
  }
}

// Affine-transforming one feature column (train and probe alike) on
// tie-free data leaves every prediction unchanged.
TEST(RfInvarianceTest, MonotoneFeatureTransformPreservesPredictions) {
  Rng rng(555);
  std::vector<MIExample> xs;
  for (std::size_t i = 0; i < 70; ++i) {
    MIExample e;
    e.features = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
    e.label = e.features[0] + 0.3 * e.features[1] > 0 ? 1 : 0;
    e.utterance_id = "u" + std::to_string(i + 10);
    xs.push_back(std::move(e));
  }
  xs[0].label = 0;
  xs[1].label = 1;
  std::vector<MIExample> ys = xs;
  for (MIExample& e : ys) e.features[1] = 2.0 * e.features[1] + 1.0;

  Forest fa = rf_train(xs, 40, 3);
  Forest fb = rf_train(ys, 40, 3);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> p = {rng.uniform(-3, 3), rng.uniform(-3, 3)};
    std::vector<double> pt = {p[0], 2.0 * p[1] + 1.0};
    EXPECT_EQ(rf_predict(fa, p), rf_predict(fb, pt));
  }
}

TEST(ForestIoTest, SerializationRoundTrip) {
  Rng rng(31);
  std::vector<MIExample> xs = separable_1d(40, rng);
  Forest f = rf_train(xs, 15, 3);
  Forest g = forest_deserialize(forest_serialize(f));
  EXPECT_EQ(forest_serialize(f), forest_serialize(g));
  for (const MIExample& e : xs)
    EXPECT_DOUBLE_EQ(rf_score(f, e.features), rf_score(g, e.features));
}

TEST(ForestIoTest, CorruptLengthPrefixRejected) {
  Rng rng(32);
  std::vector<MIExample> xs = separable_1d(10, rng);
  Forest f = rf_train(xs, 3, 1);
  std::string bytes = forest_serialize(f);
  bytes[0] = static_cast<char>(bytes[0] + 1);
  EXPECT_THROW(forest_deserialize(bytes), DataError);
  EXPECT_THROW(forest_deserialize("ab"), DataError);
}

}  // namespace
}  // namespace miaudit
