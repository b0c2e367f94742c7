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
//
// Random forest membership classifier: bagged CART trees with Gini splits,
// sqrt-of-features subsampling at each split, and midpoint thresholds. The
// score of an input is the mean over trees of the reached leaf's class-1
// fraction; predictions threshold that score at 0.5 (boundary maps to 1).
//
// Determinism: examples are sorted by utterance id before any sampling and
// each tree draws from its own (seed, tree_index) stream, so permuting the
// training set changes nothing and identical (data, seed) reproduce the
// forest byte for byte.

#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "miaudit/common.hpp"

namespace miaudit {

struct MIExample {
  std::vector<double> features;
  int label = 0;  // member = 1, nonmember = 0
  std::string speaker_id;
  std::string utterance_id;
  std::string feature_set;
};

struct TreeNode {
  int feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  int left = -1;
  int right = -1;
  double leaf_fraction = 0.0;  // class-1 fraction of training samples
};

struct Forest {
  std::vector<std::vector<TreeNode>> trees;
  std::uint64_t seed = 0;
  std::size_t n_features = 0;
  std::string feature_set;
};

inline constexpr int kForestMaxDepth = 20;
inline constexpr int kForestDefaultTrees = 100;

namespace detail {

struct SplitChoice {
  bool found = false;
  std::size_t feature = 0;
  double threshold = 0.0;
  double gain = 0.0;
};

inline double gini(std::size_t pos, std::size_t total) {
  if (total == 0) return 0.0;
  double p = static_cast<double>(pos) / static_cast<double>(total);
  return 2.0 * p * (1.0 - p);
}

// Best Gini split over the sampled candidate features. Thresholds are
// midpoints between consecutive distinct sorted values; first candidate
// wins ties (strict improvement required).
inline SplitChoice best_split(const std::vector<const MIExample*>& xs,
                              const std::vector<std::size_t>& rows,
                              const std::vector<std::size_t>& features) {
  SplitChoice best;
  const std::size_t n = rows.size();
  std::size_t pos_total = 0;
  for (std::size_t r : rows) pos_total += static_cast<std::size_t>(xs[r]->label);
  const double impurity = gini(pos_total, n);

  std::vector<std::pair<double, int>> vals(n);
  for (std::size_t f : features) {
    for (std::size_t i = 0; i < n; ++i)
      vals[i] = {xs[rows[i]]->features[f], xs[rows[i]]->label};
    std::sort(vals.begin(), vals.end());
    std::size_t left_n = 0, left_pos = 0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      ++left_n;
      left_pos += static_cast<std::size_t>(vals[i].second);
      if (vals[i].first == vals[i + 1].first) continue;
      double w_left = static_cast<double>(left_n) / static_cast<double>(n);
      double child =
          w_left * gini(left_pos, left_n) +
          (1.0 - w_left) * gini(pos_total - left_pos, n - left_n);
      double gain = impurity - child;
      if (gain > best.gain + 1e-15) {
        best.found = true;
        best.feature = f;
        best.threshold = (vals[i].first + vals[i + 1].first) / 2.0;
        best.gain = gain;
      }
    }
  }
  return best;
}

inline int grow_tree(std::vector<TreeNode>& nodes, const std::vector<const MIExample*>& xs,
                     std::vector<std::size_t> rows, int depth, std::size_t n_features,
                     std::size_t n_candidates, Rng& rng) {
  std::size_t pos = 0;
  for (std::size_t r : rows) pos += static_cast<std::size_t>(xs[r]->label);

  auto make_leaf = [&]() {
    TreeNode leaf;
    leaf.leaf_fraction = static_cast<double>(pos) / static_cast<double>(rows.size());
    nodes.push_back(leaf);
    return static_cast<int>(nodes.size()) - 1;
  };

  if (rows.size() < 2 || pos == 0 || pos == rows.size() || depth >= kForestMaxDepth)
    return make_leaf();

  // Partial Fisher-Yates draw of candidate features without replacement.
  std::vector<std::size_t> all(n_features);
  for (std::size_t i = 0; i < n_features; ++i) all[i] = i;
  for (std::size_t i = 0; i < n_candidates; ++i) {
    std::size_t j = i + static_cast<std::size_t>(rng.below(n_features - i));
    std::swap(all[i], all[j]);
  }
  all.resize(n_candidates);

  SplitChoice split = best_split(xs, rows, all);
  if (!split.found) return make_leaf();

  std::vector<std::size_t> lrows, rrows;
  for (std::size_t r : rows)
    (xs[r]->features[split.feature] <= split.threshold ? lrows : rrows).push_back(r);

  TreeNode node;
  node.feature = static_cast<int>(split.feature);
  node.threshold = split.threshold;
  nodes.push_back(node);
  int id = static_cast<int>(nodes.size()) - 1;
  nodes[static_cast<std::size_t>(id)].left =
      grow_tree(nodes, xs, std::move(lrows), depth + 1, n_features, n_candidates, rng);
  nodes[static_cast<std::size_t>(id)].right =
      grow_tree(nodes, xs, std::move(rrows), depth + 1, n_features, n_candidates, rng);
  return id;
}

}  // namespace detail

inline Forest rf_train(const std::vector<MIExample>& train, int n_trees = kForestDefaultTrees,
                       std::uint64_t seed = 0) {
  if (train.size() < 2) throw ConfigError("rf_train: need at least 2 examples");
  std::size_t pos = 0;
  for (const MIExample& e : train) pos += static_cast<std::size_t>(e.label);
  if (pos == 0 || pos == train.size())
    throw ConfigError("rf_train: training set contains a single class");
  const std::size_t nf = train[0].features.size();
  for (const MIExample& e : train)
    if (e.features.size() != nf)
      throw DataError("rf_train: inconsistent feature lengths " + std::to_string(nf) + " vs " +
                      std::to_string(e.features.size()));

  std::vector<const MIExample*> xs(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) xs[i] = &train[i];
  std::sort(xs.begin(), xs.end(), [](const MIExample* a, const MIExample* b) {
    return a->utterance_id < b->utterance_id;
  });

  const std::size_t n_candidates =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(nf)))));

  Forest forest;
  forest.seed = seed;
  forest.n_features = nf;
  forest.feature_set = train[0].feature_set;
  forest.trees.resize(static_cast<std::size_t>(n_trees));
  for (int t = 0; t < n_trees; ++t) {
    Rng rng(seed_mix(seed, {static_cast<std::uint64_t>(t)}));
    std::vector<std::size_t> rows(xs.size());
    for (auto& r : rows) r = static_cast<std::size_t>(rng.below(xs.size()));
    detail::grow_tree(forest.trees[static_cast<std::size_t>(t)], xs, std::move(rows), 0, nf,
                      n_candidates, rng);
  }
  return forest;
}

inline double rf_score(const Forest& forest, const std::vector<double>& features) {
  if (features.size() != forest.n_features)
    throw DataError("rf_score: feature length " + std::to_string(features.size()) +
                    " != forest n_features " + std::to_string(forest.n_features));
  double total = 0.0;
  for (const auto& tree : forest.trees) {
    // grow_tree appends the root first.
    int id = 0;
    while (tree[static_cast<std::size_t>(id)].feature >= 0) {
      const TreeNode& n = tree[static_cast<std::size_t>(id)];
      id = features[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    total += tree[static_cast<std::size_t>(id)].leaf_fraction;
  }
  return total / static_cast<double>(forest.trees.size());
}

inline int rf_predict(const Forest& forest, const std::vector<double>& features,
                      double threshold = 0.5) {
  return rf_score(forest, features) >= threshold ? 1 : 0;
}

// ---------------------------------------------------------------------------
// Serialization: canonical JSON (sorted keys, compact), length-prefixed
// with a u32 LE byte count when written standalone.
// ---------------------------------------------------------------------------

inline nlohmann::json forest_to_json(const Forest& f) {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& tree : f.trees) {
    nlohmann::json nodes = nlohmann::json::array();
    for (const TreeNode& n : tree) {
      if (n.feature < 0) {
        nodes.push_back({{"p", n.leaf_fraction}});
      } else {
        nodes.push_back({{"f", n.feature}, {"t", n.threshold}, {"l", n.left}, {"r", n.right}});
      }
    }
    trees.push_back(std::move(nodes));
  }
  return nlohmann::json{{"meta",
                         {{"version", 1},
                          {"seed", f.seed},
                          {"n_features", f.n_features},
                          {"n_trees", f.trees.size()},
                          {"feature_set", f.feature_set}}},
                        {"trees", std::move(trees)}};
}

inline Forest forest_from_json(const nlohmann::json& j) {
  Forest f;
  const auto& meta = j.at("meta");
  f.seed = meta.at("seed").get<std::uint64_t>();
  f.n_features = meta.at("n_features").get<std::size_t>();
  f.feature_set = meta.at("feature_set").get<std::string>();
  for (const auto& jt : j.at("trees")) {
    std::vector<TreeNode> tree;
    for (const auto& jn : jt) {
      TreeNode n;
      if (jn.contains("p")) {
        n.leaf_fraction = jn.at("p").get<double>();
      } else {
        n.feature = jn.at("f").get<int>();
        n.threshold = jn.at("t").get<double>();
        n.left = jn.at("l").get<int>();
        n.right = jn.at("r").get<int>();
        if (n.feature < 0 || static_cast<std::size_t>(n.feature) >= f.n_features)
          throw DataError("forest_from_json: node feature index out of range");
      }
      tree.push_back(n);
    }
    f.trees.push_back(std::move(tree));
  }
  return f;
}

inline std::string forest_serialize(const Forest& f) {
  std::string payload = forest_to_json(f).dump();
  std::uint32_t len = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.push_back(static_cast<char>(len & 0xff));
  out.push_back(static_cast<char>((len >> 8) & 0xff));
  out.push_back(static_cast<char>((len >> 16) & 0xff));
  out.push_back(static_cast<char>((len >> 24) & 0xff));
  return out + payload;
}

inline Forest forest_deserialize(const std::string& bytes) {
  if (bytes.size() < 4) throw DataError("forest: truncated length prefix");
  std::uint32_t len = 0;
  for (int i = 3; i >= 0; --i) len = (len << 8) | static_cast<unsigned char>(bytes[static_cast<std::size_t>(i)]);
  if (bytes.size() != 4 + static_cast<std::size_t>(len))
    throw DataError("forest: length prefix " + std::to_string(len) + " != payload size " +
                    std::to_string(bytes.size() - 4));
  nlohmann::json j = nlohmann::json::parse(bytes.substr(4), nullptr, false);
  if (j.is_discarded()) throw DataError("forest: invalid JSON payload");
  return forest_from_json(j);
}

inline void forest_save(const Forest& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("forest_save: cannot open " + path);
  std::string bytes = forest_serialize(f);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Forest forest_load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("forest_load: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return forest_deserialize(bytes);
}

}  // namespace miaudit
