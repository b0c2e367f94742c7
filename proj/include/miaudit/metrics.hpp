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
// Evaluation of membership scores: accuracy at a threshold, the ROC curve
// with trapezoidal AUC (equal to the Mann-Whitney statistic with ties
// counted half), and TPR at fixed low FPR targets. TPR@FPR is a step
// function over achievable thresholds, never interpolated, so a reported
// TPR is always attained at an empirical FPR at or below the target.

#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "miaudit/common.hpp"

namespace miaudit {

struct ScoredSet {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 or 1

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  }
  std::size_t negatives() const { return labels.size() - positives(); }

  void validate() const {
    if (scores.size() != labels.size())
      throw std::invalid_argument("ScoredSet: " + std::to_string(scores.size()) + " scores vs " +
                                  std::to_string(labels.size()) + " labels");
    if (scores.empty()) throw std::invalid_argument("ScoredSet: empty");
    for (int l : labels)
      if (l != 0 && l != 1) throw std::invalid_argument("ScoredSet: labels must be 0/1");
  }

  void require_both_classes() const {
    validate();
    std::size_t p = positives();
    if (p == 0 || p == labels.size())
      throw std::invalid_argument("ScoredSet: need both classes present");
  }
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
  double threshold = 0.0;
};

struct MetricsReport {
  double accuracy = 0.0;  // at threshold 0.5
  double auc = 0.0;
  std::map<double, double> tpr_at_fpr;
  std::vector<RocPoint> roc;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::string feature_set;
  std::string level;  // "sample" or "speaker"
};

// Fraction of labels matched by thresholding: score >= threshold -> 1.
inline double accuracy(const ScoredSet& s, double threshold = 0.5) {
  s.validate();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < s.scores.size(); ++i) {
    int pred = s.scores[i] >= threshold ? 1 : 0;
    if (pred == s.labels[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(s.scores.size());
}

// ROC over descending unique score thresholds plus the point at (0,0)
// with threshold +inf. AUC by trapezoidal integration.
inline std::pair<std::vector<RocPoint>, double> roc_auc(const ScoredSet& s) {
  s.require_both_classes();
  const double np = static_cast<double>(s.positives());
  const double nn = static_cast<double>(s.negatives());

  std::vector<std::size_t> order(s.scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return s.scores[a] > s.scores[b];
  });

  std::vector<RocPoint> roc;
  roc.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
  double tp = 0.0, fp = 0.0, auc = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    double thr = s.scores[order[i]];
    // Consume the whole tie group at this threshold.
    while (i < order.size() && s.scores[order[i]] == thr) {
      if (s.labels[order[i]] == 1) tp += 1.0; else fp += 1.0;
      ++i;
    }
    RocPoint pt{fp / nn, tp / np, thr};
    const RocPoint& prev = roc.back();
    auc += (pt.fpr - prev.fpr) * (pt.tpr + prev.tpr) / 2.0;
    roc.push_back(pt);
  }
  return {std::move(roc), auc};
}

// Maximum TPR over thresholds whose empirical FPR is at or below the
// target. 0 if only the accept-nothing threshold qualifies.
inline double tpr_at_fpr(const ScoredSet& s, double fpr_target) {
  if (!(fpr_target > 0.0 && fpr_target < 1.0))
    throw ConfigError("tpr_at_fpr: target must be in (0,1), got " + std::to_string(fpr_target));
  auto [roc, auc] = roc_auc(s);
  (void)auc;
  double best = 0.0;
  for (const RocPoint& p : roc)
    if (p.fpr <= fpr_target) best = std::max(best, p.tpr);
  return best;
}

inline MetricsReport compute_metrics(const ScoredSet& s, const std::vector<double>& fpr_targets,
                                     std::string feature_set, std::string level) {
  MetricsReport r;
  r.accuracy = accuracy(s);
  auto [roc, auc] = roc_auc(s);
  r.roc = std::move(roc);
  r.auc = auc;
  for (double t : fpr_targets) r.tpr_at_fpr[t] = tpr_at_fpr(s, t);
  r.n_pos = s.positives();
  r.n_neg = s.negatives();
  r.feature_set = std::move(feature_set);
  r.level = std::move(level);
  return r;
}

}  // namespace miaudit
