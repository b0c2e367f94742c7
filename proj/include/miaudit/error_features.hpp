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
// Black-box error features: edit-distance alignment between reference and
// hypothesis transcriptions, and the per-hypothesis feature block (WER,
// length-normalised edit counts, length ratio, confidence) over the top-K
// beam hypotheses. Errors are token-level: the toy vocabulary consists of
// word-like units.

#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "miaudit/common.hpp"

namespace miaudit {

struct EditCounts {
  std::size_t substitutions = 0;
  std::size_t insertions = 0;
  std::size_t deletions = 0;
  std::size_t edits() const { return substitutions + insertions + deletions; }
};

// Minimum-edit alignment with unit costs. Among cost-ties the alignment
// preferring substitutions is chosen (substitution > deletion > insertion),
// realized as a lexicographic DP on (cost, -substitutions). Given the cost
// and substitution count, the insertion/deletion split is already fixed by
// |ref| - |hyp|, so the decomposition is well defined and symmetric: swapping
// arguments preserves S and swaps I with D.
inline EditCounts levenshtein(const TokenSeq& ref, const TokenSeq& hyp) {
  const std::size_t n = ref.size(), m = hyp.size();
  // cell = (cost, -subs), minimized lexicographically
  struct Cell {
    std::size_t cost;
    int neg_subs;
    bool operator<(const Cell& o) const {
      return cost != o.cost ? cost < o.cost : neg_subs < o.neg_subs;
    }
  };
  std::vector<Cell> prev(m + 1), cur(m + 1);
  for (std::size_t j = 0; j <= m; ++j) prev[j] = {j, 0};
  for (std::size_t i = 1; i <= n; ++i) {
    cur[0] = {i, 0};
    for (std::size_t j = 1; j <= m; ++j) {
      bool match = ref[i - 1] == hyp[j - 1];
      Cell diag = {prev[j - 1].cost + (match ? 0u : 1u),
                   prev[j - 1].neg_subs - (match ? 0 : 1)};
      Cell del = {prev[j].cost + 1, prev[j].neg_subs};
      Cell ins = {cur[j - 1].cost + 1, cur[j - 1].neg_subs};
      cur[j] = std::min(diag, std::min(del, ins));
    }
    std::swap(prev, cur);
  }
  EditCounts c;
  std::size_t cost = prev[m].cost;
  std::size_t subs = static_cast<std::size_t>(-prev[m].neg_subs);
  // cost = S + I + D with D - I = |ref| - |hyp|.
  c.substitutions = subs;
  std::size_t rest = cost - subs;  // I + D
  if (n >= m) {
    c.deletions = (rest + (n - m)) / 2;
    c.insertions = rest - c.deletions;
  } else {
    c.insertions = (rest + (m - n)) / 2;
    c.deletions = rest - c.insertions;
  }
  return c;
}

// One beam hypothesis with its decoder score.
struct Hypothesis {
  TokenSeq tokens;
  double log_score = 0.0;
  double confidence = 0.0;  // exp(log_score / max(1, |tokens|+1))
};

inline constexpr std::size_t kErrorFeaturesPerHyp = 7;

// Per-hypothesis feature block, K blocks concatenated in hypothesis-rank
// order: [wer, edits_norm, subs_norm, ins_norm, del_norm, len_ratio,
// confidence]. Counts are normalized by max(1, |ref|). Missing hypotheses
// repeat the last available block so vectors stay fixed-length without
// out-of-distribution sentinels.
inline std::vector<double> error_block(const TokenSeq& ref, const std::vector<Hypothesis>& hyps,
                                       std::size_t k) {
  if (hyps.empty()) throw std::invalid_argument("error_block: no hypotheses");
  std::vector<double> out;
  out.reserve(kErrorFeaturesPerHyp * k);
  const double denom = static_cast<double>(std::max<std::size_t>(1, ref.size()));
  for (std::size_t i = 0; i < k; ++i) {
    const Hypothesis& h = hyps[std::min(i, hyps.size() - 1)];
    EditCounts c = levenshtein(ref, h.tokens);
    out.push_back(static_cast<double>(c.edits()) / denom);
    out.push_back(static_cast<double>(c.edits()) / denom);
    out.push_back(static_cast<double>(c.substitutions) / denom);
    out.push_back(static_cast<double>(c.insertions) / denom);
    out.push_back(static_cast<double>(c.deletions) / denom);
    out.push_back(static_cast<double>(h.tokens.size()) / denom);
    out.push_back(h.confidence);
  }
  return out;
}

}  // namespace miaudit
