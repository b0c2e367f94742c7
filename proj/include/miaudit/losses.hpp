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
// Sequence losses: CTC via the log-domain forward recursion over the
// blank-extended label sequence, and the attention loss as per-position KL
// divergence between a label-smoothed target distribution and the decoder's
// predictions. Both are built from tape ops, so one gradient mechanism
// (checked against finite differences) serves training and input-gradient
// attacks alike. A path-enumeration CTC oracle lives here too; it is the
// independent witness the forward recursion is tested against.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "miaudit/tensor.hpp"

namespace miaudit {

inline constexpr int kBlankId = 0;

// Frames needed for a CTC alignment: one per label plus one separating
// blank between adjacent repeats.
inline std::size_t ctc_min_frames(const TokenSeq& target) {
  std::size_t repeats = 0;
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++repeats;
  return target.size() + repeats;
}

struct CtcLoss {
  Tensor loss;            // -log P(target | logprobs); +inf when infeasible
  bool infeasible = false;
};

// Log-domain CTC forward algorithm. `logprobs` is [T x V] with rows that
// are normalized log distributions and blank at column 0. Differentiable
// through the tape when `logprobs` is tracked. An infeasible target (more
// required frames than T) yields +inf with the flag set instead of an
// exception.
inline CtcLoss ctc_loss(const Tensor& logprobs, const TokenSeq& target) {
  if (logprobs.shape.size() != 2)
    throw std::invalid_argument("ctc_loss: logprobs must be [T x V], got " + shape_str(logprobs.shape));
  const std::size_t tt = logprobs.shape[0];
  const std::size_t vv = logprobs.shape[1];
  for (int tok : target)
    if (tok <= kBlankId || static_cast<std::size_t>(tok) >= vv)
      throw std::invalid_argument("ctc_loss: target token " + std::to_string(tok) +
                                  " outside [1, " + std::to_string(vv - 1) + "]");
  if (tt < ctc_min_frames(target))
    return CtcLoss{scalar_constant(std::numeric_limits<double>::infinity()), true};

  // Blank-extended labels: blank, l1, blank, l2, ..., blank.
  const std::size_t s = 2 * target.size() + 1;
  std::vector<std::size_t> ext(s, kBlankId);
  for (std::size_t i = 0; i < target.size(); ++i) ext[2 * i + 1] = static_cast<std::size_t>(target[i]);

  // Skip transitions s-2 -> s are allowed only onto a non-blank label that
  // differs from the label two back.
  std::vector<double> skip_mask(s, kNegInf);
  for (std::size_t i = 2; i < s; ++i)
    if (ext[i] != kBlankId && ext[i] != ext[i - 2]) skip_mask[i] = 0.0;
  Tensor skip = constant({s}, skip_mask);

  std::vector<double> init_mask(s, kNegInf);
  init_mask[0] = 0.0;
  if (s > 1) init_mask[1] = 0.0;
  Tensor init = constant({s}, init_mask);

  Tensor alpha = add(gather(slice_row(logprobs, 0), ext), init);
  for (std::size_t t = 1; t < tt; ++t) {
    Tensor stay = logaddexp(alpha, shift_right(alpha, 1));
    Tensor with_skip = logaddexp(stay, add(shift_right(alpha, 2), skip));
    alpha = add(with_skip, gather(slice_row(logprobs, t), ext));
  }

  Tensor final_mass =
      s > 1 ? logaddexp(gather(alpha, {s - 1}), gather(alpha, {s - 2})) : gather(alpha, {s - 1});
  return CtcLoss{neg(reshape(final_mass, {})), false};
}

// Enumerates all V^T frame-label paths and sums the probability of those
// whose collapse (dedupe consecutive, strip blanks) equals the target.
// Accumulates in extended precision. Test oracle only; bounds enforced.
inline double ctc_brute_force(const Matrix& logprobs, const TokenSeq& target) {
  const std::size_t tt = logprobs.rows;
  const std::size_t vv = logprobs.cols;
  if (tt > 8 || vv > 4)
    throw std::invalid_argument("ctc_brute_force: enumeration bound exceeded (T <= 8, V <= 4)");
  std::size_t n_paths = 1;
  for (std::size_t t = 0; t < tt; ++t) n_paths *= vv;

  long double total = 0.0L;
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
    long double lp = 0.0L;
    for (std::size_t t = 0; t < tt; ++t) lp += logprobs.at(t, static_cast<std::size_t>(path[t]));
    total += expl(lp);
  }
  if (total <= 0.0L) return std::numeric_limits<double>::infinity();
  return static_cast<double>(-logl(total));
}

// Label-smoothed target distribution over V' classes: mass 1-s on the
// target class, s spread evenly over the others.
inline std::vector<double> smoothed_onehot(std::size_t num_classes, std::size_t hot, double smoothing) {
  std::vector<double> q(num_classes, smoothing / static_cast<double>(num_classes - 1));
  q[hot] = 1.0 - smoothing;
  return q;
}

// Per-position KL(q_u || p_u) averaged over positions, where q_u is the
// smoothed one-hot of the target token (end symbol at the final position)
// and p_u = exp(dec_logprobs[u]). Decoder rows cover V' = V + 2 symbols
// with start = V' - 2 and end = V' - 1. With smoothing 0 this reduces to
// mean negative log-likelihood. Differentiable through dec_logprobs.
inline Tensor attention_kl_loss(const Tensor& dec_logprobs, const TokenSeq& target,
                                double smoothing) {
  if (dec_logprobs.shape.size() != 2)
    throw std::invalid_argument("attention_kl_loss: need [U x V'], got " + shape_str(dec_logprobs.shape));
  const std::size_t u_len = dec_logprobs.shape[0];
  const std::size_t vp = dec_logprobs.shape[1];
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw std::invalid_argument("attention_kl_loss: smoothing must be in [0,1)");
  if (u_len != target.size() + 1)
    throw std::invalid_argument("attention_kl_loss: U=" + std::to_string(u_len) +
                                " != |target|+1=" + std::to_string(target.size() + 1));
  const std::size_t end_id = vp - 1;

  // KL(q||p) = -sum q log p - H(q); the entropy term is constant.
  double entropy = 0.0;
  if (smoothing > 0.0) {
    double off = smoothing / static_cast<double>(vp - 1);
    entropy = -(1.0 - smoothing) * std::log(1.0 - smoothing) -
              smoothing * std::log(off);
  }

  Tensor acc = scalar_constant(0.0);
  for (std::size_t u = 0; u < u_len; ++u) {
    std::size_t hot = u < target.size() ? static_cast<std::size_t>(target[u]) : end_id;
    if (hot >= vp)
      throw std::invalid_argument("attention_kl_loss: token " + std::to_string(hot) +
                                  " outside decoder vocabulary " + std::to_string(vp));
    Tensor q = constant({vp}, smoothed_onehot(vp, hot, smoothing));
    acc = add(acc, neg(dot(q, slice_row(dec_logprobs, u))));
  }
  return add_const(scale(acc, 1.0 / static_cast<double>(u_len)), -entropy);
}

// att_weight * att + (1 - att_weight) * ctc.
inline Tensor combined_loss(const Tensor& att, const Tensor& ctc, double att_weight) {
  if (att_weight < 0.0 || att_weight > 1.0)
    throw std::invalid_argument("combined_loss: att_weight must be in [0,1]");
  return add(scale(att, att_weight), scale(ctc, 1.0 - att_weight));
}

}  // namespace miaudit
