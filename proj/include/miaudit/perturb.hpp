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
// Perturbation-based membership features. The input signal is the frame
// matrix viewed as a flat vector with the usual L2/Linf geometry.
//
//   Gaussian: draw standard-normal noise, scale it to a requested
//   signal-to-noise ratio, and record the mean and standard deviation of
//   the loss pair over several runs per SNR.
//
//   Adversarial: projected gradient ascent on the combined training loss
//   inside an Linf ball; record the loss pair at the perturbed input, one
//   radius at a time.
//
// Noise seeds derive from (master seed, utterance id, index, run), so
// feature blocks are bitwise reproducible regardless of iteration or
// thread order.

#pragma once

#include <string>
#include <vector>

#include "miaudit/model.hpp"

namespace miaudit {

// Losses beyond this ceiling (including +inf from zero-probability
// targets) are clamped before entering feature vectors; forests need
// finite inputs. Far above any loss observed on finite desk-scale data.
inline constexpr double kLossCeiling = 1e4;

struct LossPair {
  double attention_kl = 0.0;
  double ctc = 0.0;
};

struct GaussianConfig {
  std::vector<double> snrs_db;  // ascending
  int runs_per_snr = 4;
  std::uint64_t seed = 0;

  static GaussianConfig defaults() {
    GaussianConfig c;
    for (int i = 0; i < 8; ++i) c.snrs_db.push_back(50.0 * static_cast<double>(i) / 7.0);
    return c;
  }

  void validate() const {
    if (snrs_db.empty()) throw ConfigError("GaussianConfig: snrs_db must be nonempty");
    if (runs_per_snr < 1) throw ConfigError("GaussianConfig: runs_per_snr must be >= 1");
  }
};

struct AdvConfig {
  std::vector<double> radii;  // strictly increasing
  double step_size = 1.0;     // eta
  int steps = 1;              // N
  std::uint64_t seed = 0;

  static AdvConfig defaults() {
    AdvConfig c;
    for (int i = 1; i <= 9; ++i) c.radii.push_back(0.001 * static_cast<double>(i));
    for (int i = 1; i <= 7; ++i) c.radii.push_back(0.01 * static_cast<double>(i));
    return c;
  }

  void validate() const {
    if (radii.empty()) throw ConfigError("AdvConfig: radii must be nonempty");
    for (std::size_t i = 1; i < radii.size(); ++i)
      if (radii[i] <= radii[i - 1]) throw ConfigError("AdvConfig: radii must be strictly increasing");
    if (radii.front() < 0.0) throw ConfigError("AdvConfig: radii must be non-negative");
    if (step_size <= 0.0) throw ConfigError("AdvConfig: step_size must be positive");
    if (steps < 1) throw ConfigError("AdvConfig: steps must be >= 1");
  }
};

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }

// delta_snr = sqrt(|x|^2 / (snr * |delta|^2)) * delta, so the scaled noise
// energy is exactly |x|^2 / snr.
inline std::vector<double> scale_noise_to_snr(const std::vector<double>& x,
                                              const std::vector<double>& delta,
                                              double snr_linear) {
  if (x.size() != delta.size())
    throw std::invalid_argument("scale_noise_to_snr: size mismatch " + std::to_string(x.size()) +
                                " vs " + std::to_string(delta.size()));
  if (snr_linear <= 0.0) throw ConfigError("scale_noise_to_snr: snr must be positive");
  double ex = 0.0, ed = 0.0;
  for (double v : x) ex += v * v;
  for (double v : delta) ed += v * v;
  if (ex == 0.0) throw NumericalError("scale_noise_to_snr: zero-energy signal");
  if (ed == 0.0) throw NumericalError("scale_noise_to_snr: zero-energy noise");
  double factor = std::sqrt(ex / (snr_linear * ed));
  std::vector<double> out(delta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * delta[i];
  return out;
}

// The feature extractor F: forward the frames, round both heads'
// log-probabilities to binary32 (the export precision of the logits file
// format), and evaluate the clean losses on those rounded values. Computed
// without gradient tracking.
inline LossPair loss_pair(const ModelTensors& mt, const Matrix& frames, const TokenSeq& target) {
  ForwardOut out = forward(mt, constant({frames.rows, frames.cols}, frames.v), &target);
  std::vector<double> ctc_lp = out.ctc_logprobs.data();
  for (double& v : ctc_lp) v = to_f32(v);
  std::vector<double> dec_lp = out.dec_logprobs->data();
  for (double& v : dec_lp) v = to_f32(v);

  double att = attention_kl_loss(constant(out.dec_logprobs->shape, dec_lp), target,
                                 mt.config.label_smoothing)
                   .scalar();
  double ctc = ctc_loss(constant(out.ctc_logprobs.shape, ctc_lp), target).loss.scalar();
  if (std::isnan(att) || std::isnan(ctc))
    throw NumericalError("loss_pair: NaN loss");
  return LossPair{std::min(att, kLossCeiling), std::min(ctc, kLossCeiling)};
}

// Loss pair from already-available log-probability matrices (grey-box
// path; the matrices come from a logits file rather than a model).
inline LossPair loss_pair_from_logprobs(const Matrix& ctc_logprobs, const Matrix& dec_logprobs,
                                        const TokenSeq& target, double label_smoothing) {
  double att = attention_kl_loss(constant({dec_logprobs.rows, dec_logprobs.cols}, dec_logprobs.v),
                                 target, label_smoothing)
                   .scalar();
  double ctc = ctc_loss(constant({ctc_logprobs.rows, ctc_logprobs.cols}, ctc_logprobs.v), target)
                   .loss.scalar();
  if (std::isnan(att) || std::isnan(ctc)) throw NumericalError("loss_pair: NaN loss");
  return LossPair{std::min(att, kLossCeiling), std::min(ctc, kLossCeiling)};
}

// Layout: per SNR (ascending) [mean_att, mean_ctc, std_att, std_ctc];
// 4 * |snrs| values (32 under defaults). Stddev is the population form,
// exactly zero for a single run.
inline std::vector<double> gaussian_features(const ModelTensors& mt, const std::string& utterance_id,
                                             const Matrix& frames, const TokenSeq& target,
                                             const GaussianConfig& cfg) {
  cfg.validate();
  std::vector<double> feats;
  feats.reserve(4 * cfg.snrs_db.size());
  const std::uint64_t id_hash = fnv1a64(utterance_id);
  for (std::size_t si = 0; si < cfg.snrs_db.size(); ++si) {
    double snr_linear = db_to_linear(cfg.snrs_db[si]);
    std::vector<double> atts, ctcs;
    for (int run = 0; run < cfg.runs_per_snr; ++run) {
      Rng rng(seed_mix(cfg.seed, {fnv1a64("gaussian"), id_hash, si, static_cast<std::uint64_t>(run)}));
      std::vector<double> noise(frames.v.size());
      for (double& v : noise) v = rng.normal();
      std::vector<double> scaled = scale_noise_to_snr(frames.v, noise, snr_linear);
      Matrix perturbed = frames;
      for (std::size_t i = 0; i < perturbed.v.size(); ++i) perturbed.v[i] += scaled[i];
      LossPair lp = loss_pair(mt, perturbed, target);
      atts.push_back(lp.attention_kl);
      ctcs.push_back(lp.ctc);
    }
    auto mean_of = [](const std::vector<double>& xs) {
      double s = 0.0;
      for (double x : xs) s += x;
      return s / static_cast<double>(xs.size());
    };
    auto stddev_of = [&](const std::vector<double>& xs, double m) {
      if (xs.size() == 1) return 0.0;
      double s = 0.0;
      for (double x : xs) s += (x - m) * (x - m);
      return std::sqrt(s / static_cast<double>(xs.size()));
    };
    double ma = mean_of(atts), mc = mean_of(ctcs);
    feats.push_back(ma);
    feats.push_back(mc);
    feats.push_back(stddev_of(atts, ma));
    feats.push_back(stddev_of(ctcs, mc));
  }
  return feats;
}

// Projected gradient ascent in the Linf ball of radius epsilon: start from
// a uniform draw in the ball, step by eta * sign(d loss / d delta), clip
// back to the ball. Returns delta with max|delta_i| <= epsilon exactly.
// A zero gradient leaves the initial draw in place.
inline Matrix pgd_perturb(const ModelTensors& mt, const std::string& utterance_id,
                          const Matrix& frames, const TokenSeq& target, double epsilon, double eta,
                          int steps, std::uint64_t seed, std::size_t radius_index = 0) {
  if (epsilon < 0.0) throw ConfigError("pgd_perturb: epsilon must be >= 0");
  Matrix delta(frames.rows, frames.cols);
  if (epsilon == 0.0) return delta;

  Rng rng(seed_mix(seed, {fnv1a64("adversarial"), fnv1a64(utterance_id), radius_index}));
  for (double& v : delta.v) v = rng.uniform(-epsilon, epsilon);

  for (int n = 0; n < steps; ++n) {
    Tape tape;
    std::vector<double> perturbed(frames.v.size());
    for (std::size_t i = 0; i < perturbed.size(); ++i) perturbed[i] = frames.v[i] + delta.v[i];
    Tensor x = leaf(tape, {frames.rows, frames.cols}, std::move(perturbed));
    Tensor loss = utterance_loss(mt, x, target);
    Gradients grads = backward(loss);
    const std::vector<double>& g = grads.wrt(x);
    for (std::size_t i = 0; i < delta.v.size(); ++i) {
      double sign = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      delta.v[i] = std::clamp(delta.v[i] + eta * sign, -epsilon, epsilon);
    }
  }
  return delta;
}

// Layout: per radius (ascending) [att, ctc]; 2 * |radii| values (32 under
// defaults).
inline std::vector<double> adversarial_features(const ModelTensors& mt,
                                                const std::string& utterance_id,
                                                const Matrix& frames, const TokenSeq& target,
                                                const AdvConfig& cfg) {
  cfg.validate();
  std::vector<double> feats;
  feats.reserve(2 * cfg.radii.size());
  for (std::size_t ri = 0; ri < cfg.radii.size(); ++ri) {
    Matrix delta = pgd_perturb(mt, utterance_id, frames, target, cfg.radii[ri], cfg.step_size,
                               cfg.steps, cfg.seed, ri);
    Matrix perturbed = frames;
    for (std::size_t i = 0; i < perturbed.v.size(); ++i) perturbed.v[i] += delta.v[i];
    LossPair lp = loss_pair(mt, perturbed, target);
    feats.push_back(lp.attention_kl);
    feats.push_back(lp.ctc);
  }
  return feats;
}

}  // namespace miaudit
