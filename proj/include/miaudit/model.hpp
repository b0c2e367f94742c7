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
// Desk-scale encoder-decoder recognizer with a CTC head and a single-head
// dot-product attention decoder. Two encoder families with genuinely
// different inductive biases are provided: "recurrent" (tanh RNN, unbounded
// left context) and "convolutional" (kernel-3 temporal convolution, local
// context). The decoder vocabulary is V' = V + 2 with start = V' - 2 and
// end = V' - 1.
//
// The same forward code serves three callers: training (parameters are
// tape leaves), input-gradient attacks (frames are the leaf), and plain
// evaluation (all constants, nothing recorded).

#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "miaudit/error_features.hpp"
#include "miaudit/losses.hpp"
#include "miaudit/tensor.hpp"

namespace miaudit {

struct ModelConfig {
  int input_dim = 8;
  int hidden_dim = 32;
  int num_encoder_layers = 1;  // 1 or 2
  int vocab_size = 12;
  double attention_weight = 0.7;   // alpha of the hybrid loss
  double label_smoothing = 0.1;
  std::string architecture_tag = "recurrent";  // or "convolutional"
  std::uint64_t seed = 0;

  int decoder_vocab() const { return vocab_size + 2; }
  int start_id() const { return vocab_size; }
  int end_id() const { return vocab_size + 1; }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("ModelConfig: vocab_size must be >= 2");
    if (hidden_dim < 1) throw ConfigError("ModelConfig: hidden_dim must be >= 1");
    if (input_dim < 1) throw ConfigError("ModelConfig: input_dim must be >= 1");
    if (num_encoder_layers < 1 || num_encoder_layers > 2)
      throw ConfigError("ModelConfig: num_encoder_layers must be 1 or 2");
    if (architecture_tag != "recurrent" && architecture_tag != "convolutional")
      throw ConfigError("ModelConfig: unknown architecture_tag '" + architecture_tag + "'");
    if (attention_weight < 0.0 || attention_weight > 1.0)
      throw ConfigError("ModelConfig: attention_weight must be in [0,1]");
    if (label_smoothing < 0.0 || label_smoothing >= 1.0)
      throw ConfigError("ModelConfig: label_smoothing must be in [0,1)");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"input_dim", c.input_dim},
                     {"hidden_dim", c.hidden_dim},
                     {"num_encoder_layers", c.num_encoder_layers},
                     {"vocab_size", c.vocab_size},
                     {"attention_weight", c.attention_weight},
                     {"label_smoothing", c.label_smoothing},
                     {"architecture_tag", c.architecture_tag},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("input_dim").get_to(c.input_dim);
  j.at("hidden_dim").get_to(c.hidden_dim);
  j.at("num_encoder_layers").get_to(c.num_encoder_layers);
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("attention_weight").get_to(c.attention_weight);
  j.at("label_smoothing").get_to(c.label_smoothing);
  j.at("architecture_tag").get_to(c.architecture_tag);
  j.at("seed").get_to(c.seed);
}

struct ParamTensor {
  Shape shape;
  std::vector<double> values;
};

struct TrainMeta {
  int epochs = 0;
  std::vector<double> loss_history;  // mean combined loss per epoch
  double final_loss = 0.0;
  double greedy_token_accuracy = 0.0;
  std::string dataset_fingerprint;
};

inline void to_json(nlohmann::json& j, const TrainMeta& m) {
  j = nlohmann::json{{"epochs", m.epochs},
                     {"loss_history", m.loss_history},
                     {"final_loss", m.final_loss},
                     {"greedy_token_accuracy", m.greedy_token_accuracy},
                     {"dataset_fingerprint", m.dataset_fingerprint}};
}

inline void from_json(const nlohmann::json& j, TrainMeta& m) {
  j.at("epochs").get_to(m.epochs);
  j.at("loss_history").get_to(m.loss_history);
  j.at("final_loss").get_to(m.final_loss);
  j.at("greedy_token_accuracy").get_to(m.greedy_token_accuracy);
  j.at("dataset_fingerprint").get_to(m.dataset_fingerprint);
}

// M(.): config plus named parameters (sorted by name) plus training
// metadata. Immutable once trained.
struct Checkpoint {
  ModelConfig config;
  std::map<std::string, ParamTensor> params;
  TrainMeta meta;
};

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

namespace detail {

// Name -> shape for a config. Matrices are [out x in]; the trailing
// dimension is the fan-in used for the init scale. Recurrent units are
// GRU cells (reset/update/candidate gates r, z, n); the decoder's gates
// additionally take the previous attention context as input (c_*).
inline std::map<std::string, Shape> param_shapes(const ModelConfig& c) {
  const std::size_t f = static_cast<std::size_t>(c.input_dim);
  const std::size_t h = static_cast<std::size_t>(c.hidden_dim);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size);
  const std::size_t vp = static_cast<std::size_t>(c.decoder_vocab());
  std::map<std::string, Shape> shapes;
  for (int l = 0; l < c.num_encoder_layers; ++l) {
    std::string p = "enc" + std::to_string(l) + ".";
    std::size_t in = l == 0 ? f : h;
    if (c.architecture_tag == "recurrent") {
      for (const char* gate : {"r", "z", "n"}) {
        shapes[p + "w_" + gate] = {h, in};
        shapes[p + "u_" + gate] = {h, h};
        shapes[p + "b_" + gate] = {h};
      }
    } else {
      shapes[p + "w_prev"] = {h, in};
      shapes[p + "w_cur"] = {h, in};
      shapes[p + "w_next"] = {h, in};
      shapes[p + "b"] = {h};
    }
  }
  shapes["ctc.w"] = {h, v};
  shapes["ctc.b"] = {v};
  shapes["dec.embed"] = {vp, h};
  for (const char* gate : {"r", "z", "n"}) {
    shapes[std::string("dec.w_") + gate] = {h, h};  // embedding input
    shapes[std::string("dec.u_") + gate] = {h, h};  // previous state
    shapes[std::string("dec.c_") + gate] = {h, h};  // previous context
    shapes[std::string("dec.b_") + gate] = {h};
  }
  shapes["att.w_query"] = {h, h};
  shapes["att.w_key"] = {h, h};
  shapes["att.w_ctx"] = {h, h};
  shapes["att.w_state"] = {h, h};
  shapes["att.b"] = {h};
  shapes["out.w"] = {vp, h};
  shapes["out.b"] = {vp};
  return shapes;
}

// GRU cell shared by encoder and decoder. `extra` is an optional third
// input (the decoder's previous context) with its own gate matrices.
struct GruParams {
  const Tensor* w_r;
  const Tensor* u_r;
  const Tensor* b_r;
  const Tensor* w_z;
  const Tensor* u_z;
  const Tensor* b_z;
  const Tensor* w_n;
  const Tensor* u_n;
  const Tensor* b_n;
  const Tensor* c_r = nullptr;
  const Tensor* c_z = nullptr;
  const Tensor* c_n = nullptr;
};

inline Tensor gru_step(const GruParams& p, const Tensor& x, const Tensor& h_prev,
                       const Tensor* extra = nullptr) {
  auto gate_pre = [&](const Tensor& w, const Tensor& u, const Tensor& b, const Tensor* cm) {
    Tensor acc = add(add(matvec(w, x), matvec(u, h_prev)), b);
    if (extra && cm) acc = add(acc, matvec(*cm, *extra));
    return acc;
  };
  Tensor r = sigmoid(gate_pre(*p.w_r, *p.u_r, *p.b_r, p.c_r));
  Tensor z = sigmoid(gate_pre(*p.w_z, *p.u_z, *p.b_z, p.c_z));
  Tensor n_pre = add(add(matvec(*p.w_n, x), mul(r, matvec(*p.u_n, h_prev))), *p.b_n);
  if (extra && p.c_n) n_pre = add(n_pre, matvec(*p.c_n, *extra));
  Tensor n = tanh(n_pre);
  // h = (1 - z) * n + z * h_prev
  return add(mul(sub(constant({n.numel()}, std::vector<double>(n.numel(), 1.0)), z), n),
             mul(z, h_prev));
}

}  // namespace detail

// Parameters drawn from uniform(-s, s) with s = 1/sqrt(fan_in), fan_in
// being the trailing dimension. Each parameter gets its own named stream,
// so initialization is independent of iteration order.
inline Checkpoint init_model(const ModelConfig& config) {
  config.validate();
  Checkpoint ckpt;
  ckpt.config = config;
  for (const auto& [name, shape] : detail::param_shapes(config)) {
    ParamTensor p;
    p.shape = shape;
    double fan_in = static_cast<double>(shape.back());
    double s = 1.0 / std::sqrt(fan_in);
    Rng rng(seed_mix(config.seed, {fnv1a64(name)}));
    p.values.resize(shape_numel(shape));
    for (double& x : p.values) x = rng.uniform(-s, s);
    ckpt.params[name] = std::move(p);
  }
  return ckpt;
}

// The model's parameters materialized as tensors, either constants (plain
// evaluation) or leaves on a tape (training).
struct ModelTensors {
  ModelConfig config;
  std::map<std::string, Tensor> p;

  const Tensor& at(const std::string& name) const {
    auto it = p.find(name);
    if (it == p.end()) throw Error("ModelTensors: missing parameter " + name);
    return it->second;
  }
};

inline ModelTensors model_constants(const Checkpoint& ckpt) {
  ModelTensors mt;
  mt.config = ckpt.config;
  for (const auto& [name, param] : ckpt.params)
    mt.p.emplace(name, constant(param.shape, param.values));
  return mt;
}

inline ModelTensors model_leaves(Tape& tape, const Checkpoint& ckpt) {
  ModelTensors mt;
  mt.config = ckpt.config;
  for (const auto& [name, param] : ckpt.params)
    mt.p.emplace(name, leaf(tape, param.shape, param.values));
  return mt;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<Tensor> encode(const ModelTensors& mt, const Tensor& frames) {
  const ModelConfig& c = mt.config;
  const std::size_t t_len = frames.shape[0];
  const std::size_t h = static_cast<std::size_t>(c.hidden_dim);
  std::vector<Tensor> states;
  states.reserve(t_len);
  for (std::size_t t = 0; t < t_len; ++t) states.push_back(slice_row(frames, t));

  for (int l = 0; l < c.num_encoder_layers; ++l) {
    std::string p = "enc" + std::to_string(l) + ".";
    std::vector<Tensor> next;
    next.reserve(t_len);
    if (c.architecture_tag == "recurrent") {
      GruParams gru{&mt.at(p + "w_r"), &mt.at(p + "u_r"), &mt.at(p + "b_r"),
                    &mt.at(p + "w_z"), &mt.at(p + "u_z"), &mt.at(p + "b_z"),
                    &mt.at(p + "w_n"), &mt.at(p + "u_n"), &mt.at(p + "b_n")};
      Tensor hidden = constant({h}, std::vector<double>(h, 0.0));
      for (std::size_t t = 0; t < t_len; ++t) {
        hidden = gru_step(gru, states[t], hidden);
        next.push_back(hidden);
      }
    } else {
      const Tensor& w_prev = mt.at(p + "w_prev");
      const Tensor& w_cur = mt.at(p + "w_cur");
      const Tensor& w_next = mt.at(p + "w_next");
      const Tensor& b = mt.at(p + "b");
      for (std::size_t t = 0; t < t_len; ++t) {
        Tensor acc = add(matvec(w_cur, states[t]), b);
        if (t > 0) acc = add(acc, matvec(w_prev, states[t - 1]));
        if (t + 1 < t_len) acc = add(acc, matvec(w_next, states[t + 1]));
        next.push_back(tanh(acc));
      }
    }
    states = std::move(next);
  }
  return states;
}

}  // namespace detail

// Encoder output with precomputed attention keys (shared by all decoder
// steps of an utterance).
struct Encoded {
  Tensor states;  // [T x H]
  Tensor keys;    // [T x H]
};

inline Encoded encode_frames(const ModelTensors& mt, const Tensor& frames) {
  Tensor states = stack_rows(detail::encode(mt, frames));
  return Encoded{states, matmul(states, mt.at("att.w_key"))};
}

// Decoder step state: previous recurrent state plus the previous attention
// context, which feeds the next state update (input feeding) so the query
// stays acoustically grounded.
struct DecoderState {
  Tensor state;    // [H]
  Tensor context;  // [H]
};

inline DecoderState decoder_initial_state(const ModelTensors& mt) {
  const std::size_t h = static_cast<std::size_t>(mt.config.hidden_dim);
  return DecoderState{constant({h}, std::vector<double>(h, 0.0)),
                      constant({h}, std::vector<double>(h, 0.0))};
}

// One decoder step: embed the previous token, update the recurrent state,
// attend over encoder states (projected query against precomputed keys),
// and emit log-probabilities over V'.
inline std::pair<Tensor, DecoderState> decoder_step(const ModelTensors& mt, const Encoded& enc,
                                                    const DecoderState& prev, int prev_token) {
  const ModelConfig& c = mt.config;
  if (prev_token < 0 || prev_token >= c.decoder_vocab())
    throw std::invalid_argument("decoder_step: token " + std::to_string(prev_token) +
                                " outside decoder vocabulary");
  Tensor emb = slice_row(mt.at("dec.embed"), static_cast<std::size_t>(prev_token));
  detail::GruParams gru{&mt.at("dec.w_r"), &mt.at("dec.u_r"), &mt.at("dec.b_r"),
                        &mt.at("dec.w_z"), &mt.at("dec.u_z"), &mt.at("dec.b_z"),
                        &mt.at("dec.w_n"), &mt.at("dec.u_n"), &mt.at("dec.b_n"),
                        &mt.at("dec.c_r"), &mt.at("dec.c_z"), &mt.at("dec.c_n")};
  Tensor state = detail::gru_step(gru, emb, prev.state, &prev.context);
  Tensor query = matvec(mt.at("att.w_query"), state);
  Tensor scores = scale(matvec(enc.keys, query), 1.0 / std::sqrt(static_cast<double>(c.hidden_dim)));
  Tensor attn = softmax(scores);                                        // [T]
  Tensor context = reshape(matmul(reshape(attn, {1, attn.numel()}), enc.states),
                           {static_cast<std::size_t>(c.hidden_dim)});   // [H]
  Tensor pre = tanh(add(add(matvec(mt.at("att.w_ctx"), context),
                            matvec(mt.at("att.w_state"), state)),
                        mt.at("att.b")));
  Tensor logits = add(matvec(mt.at("out.w"), pre), mt.at("out.b"));
  return {log_softmax(logits), DecoderState{state, context}};
}

struct ForwardOut {
  Tensor ctc_logprobs;                 // [T x V]
  std::optional<Tensor> dec_logprobs;  // [U x V'] when a target was given
};

// Full forward pass. With a target, the decoder runs teacher-forced over
// U = |target| + 1 positions (trailing end symbol).
inline ForwardOut forward(const ModelTensors& mt, const Tensor& frames, const TokenSeq* target) {
  const ModelConfig& c = mt.config;
  if (frames.shape.size() != 2 || frames.shape[1] != static_cast<std::size_t>(c.input_dim))
    throw std::invalid_argument("forward: frames shape " + shape_str(frames.shape) +
                                " does not match input_dim " + std::to_string(c.input_dim));
  Encoded enc = encode_frames(mt, frames);

  ForwardOut out{log_softmax(add_rowvec(matmul(enc.states, mt.at("ctc.w")), mt.at("ctc.b"))), {}};

  if (target) {
    std::vector<Tensor> rows;
    DecoderState st = decoder_initial_state(mt);
    int prev = c.start_id();
    for (std::size_t u = 0; u <= target->size(); ++u) {
      auto [row, next] = decoder_step(mt, enc, st, prev);
      rows.push_back(row);
      st = next;
      if (u < target->size()) prev = (*target)[u];
    }
    out.dec_logprobs = stack_rows(rows);
  }
  return out;
}

inline ForwardOut forward(const Checkpoint& ckpt, const Matrix& frames, const TokenSeq* target) {
  ModelTensors mt = model_constants(ckpt);
  return forward(mt, constant({frames.rows, frames.cols}, frames.v), target);
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

// Attention-decoder beam search returning up to k finalized hypotheses.
// Expansion covers the regular tokens [1, V-1] plus end; blank and start
// are never emitted. Hypotheses are finalized at the end symbol (forced at
// the length cap T), scored by summed log-probabilities including end, and
// sorted by (log_score desc, tokens lexicographic). Confidence is the
// length-normalized exponentiated score exp(log_score / (|tokens| + 1)).
inline std::vector<Hypothesis> beam_decode(const ModelTensors& mt, const Matrix& frames,
                                           std::size_t beam_size, std::size_t k) {
  if (beam_size < k || k < 1)
    throw ConfigError("beam_decode: need beam_size >= k >= 1, got beam=" +
                      std::to_string(beam_size) + " k=" + std::to_string(k));
  const ModelConfig& c = mt.config;
  Tensor frames_t = constant({frames.rows, frames.cols}, frames.v);
  Encoded enc = encode_frames(mt, frames_t);

  struct Beam {
    TokenSeq tokens;
    double log_score = 0.0;
    DecoderState state;
    int prev_token;
    bool ended = false;
  };
  auto beam_less = [](const Beam& a, const Beam& b) {
    if (a.log_score != b.log_score) return a.log_score > b.log_score;
    return a.tokens < b.tokens;
  };
  auto hyp_less = [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_score != b.log_score) return a.log_score > b.log_score;
    return a.tokens < b.tokens;
  };
  auto finalize = [](const Beam& b) {
    return Hypothesis{b.tokens, b.log_score,
                      std::exp(b.log_score /
                               static_cast<double>(std::max<std::size_t>(1, b.tokens.size() + 1)))};
  };

  const std::size_t max_len = std::max<std::size_t>(4, frames.rows);
  const std::size_t end_id = static_cast<std::size_t>(c.end_id());
  std::vector<Beam> active = {{TokenSeq{}, 0.0, decoder_initial_state(mt), c.start_id(), false}};
  std::vector<Hypothesis> finished;

  for (std::size_t step = 0; step < max_len && !active.empty(); ++step) {
    // Expand every active prefix over the regular tokens plus end; the end
    // candidates compete for beam slots and then retire to the pool, which
    // makes beam size 1 coincide with stepwise-argmax greedy decoding.
    std::vector<Beam> candidates;
    for (Beam& b : active) {
      auto [row, next] = decoder_step(mt, enc, b.state, b.prev_token);
      Beam eb = b;
      eb.log_score += row.at(end_id);
      eb.ended = true;
      candidates.push_back(std::move(eb));
      for (int tok = 1; tok < c.vocab_size; ++tok) {
        Beam nb;
        nb.tokens = b.tokens;
        nb.tokens.push_back(tok);
        nb.log_score = b.log_score + row.at(static_cast<std::size_t>(tok));
        nb.state = next;
        nb.prev_token = tok;
        candidates.push_back(std::move(nb));
      }
    }
    std::sort(candidates.begin(), candidates.end(), beam_less);
    if (candidates.size() > beam_size) candidates.resize(beam_size);
    active.clear();
    for (Beam& b : candidates) {
      if (b.ended) finished.push_back(finalize(b));
      else active.push_back(std::move(b));
    }
    // Scores only fall with length; once no active prefix can beat the
    // k-th finished hypothesis, the top-k set is final.
    if (finished.size() >= k) {
      std::sort(finished.begin(), finished.end(), hyp_less);
      if (active.empty() || active.front().log_score <= finished[k - 1].log_score) break;
    }
  }
  // Length cap: force the end symbol onto whatever is still active, so a
  // hypothesis always exists even if the model never prefers end.
  for (Beam& b : active) {
    auto [row, next] = decoder_step(mt, enc, b.state, b.prev_token);
    b.log_score += row.at(end_id);
    finished.push_back(finalize(b));
  }

  std::sort(finished.begin(), finished.end(), hyp_less);
  if (finished.size() > k) finished.resize(k);
  return finished;
}

inline std::vector<Hypothesis> beam_decode(const Checkpoint& ckpt, const Matrix& frames,
                                           std::size_t beam_size, std::size_t k) {
  ModelTensors mt = model_constants(ckpt);
  return beam_decode(mt, frames, beam_size, k);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainItem {
  std::string id;
  Matrix frames;
  TokenSeq target;
};

struct TrainOptions {
  int epochs = 30;
  double lr = 0.01;
  int batch_size = 8;
  std::uint64_t seed = 0;
};

inline constexpr double kGradClipNorm = 5.0;

// Combined hybrid loss for one utterance on the given model tensors. When
// the CTC target is infeasible for the frame count the attention branch
// alone carries the loss (does not occur on generated corpora).
inline Tensor utterance_loss(const ModelTensors& mt, const Tensor& frames, const TokenSeq& target) {
  ForwardOut out = forward(mt, frames, &target);
  Tensor att = attention_kl_loss(*out.dec_logprobs, target, mt.config.label_smoothing);
  CtcLoss ctc = ctc_loss(out.ctc_logprobs, target);
  if (ctc.infeasible) return att;
  return combined_loss(att, ctc.loss, mt.config.attention_weight);
}

// Token accuracy of greedy (beam-1) decoding: 1 - total_edits / total_ref_tokens,
// clamped to [0, 1].
inline double greedy_token_accuracy(const Checkpoint& ckpt, const std::vector<TrainItem>& items);

// Adam on the combined loss with deterministic, seed-driven example order.
// Aborts with NumericalError on divergence.
inline Checkpoint train(const Checkpoint& start, const std::vector<TrainItem>& items,
                        const TrainOptions& opts) {
  if (items.empty()) throw ConfigError("train: empty training set");
  for (const TrainItem& it : items) {
    if (it.frames.cols != static_cast<std::size_t>(start.config.input_dim))
      throw ConfigError("train: utterance " + it.id + " frame width " +
                        std::to_string(it.frames.cols) + " != input_dim");
    for (int tok : it.target)
      if (tok < 1 || tok >= start.config.vocab_size)
        throw ConfigError("train: utterance " + it.id + " token outside vocabulary");
  }

  Checkpoint ckpt = start;
  ckpt.meta = TrainMeta{};
  {
    std::string ids;
    for (const TrainItem& it : items) ids += it.id + "\n";
    ckpt.meta.dataset_fingerprint = sha256_hex(ids);
  }
  if (opts.epochs == 0) return ckpt;

  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::map<std::string, std::vector<double>> m1, m2;
  for (const auto& [name, p] : ckpt.params) {
    m1[name].assign(p.values.size(), 0.0);
    m2[name].assign(p.values.size(), 0.0);
  }
  std::uint64_t step = 0;

  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < opts.epochs; ++epoch) {
    Rng shuffle_rng(seed_mix(opts.seed, {fnv1a64("epoch_order"), static_cast<std::uint64_t>(epoch)}));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    // Linear decay to a tenth of the base rate over the run.
    double lr = opts.lr * (1.0 - 0.9 * static_cast<double>(epoch) /
                                     static_cast<double>(std::max(1, opts.epochs - 1)));

    for (std::size_t begin = 0; begin < order.size(); begin += static_cast<std::size_t>(opts.batch_size)) {
      std::size_t end = std::min(order.size(), begin + static_cast<std::size_t>(opts.batch_size));
      Tape tape;
      ModelTensors mt = model_leaves(tape, ckpt);
      Tensor batch_loss = scalar_constant(0.0);
      for (std::size_t i = begin; i < end; ++i) {
        const TrainItem& it = items[order[i]];
        Tensor frames = constant({it.frames.rows, it.frames.cols}, it.frames.v);
        batch_loss = add(batch_loss, utterance_loss(mt, frames, it.target));
      }
      batch_loss = scale(batch_loss, 1.0 / static_cast<double>(end - begin));
      double loss_value = batch_loss.scalar();
      if (!std::isfinite(loss_value))
        throw NumericalError("train: loss diverged (non-finite) at epoch " + std::to_string(epoch));
      epoch_loss += loss_value * static_cast<double>(end - begin);

      Gradients grads = backward(batch_loss);
      ++step;
      // Global-norm gradient clipping keeps recurrent training stable.
      double global_sq = 0.0;
      for (auto& [name, p] : ckpt.params)
        for (double g : grads.wrt(mt.at(name))) global_sq += g * g;
      double clip = 1.0;
      if (global_sq > kGradClipNorm * kGradClipNorm)
        clip = kGradClipNorm / std::sqrt(global_sq);
      double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (auto& [name, p] : ckpt.params) {
        const std::vector<double>& g = grads.wrt(mt.at(name));
        auto& m = m1[name];
        auto& v = m2[name];
        for (std::size_t i = 0; i < g.size(); ++i) {
          double gc = clip * g[i];
          m[i] = beta1 * m[i] + (1.0 - beta1) * gc;
          v[i] = beta2 * v[i] + (1.0 - beta2) * gc * gc;
          p.values[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
        }
      }
    }
    ckpt.meta.loss_history.push_back(epoch_loss / static_cast<double>(items.size()));
  }
  ckpt.meta.epochs = opts.epochs;
  ckpt.meta.final_loss = ckpt.meta.loss_history.back();
  ckpt.meta.greedy_token_accuracy = greedy_token_accuracy(ckpt, items);
  return ckpt;
}

inline double greedy_token_accuracy(const Checkpoint& ckpt, const std::vector<TrainItem>& items) {
  ModelTensors mt = model_constants(ckpt);
  std::size_t edits = 0, ref_tokens = 0;
  for (const TrainItem& it : items) {
    std::vector<Hypothesis> hyps = beam_decode(mt, it.frames, 1, 1);
    edits += levenshtein(it.target, hyps[0].tokens).edits();
    ref_tokens += it.target.size();
  }
  if (ref_tokens == 0) return 1.0;
  double acc = 1.0 - static_cast<double>(edits) / static_cast<double>(ref_tokens);
  return std::max(0.0, std::min(1.0, acc));
}

// ---------------------------------------------------------------------------
// Checkpoint file format
//
//   magic "MIAC" | u16 version | u32 json_len | config+meta JSON (UTF-8) |
//   per parameter: u32 name_len | name | u32 rank | u32 dims[] | f32 values[]
//
// Parameters are written in name order as binary32, so save -> load ->
// save reproduces the bytes exactly.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void write_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

template <typename T>
T read_le(const std::string& data, std::size_t& off, const std::string& what) {
  if (off + sizeof(T) > data.size())
    throw DataError("checkpoint: truncated while reading " + what + " at offset " +
                    std::to_string(off));
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data[off + i])) << (8 * i);
  off += sizeof(T);
  return static_cast<T>(v);
}

}  // namespace detail

inline std::string checkpoint_serialize(const Checkpoint& ckpt) {
  std::string out = "MIAC";
  detail::write_le<std::uint16_t>(out, kCheckpointVersion);
  nlohmann::json j{{"config", ckpt.config}, {"meta", ckpt.meta}};
  std::string cfg = j.dump();
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  for (const auto& [name, p] : ckpt.params) {
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.shape.size()));
    for (std::size_t d : p.shape) detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (double x : p.values) {
      float f = static_cast<float>(x);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      detail::write_le<std::uint32_t>(out, bits);
    }
  }
  return out;
}

inline Checkpoint checkpoint_deserialize(const std::string& data) {
  std::size_t off = 0;
  if (data.size() < 6 || data.compare(0, 4, "MIAC") != 0)
    throw DataError("checkpoint: bad magic (expected MIAC)");
  off = 4;
  std::uint16_t version = detail::read_le<std::uint16_t>(data, off, "version");
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  std::uint32_t cfg_len = detail::read_le<std::uint32_t>(data, off, "config length");
  if (off + cfg_len > data.size()) throw DataError("checkpoint: truncated config JSON");
  nlohmann::json j = nlohmann::json::parse(data.substr(off, cfg_len), nullptr, false);
  if (j.is_discarded()) throw DataError("checkpoint: invalid config JSON");
  off += cfg_len;

  Checkpoint ckpt;
  ckpt.config = j.at("config").get<ModelConfig>();
  ckpt.meta = j.at("meta").get<TrainMeta>();
  ckpt.config.validate();

  while (off < data.size()) {
    std::uint32_t name_len = detail::read_le<std::uint32_t>(data, off, "parameter name length");
    if (off + name_len > data.size()) throw DataError("checkpoint: truncated parameter name");
    std::string name = data.substr(off, name_len);
    off += name_len;
    std::uint32_t rank = detail::read_le<std::uint32_t>(data, off, "rank of " + name);
    ParamTensor p;
    for (std::uint32_t d = 0; d < rank; ++d)
      p.shape.push_back(detail::read_le<std::uint32_t>(data, off, "dims of " + name));
    std::size_t count = shape_numel(p.shape);
    p.values.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
      std::uint32_t bits = detail::read_le<std::uint32_t>(data, off, "values of " + name);
      float f;
      std::memcpy(&f, &bits, 4);
      if (!std::isfinite(f)) throw DataError("checkpoint: non-finite value in " + name);
      p.values.push_back(static_cast<double>(f));
    }
    ckpt.params[name] = std::move(p);
  }

  // The parameter set must exactly match the architecture.
  auto expected = detail::param_shapes(ckpt.config);
  if (expected.size() != ckpt.params.size())
    throw DataError("checkpoint: expected " + std::to_string(expected.size()) +
                    " parameters, found " + std::to_string(ckpt.params.size()));
  for (const auto& [name, shape] : expected) {
    auto it = ckpt.params.find(name);
    if (it == ckpt.params.end()) throw DataError("checkpoint: missing parameter " + name);
    if (it->second.shape != shape)
      throw DataError("checkpoint: parameter " + name + " has shape " +
                      shape_str(it->second.shape) + ", expected " + shape_str(shape));
  }
  return ckpt;
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("save_checkpoint: cannot open " + path);
  std::string bytes = checkpoint_serialize(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("load_checkpoint: cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return checkpoint_deserialize(bytes);
}

}  // namespace miaudit
