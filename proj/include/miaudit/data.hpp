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
// Deterministic synthetic speech-like corpus. Every token has a global
// emission template; every speaker adds a persistent offset vector, so both
// utterance identity (the jitter realization) and speaker identity are
// baked into the frames. Membership splits are built at two levels:
//
//   sample level   members are utterances inside the recognizer's training
//                  set, non-members are other utterances of the same
//                  speakers;
//   speaker level  members are held-out utterances of training-set
//                  speakers, non-members come from speakers the model
//                  never saw.
//
// Both levels share one asr_train set for a given (corpus, sizes, seed),
// so a single trained model serves both labelings.

#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "miaudit/common.hpp"

namespace miaudit {

// Frame geometry constants. Jitter sigma is the base per-coordinate noise
// scale; token templates and speaker offsets are sized so that a desk-scale
// model can learn the task yet memorizes enough about individual
// utterances and speakers for membership signal to exist.
inline constexpr double kFrameJitterSigma = 0.3;
inline constexpr double kTokenMeanSigma = 0.9;
inline constexpr double kSpeakerOffsetSigma = 0.45;
inline constexpr double kMinSpeakerOffsetDistance = 0.5;
inline constexpr int kMinFramesPerToken = 3;
inline constexpr int kMaxFramesPerToken = 5;
inline constexpr int kMinTargetLen = 3;
inline constexpr int kMaxTargetLen = 8;

struct SpeakerProfile {
  std::string speaker_id;
  Matrix token_means;                // [V x F]; row 0 (blank) unused
  std::vector<double> token_scales;  // per-token jitter multiplier
  std::vector<double> offset;        // [F]
};

struct Utterance {
  std::string utterance_id;
  std::string speaker_id;
  TokenSeq target;
  Matrix frames;  // [T x F]
};

struct Corpus {
  int vocab_size = 0;
  int frame_dim = 0;
  std::vector<SpeakerProfile> profiles;
  std::vector<Utterance> utterances;

  const Utterance& by_id(const std::string& id) const {
    for (const Utterance& u : utterances)
      if (u.utterance_id == id) return u;
    throw DataError("corpus: unknown utterance id " + id);
  }
};

enum class MiLevel { kSample, kSpeaker };

inline std::string level_name(MiLevel l) { return l == MiLevel::kSample ? "sample" : "speaker"; }

inline MiLevel level_from_name(const std::string& s) {
  if (s == "sample") return MiLevel::kSample;
  if (s == "speaker") return MiLevel::kSpeaker;
  throw ConfigError("unknown MI level '" + s + "' (expected sample|speaker)");
}

struct SplitSizes {
  std::size_t asr_train = 300;
  std::size_t mi_train_per_class = 200;
  std::size_t mi_test_per_class = 100;
};

struct SplitManifest {
  MiLevel level = MiLevel::kSample;
  std::vector<std::string> asr_train;
  std::vector<std::string> mi_train_pos;
  std::vector<std::string> mi_train_neg;
  std::vector<std::string> mi_test_pos;
  std::vector<std::string> mi_test_neg;
  std::string fingerprint;
};

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

namespace detail {

inline std::string zero_padded(std::size_t n) {
  std::string s = std::to_string(n);
  while (s.size() < 3) s.insert(s.begin(), '0');
  return s;
}

inline std::string speaker_name(std::size_t i) { return "spk" + zero_padded(i); }

inline std::string utt_name(std::size_t spk, std::size_t utt) {
  return speaker_name(spk) + "_utt" + zero_padded(utt);
}

inline double l2_distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace detail

inline Corpus gen_corpus(std::size_t n_speakers, std::size_t utt_per_speaker, int vocab_size,
                         int frame_dim, std::uint64_t seed) {
  if (n_speakers < 4) throw ConfigError("gen_corpus: need at least 4 speakers");
  if (vocab_size < 4) throw ConfigError("gen_corpus: need vocab_size >= 4");

  Corpus corpus;
  corpus.vocab_size = vocab_size;
  corpus.frame_dim = frame_dim;

  const std::size_t f = static_cast<std::size_t>(frame_dim);
  Matrix token_means(static_cast<std::size_t>(vocab_size), f);
  {
    Rng rng(seed_mix(seed, {fnv1a64("token_means")}));
    for (int tok = 1; tok < vocab_size; ++tok)
      for (std::size_t d = 0; d < f; ++d)
        token_means.at(static_cast<std::size_t>(tok), d) = kTokenMeanSigma * rng.normal();
  }

  // Speaker offsets, redrawn until pairwise L2 distance >= 0.5.
  std::vector<std::vector<double>> offsets(n_speakers, std::vector<double>(f));
  {
    Rng rng(seed_mix(seed, {fnv1a64("speaker_offsets")}));
    for (std::size_t s = 0; s < n_speakers; ++s) {
      bool ok = false;
      while (!ok) {
        for (std::size_t d = 0; d < f; ++d) offsets[s][d] = kSpeakerOffsetSigma * rng.normal();
        ok = true;
        for (std::size_t prev = 0; prev < s; ++prev)
          if (detail::l2_distance(offsets[s], offsets[prev]) < kMinSpeakerOffsetDistance) {
            ok = false;
            break;
          }
      }
    }
  }

  for (std::size_t s = 0; s < n_speakers; ++s) {
    SpeakerProfile prof;
    prof.speaker_id = detail::speaker_name(s);
    prof.token_means = token_means;
    prof.offset = offsets[s];
    Rng scale_rng(seed_mix(seed, {fnv1a64("token_scales"), s}));
    prof.token_scales.resize(static_cast<std::size_t>(vocab_size), 1.0);
    for (int tok = 1; tok < vocab_size; ++tok)
      prof.token_scales[static_cast<std::size_t>(tok)] = scale_rng.uniform(0.8, 1.2);
    corpus.profiles.push_back(std::move(prof));
  }

  for (std::size_t s = 0; s < n_speakers; ++s) {
    const SpeakerProfile& prof = corpus.profiles[s];
    for (std::size_t u = 0; u < utt_per_speaker; ++u) {
      Rng rng(seed_mix(seed, {fnv1a64("utterance"), s, u}));
      Utterance utt;
      utt.utterance_id = detail::utt_name(s, u);
      utt.speaker_id = prof.speaker_id;
      std::size_t len = static_cast<std::size_t>(kMinTargetLen) +
                        rng.below(kMaxTargetLen - kMinTargetLen + 1);
      for (std::size_t i = 0; i < len; ++i)
        utt.target.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(vocab_size - 1))));

      std::vector<std::vector<double>> frames;
      for (int tok : utt.target) {
        std::size_t n_frames = static_cast<std::size_t>(kMinFramesPerToken) +
                               rng.below(kMaxFramesPerToken - kMinFramesPerToken + 1);
        double sigma = kFrameJitterSigma * prof.token_scales[static_cast<std::size_t>(tok)];
        for (std::size_t t = 0; t < n_frames; ++t) {
          std::vector<double> frame(f);
          for (std::size_t d = 0; d < f; ++d)
            frame[d] = prof.token_means.at(static_cast<std::size_t>(tok), d) + prof.offset[d] +
                       sigma * rng.normal();
          frames.push_back(std::move(frame));
        }
      }
      utt.frames = Matrix(frames.size(), f);
      for (std::size_t t = 0; t < frames.size(); ++t)
        for (std::size_t d = 0; d < f; ++d) utt.frames.at(t, d) = frames[t][d];
      corpus.utterances.push_back(std::move(utt));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Serialization: JSON lines with a fingerprinted header.
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json utterance_to_json(const Utterance& u) {
  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t t = 0; t < u.frames.rows; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t d = 0; d < u.frames.cols; ++d) row.push_back(u.frames.at(t, d));
    frames.push_back(std::move(row));
  }
  return nlohmann::json{{"utterance_id", u.utterance_id},
                        {"speaker_id", u.speaker_id},
                        {"target", u.target},
                        {"frames", std::move(frames)}};
}

inline Utterance utterance_from_json(const nlohmann::json& j) {
  Utterance u;
  u.utterance_id = j.at("utterance_id").get<std::string>();
  u.speaker_id = j.at("speaker_id").get<std::string>();
  u.target = j.at("target").get<TokenSeq>();
  const auto& frames = j.at("frames");
  u.frames.rows = frames.size();
  u.frames.cols = frames.empty() ? 0 : frames[0].size();
  for (const auto& row : frames) {
    if (row.size() != u.frames.cols)
      throw DataError("utterance " + u.utterance_id + ": ragged frame rows");
    for (const auto& x : row) u.frames.v.push_back(x.get<double>());
  }
  return u;
}

// Fingerprints cover the canonical serialized lines, one per utterance in
// id order.
inline std::string corpus_lines(const Corpus& c) {
  std::vector<const Utterance*> order;
  for (const Utterance& u : c.utterances) order.push_back(&u);
  std::sort(order.begin(), order.end(), [](const Utterance* a, const Utterance* b) {
    return a->utterance_id < b->utterance_id;
  });
  std::string body;
  for (const Utterance* u : order) {
    body += utterance_to_json(*u).dump();
    body += '\n';
  }
  return body;
}

}  // namespace detail

inline std::string corpus_fingerprint(const Corpus& c) {
  return sha256_hex(detail::corpus_lines(c));
}

inline void save_corpus(const Corpus& c, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_corpus: cannot open " + path);
  std::string body = detail::corpus_lines(c);
  nlohmann::json header{{"type", "miaudit_corpus"},
                        {"vocab_size", c.vocab_size},
                        {"frame_dim", c.frame_dim},
                        {"fingerprint", sha256_hex(body)}};
  out << header.dump() << '\n' << body;
}

// Loads utterances; speaker profiles are generation-time only and not
// persisted. The embedded fingerprint must match the re-serialized lines.
inline Corpus load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_corpus: cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line.empty())
    throw DataError("load_corpus: " + path + " is empty");
  nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
  if (header.is_discarded() || header.value("type", "") != "miaudit_corpus")
    throw DataError("load_corpus: missing corpus header in " + path);
  Corpus c;
  c.vocab_size = header.at("vocab_size").get<int>();
  c.frame_dim = header.at("frame_dim").get<int>();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw DataError("load_corpus: bad JSON at line " + std::to_string(line_no));
    c.utterances.push_back(detail::utterance_from_json(j));
  }
  std::string expected = header.at("fingerprint").get<std::string>();
  std::string actual = corpus_fingerprint(c);
  if (expected != actual)
    throw DataError("load_corpus: fingerprint mismatch (file " + expected.substr(0, 12) +
                    "..., content " + actual.substr(0, 12) + "...)");
  return c;
}

// ---------------------------------------------------------------------------
// Split construction
// ---------------------------------------------------------------------------

namespace detail {

inline nlohmann::json split_body_json(const SplitManifest& m) {
  return nlohmann::json{{"level", level_name(m.level)},
                        {"asr_train", m.asr_train},
                        {"mi_train_pos", m.mi_train_pos},
                        {"mi_train_neg", m.mi_train_neg},
                        {"mi_test_pos", m.mi_test_pos},
                        {"mi_test_neg", m.mi_test_neg}};
}

}  // namespace detail

inline std::string split_fingerprint(const SplitManifest& m) {
  return sha256_hex(detail::split_body_json(m).dump());
}

// Re-checks every protocol invariant of a manifest against its corpus.
// Throws a DataError naming the violated constraint.
inline void validate_splits(const Corpus& corpus, const SplitManifest& m) {
  std::map<std::string, const Utterance*> by_id;
  for (const Utterance& u : corpus.utterances) by_id[u.utterance_id] = &u;
  auto speaker_of = [&](const std::string& id) -> const std::string& {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("split references unknown utterance " + id);
    return it->second->speaker_id;
  };
  auto as_set = [](const std::vector<std::string>& v) {
    return std::set<std::string>(v.begin(), v.end());
  };
  std::set<std::string> train_set = as_set(m.asr_train);
  std::set<std::string> train_speakers;
  for (const std::string& id : m.asr_train) train_speakers.insert(speaker_of(id));

  if (m.mi_train_pos.size() != m.mi_train_neg.size())
    throw DataError("split invariant violated: |mi_train_pos| != |mi_train_neg|");
  if (m.mi_test_pos.size() != m.mi_test_neg.size())
    throw DataError("split invariant violated: |mi_test_pos| != |mi_test_neg|");

  std::set<std::string> mi_train = as_set(m.mi_train_pos);
  for (const auto& id : m.mi_train_neg) mi_train.insert(id);
  for (const auto& id : m.mi_test_pos)
    if (mi_train.count(id)) throw DataError("split invariant violated: mi_train and mi_test overlap at " + id);
  for (const auto& id : m.mi_test_neg)
    if (mi_train.count(id)) throw DataError("split invariant violated: mi_train and mi_test overlap at " + id);

  auto each_pos = {&m.mi_train_pos, &m.mi_test_pos};
  auto each_neg = {&m.mi_train_neg, &m.mi_test_neg};
  if (m.level == MiLevel::kSample) {
    for (const auto* ids : each_pos)
      for (const auto& id : *ids)
        if (!train_set.count(id))
          throw DataError("sample-level invariant violated: positive " + id + " not in asr_train");
    for (const auto* ids : each_neg)
      for (const auto& id : *ids) {
        if (train_set.count(id))
          throw DataError("sample-level invariant violated: negative " + id + " in asr_train");
        if (!train_speakers.count(speaker_of(id)))
          throw DataError("sample-level invariant violated: negative " + id +
                          " from speaker outside asr_train speakers");
      }
  } else {
    for (const auto* ids : each_pos)
      for (const auto& id : *ids) {
        if (train_set.count(id))
          throw DataError("speaker-level invariant violated: positive " + id + " in asr_train");
        if (!train_speakers.count(speaker_of(id)))
          throw DataError("speaker-level invariant violated: positive " + id +
                          " from unseen speaker");
      }
    for (const auto* ids : each_neg)
      for (const auto& id : *ids)
        if (train_speakers.count(speaker_of(id)))
          throw DataError("speaker-level invariant violated: negative " + id +
                          " from seen speaker");
  }
}

// Deterministic split construction. The corpus input order is irrelevant:
// utterances are grouped and sorted before any seeded draw. For one
// (corpus, sizes, seed) the sample- and speaker-level manifests share the
// same asr_train list.
inline SplitManifest build_splits(const Corpus& corpus, MiLevel level, const SplitSizes& sizes,
                                  std::uint64_t seed) {
  std::map<std::string, std::vector<std::string>> by_speaker;
  for (const Utterance& u : corpus.utterances) by_speaker[u.speaker_id].push_back(u.utterance_id);
  for (auto& [spk, ids] : by_speaker) std::sort(ids.begin(), ids.end());

  std::vector<std::string> speakers;
  for (const auto& [spk, ids] : by_speaker) speakers.push_back(spk);

  // Seen/unseen speaker partition, shared across levels.
  Rng part_rng(seed_mix(seed, {fnv1a64("speaker_partition")}));
  part_rng.shuffle(speakers);
  std::size_t n_seen = (speakers.size() + 1) / 2;
  std::vector<std::string> seen(speakers.begin(), speakers.begin() + static_cast<std::ptrdiff_t>(n_seen));
  std::vector<std::string> unseen(speakers.begin() + static_cast<std::ptrdiff_t>(n_seen), speakers.end());
  std::sort(seen.begin(), seen.end());
  std::sort(unseen.begin(), unseen.end());

  // asr_train: a per-speaker prefix of each seen speaker's shuffled list.
  SplitManifest m;
  m.level = level;
  std::size_t per_speaker = (sizes.asr_train + n_seen - 1) / n_seen;
  std::vector<std::string> held_out_seen;
  for (const std::string& spk : seen) {
    std::vector<std::string> ids = by_speaker[spk];
    Rng rng(seed_mix(seed, {fnv1a64("asr_train"), fnv1a64(spk)}));
    rng.shuffle(ids);
    std::size_t take = std::min<std::size_t>(per_speaker, ids.size());
    if (m.asr_train.size() + take > sizes.asr_train) take = sizes.asr_train - m.asr_train.size();
    for (std::size_t i = 0; i < ids.size(); ++i)
      (i < take ? m.asr_train : held_out_seen).push_back(ids[i]);
  }
  if (m.asr_train.size() < sizes.asr_train)
    throw ConfigError("build_splits: asr_train needs " + std::to_string(sizes.asr_train) +
                      " utterances, seen speakers can only supply " +
                      std::to_string(m.asr_train.size()));
  std::sort(m.asr_train.begin(), m.asr_train.end());
  std::sort(held_out_seen.begin(), held_out_seen.end());

  std::vector<std::string> unseen_pool;
  for (const std::string& spk : unseen)
    for (const std::string& id : by_speaker[spk]) unseen_pool.push_back(id);
  std::sort(unseen_pool.begin(), unseen_pool.end());

  const std::size_t need = sizes.mi_train_per_class + sizes.mi_test_per_class;
  auto draw_two = [&](std::vector<std::string> pool, const char* what, std::uint64_t salt,
                      std::vector<std::string>& train_ids, std::vector<std::string>& test_ids) {
    if (pool.size() < need)
      throw ConfigError(std::string("build_splits: pool '") + what + "' holds " +
                        std::to_string(pool.size()) + " utterances, need " + std::to_string(need));
    Rng rng(seed_mix(seed, {salt}));
    rng.shuffle(pool);
    train_ids.assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(sizes.mi_train_per_class));
    test_ids.assign(pool.begin() + static_cast<std::ptrdiff_t>(sizes.mi_train_per_class),
                    pool.begin() + static_cast<std::ptrdiff_t>(need));
    std::sort(train_ids.begin(), train_ids.end());
    std::sort(test_ids.begin(), test_ids.end());
  };

  if (level == MiLevel::kSample) {
    draw_two(m.asr_train, "asr_train (sample positives)", fnv1a64("sample_pos"), m.mi_train_pos,
             m.mi_test_pos);
    draw_two(held_out_seen, "seen-speaker held-out (sample negatives)", fnv1a64("sample_neg"),
             m.mi_train_neg, m.mi_test_neg);
  } else {
    draw_two(held_out_seen, "seen-speaker held-out (speaker positives)", fnv1a64("speaker_pos"),
             m.mi_train_pos, m.mi_test_pos);
    draw_two(unseen_pool, "unseen speakers (speaker negatives)", fnv1a64("speaker_neg"),
             m.mi_train_neg, m.mi_test_neg);
  }

  validate_splits(corpus, m);
  m.fingerprint = split_fingerprint(m);
  return m;
}

inline void save_splits(const SplitManifest& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_splits: cannot open " + path);
  nlohmann::json j = detail::split_body_json(m);
  j["fingerprint"] = m.fingerprint;
  out << j.dump(2) << '\n';
}

inline SplitManifest load_splits(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_splits: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (text.empty()) throw DataError("load_splits: " + path + " is empty");
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw DataError("load_splits: invalid JSON in " + path);
  SplitManifest m;
  m.level = level_from_name(j.at("level").get<std::string>());
  m.asr_train = j.at("asr_train").get<std::vector<std::string>>();
  m.mi_train_pos = j.at("mi_train_pos").get<std::vector<std::string>>();
  m.mi_train_neg = j.at("mi_train_neg").get<std::vector<std::string>>();
  m.mi_test_pos = j.at("mi_test_pos").get<std::vector<std::string>>();
  m.mi_test_neg = j.at("mi_test_neg").get<std::vector<std::string>>();
  m.fingerprint = j.at("fingerprint").get<std::string>();
  std::string actual = split_fingerprint(m);
  if (actual != m.fingerprint)
    throw DataError("load_splits: fingerprint mismatch in " + path);
  return m;
}

}  // namespace miaudit
