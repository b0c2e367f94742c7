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
// End-to-end experiment orchestration: synthesize a corpus, train shadow
// and target recognizers, extract membership features per feature set,
// train the forest on shadow-derived features, score target-derived test
// features, and aggregate metrics over experiment seeds into an audit
// report. Also the grey-box path: auditing from exported logits files with
// no model access.
//
// Everything here is a deterministic function of the experiment config;
// artifacts cached on disk are keyed so that reruns reuse or reproduce
// them bit for bit.

#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "miaudit/data.hpp"
#include "miaudit/forest.hpp"
#include "miaudit/metrics.hpp"
#include "miaudit/model.hpp"
#include "miaudit/perturb.hpp"

namespace miaudit {

// ---------------------------------------------------------------------------
// Feature sets
// ---------------------------------------------------------------------------

enum class FeatureSet { kErrors, kLosses, kLossesGf, kLossesAf, kLossesGfAf };

inline const std::vector<FeatureSet>& all_feature_sets() {
  static const std::vector<FeatureSet> sets = {FeatureSet::kErrors, FeatureSet::kLosses,
                                               FeatureSet::kLossesGf, FeatureSet::kLossesAf,
                                               FeatureSet::kLossesGfAf};
  return sets;
}

inline std::string feature_set_name(FeatureSet s) {
  switch (s) {
    case FeatureSet::kErrors: return "errors";
    case FeatureSet::kLosses: return "losses";
    case FeatureSet::kLossesGf: return "losses+GF";
    case FeatureSet::kLossesAf: return "losses+AF";
    case FeatureSet::kLossesGfAf: return "losses+GF+AF";
  }
  throw ConfigError("unknown feature set");
}

inline std::string feature_set_slug(FeatureSet s) {
  switch (s) {
    case FeatureSet::kErrors: return "errors";
    case FeatureSet::kLosses: return "losses";
    case FeatureSet::kLossesGf: return "losses_gf";
    case FeatureSet::kLossesAf: return "losses_af";
    case FeatureSet::kLossesGfAf: return "losses_gf_af";
  }
  throw ConfigError("unknown feature set");
}

inline FeatureSet feature_set_from_name(const std::string& name) {
  for (FeatureSet s : all_feature_sets())
    if (feature_set_name(s) == name) return s;
  throw ConfigError("unknown feature set '" + name +
                    "' (expected errors|losses|losses+GF|losses+AF|losses+GF+AF)");
}

inline bool uses_gaussian(FeatureSet s) {
  return s == FeatureSet::kLossesGf || s == FeatureSet::kLossesGfAf;
}
inline bool uses_adversarial(FeatureSet s) {
  return s == FeatureSet::kLossesAf || s == FeatureSet::kLossesGfAf;
}
inline bool uses_losses(FeatureSet s) { return s != FeatureSet::kErrors; }

struct ExtractionConfig {
  std::size_t beam_size = 8;
  std::size_t top_k = 4;  // hypotheses entering the error block
  GaussianConfig gaussian = GaussianConfig::defaults();
  AdvConfig adversarial = AdvConfig::defaults();
};

inline std::size_t feature_width(FeatureSet s, const ExtractionConfig& x) {
  switch (s) {
    case FeatureSet::kErrors: return kErrorFeaturesPerHyp * x.top_k;
    case FeatureSet::kLosses: return 2;
    case FeatureSet::kLossesGf: return 2 + 4 * x.gaussian.snrs_db.size();
    case FeatureSet::kLossesAf: return 2 + 2 * x.adversarial.radii.size();
    case FeatureSet::kLossesGfAf:
      return 2 + 4 * x.gaussian.snrs_db.size() + 2 * x.adversarial.radii.size();
  }
  throw ConfigError("unknown feature set");
}

// The layout is a pure function of configuration, never of data; its
// fingerprint guards against mixing differently-laid-out feature files.
inline std::string layout_fingerprint(FeatureSet s, const ExtractionConfig& x) {
  std::ostringstream os;
  os << feature_set_name(s) << "|width=" << feature_width(s, x);
  if (s == FeatureSet::kErrors) os << "|k=" << x.top_k << "|beam=" << x.beam_size;
  if (uses_gaussian(s)) {
    os << "|snrs=";
    for (double v : x.gaussian.snrs_db) os << v << ",";
    os << "runs=" << x.gaussian.runs_per_snr;
  }
  if (uses_adversarial(s)) {
    os << "|radii=";
    for (double v : x.adversarial.radii) os << v << ",";
    os << "eta=" << x.adversarial.step_size << ",steps=" << x.adversarial.steps;
  }
  return sha256_hex(os.str());
}

// ---------------------------------------------------------------------------
// Per-utterance feature extraction
// ---------------------------------------------------------------------------

inline std::vector<double> extract_one(const ModelTensors& mt, const Utterance& u, FeatureSet tag,
                                       const ExtractionConfig& x) {
  std::vector<double> feats;
  if (tag == FeatureSet::kErrors) {
    std::vector<Hypothesis> hyps = beam_decode(mt, u.frames, x.beam_size, x.top_k);
    return error_block(u.target, hyps, x.top_k);
  }
  LossPair clean = loss_pair(mt, u.frames, u.target);
  feats.push_back(clean.attention_kl);
  feats.push_back(clean.ctc);
  if (uses_gaussian(tag)) {
    std::vector<double> g = gaussian_features(mt, u.utterance_id, u.frames, u.target, x.gaussian);
    feats.insert(feats.end(), g.begin(), g.end());
  }
  if (uses_adversarial(tag)) {
    std::vector<double> a =
        adversarial_features(mt, u.utterance_id, u.frames, u.target, x.adversarial);
    feats.insert(feats.end(), a.begin(), a.end());
  }
  return feats;
}

// Extraction over a labeled id list, fanned out over worker threads.
// Results are keyed by position, and all randomness is utterance-keyed, so
// the thread schedule never affects output.
inline std::vector<MIExample> extract_features(const ModelTensors& mt, const Corpus& corpus,
                                               const std::vector<std::string>& pos_ids,
                                               const std::vector<std::string>& neg_ids,
                                               FeatureSet tag, const ExtractionConfig& x,
                                               int threads = 1) {
  std::map<std::string, const Utterance*> by_id;
  for (const Utterance& u : corpus.utterances) by_id[u.utterance_id] = &u;

  struct Job {
    const Utterance* utt;
    int label;
  };
  std::vector<Job> jobs;
  for (const std::string& id : pos_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("extract_features: unknown utterance " + id);
    jobs.push_back({it->second, 1});
  }
  for (const std::string& id : neg_ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("extract_features: unknown utterance " + id);
    jobs.push_back({it->second, 0});
  }

  std::vector<MIExample> out(jobs.size());
  const std::size_t width = feature_width(tag, x);
  auto work = [&](std::size_t i) {
    const Job& job = jobs[i];
    MIExample e;
    e.features = extract_one(mt, *job.utt, tag, x);
    if (e.features.size() != width)
      throw Error("extract_features: width drifted from layout");
    e.label = job.label;
    e.utterance_id = job.utt->utterance_id;
    e.speaker_id = job.utt->speaker_id;
    e.feature_set = feature_set_name(tag);
    out[i] = std::move(e);
  };

  if (threads <= 1) {
    for (std::size_t i = 0; i < jobs.size(); ++i) work(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    std::atomic<bool> failed{false};
    std::string error_msg;
    std::mutex error_mu;
    for (int w = 0; w < threads; ++w) {
      pool.emplace_back([&]() {
        for (;;) {
          std::size_t i = next.fetch_add(1);
          if (i >= jobs.size() || failed.load()) return;
          try {
            work(i);
          } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(error_mu);
            failed.store(true);
            error_msg = e.what();
            return;
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (failed.load()) throw Error("extract_features: " + error_msg);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files (JSON lines with a fingerprinted header)
// ---------------------------------------------------------------------------

struct FeatureFileHeader {
  std::string feature_set;
  std::string level;
  std::string split;  // "mi_train" or "mi_test"
  std::string layout;
  std::size_t n_features = 0;
  std::uint64_t seed = 0;
};

inline void save_features(const FeatureFileHeader& h, const std::vector<MIExample>& examples,
                          const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_features: cannot open " + path);
  nlohmann::json header{{"type", "miaudit_features"}, {"feature_set", h.feature_set},
                        {"level", h.level},           {"split", h.split},
                        {"layout", h.layout},         {"n_features", h.n_features},
                        {"seed", h.seed}};
  out << header.dump() << '\n';
  for (const MIExample& e : examples) {
    nlohmann::json j{{"utterance_id", e.utterance_id},
                     {"speaker_id", e.speaker_id},
                     {"label", e.label},
                     {"features", e.features}};
    out << j.dump() << '\n';
  }
}

inline std::pair<FeatureFileHeader, std::vector<MIExample>> load_features(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_features: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw DataError("load_features: " + path + " is empty");
  nlohmann::json hj = nlohmann::json::parse(line, nullptr, false);
  if (hj.is_discarded() || hj.value("type", "") != "miaudit_features")
    throw DataError("load_features: missing feature header in " + path);
  FeatureFileHeader h;
  h.feature_set = hj.at("feature_set").get<std::string>();
  h.level = hj.at("level").get<std::string>();
  h.split = hj.at("split").get<std::string>();
  h.layout = hj.at("layout").get<std::string>();
  h.n_features = hj.at("n_features").get<std::size_t>();
  h.seed = hj.at("seed").get<std::uint64_t>();
  std::vector<MIExample> examples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("load_features: bad JSON line in " + path);
    MIExample e;
    e.utterance_id = j.at("utterance_id").get<std::string>();
    e.speaker_id = j.at("speaker_id").get<std::string>();
    e.label = j.at("label").get<int>();
    e.features = j.at("features").get<std::vector<double>>();
    if (e.features.size() != h.n_features)
      throw DataError("load_features: row width " + std::to_string(e.features.size()) +
                      " != header n_features " + std::to_string(h.n_features));
    e.feature_set = h.feature_set;
    examples.push_back(std::move(e));
  }
  return {h, examples};
}

// ---------------------------------------------------------------------------
// Logits export (MILG): magic "MILG", u16 version, u32 rows, u32 cols,
// rows*cols f32 little-endian log-probabilities. One file per utterance
// and head; the attention head is the teacher-forced decoder output.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kLogitsVersion = 1;

inline void write_logits(const Matrix& m, const std::string& path) {
  std::string out = "MILG";
  detail::write_le<std::uint16_t>(out, kLogitsVersion);
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows));
  detail::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols));
  for (double x : m.v) {
    float f = static_cast<float>(x);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    detail::write_le<std::uint32_t>(out, bits);
  }
  std::ofstream file(path, std::ios::binary);
  if (!file) throw DataError("write_logits: cannot open " + path);
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline Matrix read_logits(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw DataError("read_logits: cannot open " + path);
  std::string data((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  if (data.size() < 4 || data.compare(0, 4, "MILG") != 0)
    throw DataError("read_logits: bad magic at offset 0 in " + path);
  std::size_t off = 4;
  std::uint16_t version = detail::read_le<std::uint16_t>(data, off, "version");
  if (version != kLogitsVersion)
    throw DataError("read_logits: unsupported version " + std::to_string(version) +
                    " at offset 4 in " + path);
  std::uint32_t rows = detail::read_le<std::uint32_t>(data, off, "row count");
  std::uint32_t cols = detail::read_le<std::uint32_t>(data, off, "column count");
  std::size_t expect = 14 + 4ull * rows * cols;
  if (data.size() != expect)
    throw DataError("read_logits: " + path + " has " + std::to_string(data.size()) +
                    " bytes, expected " + std::to_string(expect) + " (offset " +
                    std::to_string(off) + ")");
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.v.size(); ++i) {
    std::uint32_t bits = detail::read_le<std::uint32_t>(data, off, "values");
    float f;
    std::memcpy(&f, &bits, 4);
    m.v[i] = static_cast<double>(f);
  }
  return m;
}

// Exports both heads (plus an n-best sidecar for error features) for every
// listed utterance. The written log-probabilities carry the same binary32
// rounding the feature extractor applies, so grey-box recomputation is
// exact.
inline void export_logits(const ModelTensors& mt, const Corpus& corpus,
                          const std::vector<std::string>& ids, const ExtractionConfig& x,
                          const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  for (const std::string& id : ids) {
    const Utterance& u = corpus.by_id(id);
    ForwardOut out = forward(mt, constant({u.frames.rows, u.frames.cols}, u.frames.v), &u.target);
    Matrix ctc(out.ctc_logprobs.shape[0], out.ctc_logprobs.shape[1]);
    ctc.v = out.ctc_logprobs.data();
    Matrix att(out.dec_logprobs->shape[0], out.dec_logprobs->shape[1]);
    att.v = out.dec_logprobs->data();
    write_logits(ctc, (fs::path(dir) / (id + ".ctc.milg")).string());
    write_logits(att, (fs::path(dir) / (id + ".att.milg")).string());

    std::vector<Hypothesis> hyps = beam_decode(mt, u.frames, x.beam_size, x.top_k);
    std::ofstream nbest((fs::path(dir) / (id + ".nbest.jsonl")).string());
    for (const Hypothesis& h : hyps) {
      nlohmann::json j{{"tokens", h.tokens}, {"log_score", h.log_score}, {"confidence", h.confidence}};
      nbest << j.dump() << '\n';
    }
  }
}

inline std::vector<Hypothesis> read_nbest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("read_nbest: cannot open " + path);
  std::vector<Hypothesis> hyps;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("read_nbest: bad JSON line in " + path);
    Hypothesis h;
    h.tokens = j.at("tokens").get<TokenSeq>();
    h.log_score = j.at("log_score").get<double>();
    h.confidence = j.at("confidence").get<double>();
    hyps.push_back(std::move(h));
  }
  if (hyps.empty()) throw DataError("read_nbest: no hypotheses in " + path);
  return hyps;
}

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

struct CorpusParams {
  std::size_t n_speakers = 40;
  std::size_t utt_per_speaker = 30;
  int vocab_size = 12;
  int frame_dim = 8;
  std::uint64_t seed = 1;
};

struct ExperimentConfig {
  CorpusParams corpus;
  SplitSizes sizes;
  std::uint64_t split_seed = 2;
  ModelConfig target_model;
  std::optional<ModelConfig> shadow_model;  // absent: shadow IS the target
  TrainOptions train_options;               // seed field is ignored; derived per run
  std::vector<MiLevel> levels = {MiLevel::kSample, MiLevel::kSpeaker};
  std::vector<FeatureSet> feature_sets = {FeatureSet::kErrors, FeatureSet::kLosses};
  ExtractionConfig extraction;
  int rf_trees = kForestDefaultTrees;
  std::vector<double> fpr_targets = {0.1, 0.01};
  std::vector<std::uint64_t> seeds = {1};
  std::string out_dir = "out";
  int threads = 1;

  bool cross_model() const { return shadow_model.has_value(); }

  void validate() const {
    target_model.validate();
    if (shadow_model) shadow_model->validate();
    if (levels.empty()) throw ConfigError("config: levels must be nonempty");
    if (feature_sets.empty()) throw ConfigError("config: feature_sets must be nonempty");
    if (seeds.empty()) throw ConfigError("config: seeds must be nonempty");
    {
      std::set<std::uint64_t> distinct(seeds.begin(), seeds.end());
      if (distinct.size() != seeds.size())
        throw ConfigError("config: seeds must be distinct");
    }
    extraction.gaussian.validate();
    extraction.adversarial.validate();
    for (double t : fpr_targets)
      if (!(t > 0.0 && t < 1.0)) throw ConfigError("config: fpr_targets must be in (0,1)");
    if (target_model.input_dim != corpus.frame_dim)
      throw ConfigError("config: target_model.input_dim != corpus.frame_dim");
    if (target_model.vocab_size != corpus.vocab_size)
      throw ConfigError("config: target_model.vocab_size != corpus.vocab_size");
  }
};

inline ExperimentConfig desk_default_config() {
  ExperimentConfig cfg;
  cfg.corpus = CorpusParams{};
  cfg.sizes = SplitSizes{300, 200, 100};
  cfg.target_model.input_dim = cfg.corpus.frame_dim;
  cfg.target_model.vocab_size = cfg.corpus.vocab_size;
  cfg.target_model.hidden_dim = 32;
  cfg.train_options = TrainOptions{30, 0.01, 8, 0};
  return cfg;
}

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json levels = nlohmann::json::array();
  for (MiLevel l : c.levels) levels.push_back(level_name(l));
  nlohmann::json sets = nlohmann::json::array();
  for (FeatureSet s : c.feature_sets) sets.push_back(feature_set_name(s));
  j = nlohmann::json{
      {"corpus",
       {{"n_speakers", c.corpus.n_speakers},
        {"utt_per_speaker", c.corpus.utt_per_speaker},
        {"vocab_size", c.corpus.vocab_size},
        {"frame_dim", c.corpus.frame_dim},
        {"seed", c.corpus.seed}}},
      {"splits",
       {{"asr_train", c.sizes.asr_train},
        {"mi_train_per_class", c.sizes.mi_train_per_class},
        {"mi_test_per_class", c.sizes.mi_test_per_class},
        {"seed", c.split_seed}}},
      {"target_model", c.target_model},
      {"shadow_model", c.shadow_model ? nlohmann::json(*c.shadow_model) : nlohmann::json()},
      {"train", {{"epochs", c.train_options.epochs},
                 {"lr", c.train_options.lr},
                 {"batch_size", c.train_options.batch_size}}},
      {"levels", levels},
      {"feature_sets", sets},
      {"beam_size", c.extraction.beam_size},
      {"top_k", c.extraction.top_k},
      {"gaussian",
       {{"snrs_db", c.extraction.gaussian.snrs_db},
        {"runs_per_snr", c.extraction.gaussian.runs_per_snr}}},
      {"adversarial",
       {{"radii", c.extraction.adversarial.radii},
        {"step_size", c.extraction.adversarial.step_size},
        {"steps", c.extraction.adversarial.steps}}},
      {"rf", {{"n_trees", c.rf_trees}}},
      {"fpr_targets", c.fpr_targets},
      {"seeds", c.seeds},
      {"out_dir", c.out_dir},
      {"threads", c.threads}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  c = ExperimentConfig{};
  if (j.contains("corpus")) {
    const auto& jc = j.at("corpus");
    c.corpus.n_speakers = jc.value("n_speakers", c.corpus.n_speakers);
    c.corpus.utt_per_speaker = jc.value("utt_per_speaker", c.corpus.utt_per_speaker);
    c.corpus.vocab_size = jc.value("vocab_size", c.corpus.vocab_size);
    c.corpus.frame_dim = jc.value("frame_dim", c.corpus.frame_dim);
    c.corpus.seed = jc.value("seed", c.corpus.seed);
  }
  if (j.contains("splits")) {
    const auto& js = j.at("splits");
    c.sizes.asr_train = js.value("asr_train", c.sizes.asr_train);
    c.sizes.mi_train_per_class = js.value("mi_train_per_class", c.sizes.mi_train_per_class);
    c.sizes.mi_test_per_class = js.value("mi_test_per_class", c.sizes.mi_test_per_class);
    c.split_seed = js.value("seed", c.split_seed);
  }
  c.target_model.input_dim = c.corpus.frame_dim;
  c.target_model.vocab_size = c.corpus.vocab_size;
  if (j.contains("target_model")) j.at("target_model").get_to(c.target_model);
  if (j.contains("shadow_model") && !j.at("shadow_model").is_null())
    c.shadow_model = j.at("shadow_model").get<ModelConfig>();
  if (j.contains("train")) {
    const auto& jt = j.at("train");
    c.train_options.epochs = jt.value("epochs", c.train_options.epochs);
    c.train_options.lr = jt.value("lr", c.train_options.lr);
    c.train_options.batch_size = jt.value("batch_size", c.train_options.batch_size);
  }
  if (j.contains("levels")) {
    c.levels.clear();
    for (const auto& l : j.at("levels")) c.levels.push_back(level_from_name(l.get<std::string>()));
  }
  if (j.contains("feature_sets")) {
    c.feature_sets.clear();
    for (const auto& s : j.at("feature_sets"))
      c.feature_sets.push_back(feature_set_from_name(s.get<std::string>()));
  }
  if (j.contains("beam_size")) c.extraction.beam_size = j.at("beam_size").get<std::size_t>();
  if (j.contains("top_k")) c.extraction.top_k = j.at("top_k").get<std::size_t>();
  if (j.contains("gaussian")) {
    const auto& jg = j.at("gaussian");
    if (jg.contains("snrs_db")) jg.at("snrs_db").get_to(c.extraction.gaussian.snrs_db);
    c.extraction.gaussian.runs_per_snr =
        jg.value("runs_per_snr", c.extraction.gaussian.runs_per_snr);
  }
  if (j.contains("adversarial")) {
    const auto& ja = j.at("adversarial");
    if (ja.contains("radii")) ja.at("radii").get_to(c.extraction.adversarial.radii);
    c.extraction.adversarial.step_size =
        ja.value("step_size", c.extraction.adversarial.step_size);
    c.extraction.adversarial.steps = ja.value("steps", c.extraction.adversarial.steps);
  }
  if (j.contains("rf")) c.rf_trees = j.at("rf").value("n_trees", c.rf_trees);
  if (j.contains("fpr_targets")) j.at("fpr_targets").get_to(c.fpr_targets);
  if (j.contains("seeds")) j.at("seeds").get_to(c.seeds);
  if (j.contains("out_dir")) j.at("out_dir").get_to(c.out_dir);
  if (j.contains("threads")) j.at("threads").get_to(c.threads);
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

namespace detail {

// Sub-corpus of the given speakers only.
inline Corpus restrict_corpus(const Corpus& corpus, const std::set<std::string>& speakers) {
  Corpus out;
  out.vocab_size = corpus.vocab_size;
  out.frame_dim = corpus.frame_dim;
  for (const SpeakerProfile& p : corpus.profiles)
    if (speakers.count(p.speaker_id)) out.profiles.push_back(p);
  for (const Utterance& u : corpus.utterances)
    if (speakers.count(u.speaker_id)) out.utterances.push_back(u);
  return out;
}

inline std::vector<TrainItem> items_for(const Corpus& corpus, const std::vector<std::string>& ids) {
  std::vector<TrainItem> items;
  for (const std::string& id : ids) {
    const Utterance& u = corpus.by_id(id);
    items.push_back({u.utterance_id, u.frames, u.target});
  }
  return items;
}

// Shortest decimal form that parses back to the same double, so report
// keys like "0.1" recompute exactly.
inline std::string fpr_key(double t) { return nlohmann::json(t).dump(); }

inline nlohmann::json metrics_to_json(const MetricsReport& m) {
  nlohmann::json tpr = nlohmann::json::object();
  for (const auto& [fpr, v] : m.tpr_at_fpr) tpr[fpr_key(fpr)] = v;
  return nlohmann::json{{"accuracy", m.accuracy}, {"auc", m.auc},      {"tpr_at_fpr", tpr},
                        {"n_pos", m.n_pos},       {"n_neg", m.n_neg}};
}

// The config echoed into reports: operational fields (output path, thread
// count) are not part of experiment identity and are dropped so reruns
// into different directories compare equal.
inline nlohmann::json config_echo(const ExperimentConfig& cfg) {
  nlohmann::json j = cfg;
  j.erase("out_dir");
  j.erase("threads");
  return j;
}

inline std::string iso_timestamp() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

}  // namespace detail

// One (shadow corpus+manifest, target corpus+manifest) pair per level.
struct ExperimentData {
  Corpus corpus;  // full corpus, written to disk for the record
  Corpus target_corpus;
  Corpus shadow_corpus;
  std::map<std::string, SplitManifest> target_splits;  // by level name
  std::map<std::string, SplitManifest> shadow_splits;
};

// Builds corpus and manifests. With a distinct shadow model, speakers are
// partitioned into disjoint target/shadow halves before split
// construction; otherwise shadow shares the target's data and manifests.
inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  ExperimentData data;
  data.corpus = gen_corpus(cfg.corpus.n_speakers, cfg.corpus.utt_per_speaker,
                           cfg.corpus.vocab_size, cfg.corpus.frame_dim, cfg.corpus.seed);
  if (cfg.cross_model()) {
    std::vector<std::string> speakers;
    for (const SpeakerProfile& p : data.corpus.profiles) speakers.push_back(p.speaker_id);
    std::sort(speakers.begin(), speakers.end());
    Rng rng(seed_mix(cfg.split_seed, {fnv1a64("target_shadow_partition")}));
    rng.shuffle(speakers);
    std::size_t half = speakers.size() / 2;
    std::set<std::string> target_side(speakers.begin(), speakers.begin() + static_cast<std::ptrdiff_t>(half));
    std::set<std::string> shadow_side(speakers.begin() + static_cast<std::ptrdiff_t>(half), speakers.end());
    data.target_corpus = detail::restrict_corpus(data.corpus, target_side);
    data.shadow_corpus = detail::restrict_corpus(data.corpus, shadow_side);
  } else {
    data.target_corpus = data.corpus;
    data.shadow_corpus = data.corpus;
  }
  for (MiLevel level : cfg.levels) {
    data.target_splits[level_name(level)] =
        build_splits(data.target_corpus, level, cfg.sizes, seed_mix(cfg.split_seed, {fnv1a64("target")}));
    data.shadow_splits[level_name(level)] =
        cfg.cross_model()
            ? build_splits(data.shadow_corpus, level, cfg.sizes, seed_mix(cfg.split_seed, {fnv1a64("shadow")}))
            : data.target_splits[level_name(level)];
  }
  return data;
}

// Trains (or reuses from the out directory) the checkpoint for a role and
// experiment seed. Training data is the manifest's asr_train, identical
// across levels by construction. The checkpoint is written, reloaded and
// returned, so downstream features always derive from the binary32
// parameters in the file.
inline Checkpoint ensure_model(const ExperimentConfig& cfg, const ExperimentData& data,
                               const std::string& role, std::uint64_t experiment_seed) {
  namespace fs = std::filesystem;
  const bool is_target = role == "target";
  const Corpus& corpus = is_target ? data.target_corpus : data.shadow_corpus;
  const auto& splits = is_target ? data.target_splits : data.shadow_splits;
  const SplitManifest& manifest = splits.begin()->second;
  for (const auto& [name, m] : splits)
    if (m.asr_train != manifest.asr_train)
      throw Error("ensure_model: levels disagree on asr_train");

  ModelConfig mc = cfg.target_model;
  if (!is_target && cfg.shadow_model) mc = *cfg.shadow_model;
  mc.seed = seed_mix(experiment_seed, {fnv1a64(role + "_model")});

  fs::create_directories(cfg.out_dir);
  std::string path =
      (fs::path(cfg.out_dir) / ("ckpt_" + role + "_seed" + std::to_string(experiment_seed) + ".miac"))
          .string();
  if (fs::exists(path)) {
    Checkpoint cached = load_checkpoint(path);
    ModelConfig expect = mc;
    nlohmann::json a = expect, b = cached.config;
    if (a == b) return cached;
    fs::remove(path);
  }
  Checkpoint init = init_model(mc);
  TrainOptions opts = cfg.train_options;
  opts.seed = seed_mix(experiment_seed, {fnv1a64(role + "_train")});
  Checkpoint trained = train(init, detail::items_for(corpus, manifest.asr_train), opts);
  save_checkpoint(trained, path);

  nlohmann::json log{{"role", role},
                     {"seed", experiment_seed},
                     {"epochs", trained.meta.epochs},
                     {"loss_history", trained.meta.loss_history},
                     {"final_loss", trained.meta.final_loss},
                     {"greedy_token_accuracy", trained.meta.greedy_token_accuracy},
                     {"dataset_fingerprint", trained.meta.dataset_fingerprint}};
  std::ofstream(
      (fs::path(cfg.out_dir) / ("train_log_" + role + "_seed" + std::to_string(experiment_seed) + ".json"))
          .string())
      << log.dump(2) << '\n';
  return load_checkpoint(path);
}

// Full experiment: for every seed, train models, extract features, fit the
// forest on shadow-derived training features, score target-derived test
// features; aggregate means and standard deviations across seeds into the
// audit report. Returns the report JSON (also written to out_dir).
inline nlohmann::json run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  ExperimentData data = prepare_data(cfg);
  save_corpus(data.corpus, (fs::path(cfg.out_dir) / "corpus.jsonl").string());
  for (const auto& [lvl, m] : data.target_splits)
    save_splits(m, (fs::path(cfg.out_dir) / ("splits_target_" + lvl + ".json")).string());
  if (cfg.cross_model())
    for (const auto& [lvl, m] : data.shadow_splits)
      save_splits(m, (fs::path(cfg.out_dir) / ("splits_shadow_" + lvl + ".json")).string());

  struct SeedRun {
    std::uint64_t seed;
    MetricsReport metrics;
    std::vector<MIExample> test_examples;
    std::vector<double> scores;
  };
  nlohmann::json results = nlohmann::json::array();

  // Checkpoints per seed are shared across levels and feature sets.
  std::map<std::uint64_t, std::pair<Checkpoint, Checkpoint>> models;  // seed -> (shadow, target)
  for (std::uint64_t seed : cfg.seeds) {
    Checkpoint target = ensure_model(cfg, data, "target", seed);
    Checkpoint shadow = cfg.cross_model() ? ensure_model(cfg, data, "shadow", seed) : target;
    models.emplace(seed, std::make_pair(std::move(shadow), std::move(target)));
  }

  for (MiLevel level : cfg.levels) {
    const std::string lvl = level_name(level);
    const SplitManifest& shadow_split = data.shadow_splits.at(lvl);
    const SplitManifest& target_split = data.target_splits.at(lvl);
    for (FeatureSet tag : cfg.feature_sets) {
      std::vector<SeedRun> runs;
      for (std::uint64_t seed : cfg.seeds) {
        const auto& [shadow_ckpt, target_ckpt] = models.at(seed);
        ExtractionConfig x = cfg.extraction;
        x.gaussian.seed = seed_mix(seed, {fnv1a64("gaussian")});
        x.adversarial.seed = seed_mix(seed, {fnv1a64("adversarial")});

        ModelTensors shadow_mt = model_constants(shadow_ckpt);
        ModelTensors target_mt = model_constants(target_ckpt);
        std::vector<MIExample> train_ex =
            extract_features(shadow_mt, data.shadow_corpus, shadow_split.mi_train_pos,
                             shadow_split.mi_train_neg, tag, x, cfg.threads);
        std::vector<MIExample> test_ex =
            extract_features(target_mt, data.target_corpus, target_split.mi_test_pos,
                             target_split.mi_test_neg, tag, x, cfg.threads);

        std::string layout = layout_fingerprint(tag, x);
        std::string suffix = lvl + "_" + feature_set_slug(tag) + "_seed" + std::to_string(seed);
        save_features({feature_set_name(tag), lvl, "mi_train", layout, feature_width(tag, x), seed},
                      train_ex, (fs::path(cfg.out_dir) / ("features_train_" + suffix + ".jsonl")).string());
        save_features({feature_set_name(tag), lvl, "mi_test", layout, feature_width(tag, x), seed},
                      test_ex, (fs::path(cfg.out_dir) / ("features_test_" + suffix + ".jsonl")).string());

        Forest forest = rf_train(train_ex, cfg.rf_trees,
                                 seed_mix(seed, {fnv1a64("rf"), fnv1a64(lvl), fnv1a64(feature_set_slug(tag))}));
        forest_save(forest, (fs::path(cfg.out_dir) / ("forest_" + suffix + ".mirf")).string());

        SeedRun run;
        run.seed = seed;
        ScoredSet scored;
        for (const MIExample& e : test_ex) {
          run.scores.push_back(rf_score(forest, e.features));
          scored.scores.push_back(run.scores.back());
          scored.labels.push_back(e.label);
        }
        run.metrics = compute_metrics(scored, cfg.fpr_targets, feature_set_name(tag), lvl);
        run.test_examples = std::move(test_ex);

        std::ofstream roc_csv((fs::path(cfg.out_dir) / ("roc_" + suffix + ".csv")).string());
        roc_csv << "fpr,tpr,threshold\n";
        for (const RocPoint& p : run.metrics.roc)
          roc_csv << p.fpr << ',' << p.tpr << ',' << p.threshold << '\n';
        runs.push_back(std::move(run));
      }

      // Aggregate across seeds.
      auto agg = [&](auto getter) {
        double mean = 0.0;
        for (const SeedRun& r : runs) mean += getter(r);
        mean /= static_cast<double>(runs.size());
        if (runs.size() < 2) return std::make_pair(mean, nlohmann::json());
        double var = 0.0;
        for (const SeedRun& r : runs) var += (getter(r) - mean) * (getter(r) - mean);
        return std::make_pair(mean, nlohmann::json(std::sqrt(var / static_cast<double>(runs.size()))));
      };
      nlohmann::json mean_j, std_j;
      auto [acc_m, acc_s] = agg([](const SeedRun& r) { return r.metrics.accuracy; });
      auto [auc_m, auc_s] = agg([](const SeedRun& r) { return r.metrics.auc; });
      mean_j["accuracy"] = acc_m;
      std_j["accuracy"] = acc_s;
      mean_j["auc"] = auc_m;
      std_j["auc"] = auc_s;
      mean_j["tpr_at_fpr"] = nlohmann::json::object();
      std_j["tpr_at_fpr"] = nlohmann::json::object();
      for (double t : cfg.fpr_targets) {
        auto [m, s] = agg([t](const SeedRun& r) { return r.metrics.tpr_at_fpr.at(t); });
        mean_j["tpr_at_fpr"][detail::fpr_key(t)] = m;
        std_j["tpr_at_fpr"][detail::fpr_key(t)] = s;
      }

      nlohmann::json per_seed = nlohmann::json::array();
      for (const SeedRun& r : runs) {
        nlohmann::json scores = nlohmann::json::array();
        std::map<std::string, std::pair<double, int>> by_speaker;
        for (std::size_t i = 0; i < r.test_examples.size(); ++i) {
          const MIExample& e = r.test_examples[i];
          scores.push_back({{"utterance_id", e.utterance_id},
                            {"speaker_id", e.speaker_id},
                            {"label", e.label},
                            {"score", r.scores[i]}});
          auto& acc = by_speaker[e.speaker_id];
          acc.first += r.scores[i];
          acc.second += 1;
        }
        nlohmann::json seed_entry{{"seed", r.seed},
                                  {"metrics", detail::metrics_to_json(r.metrics)},
                                  {"scores", scores}};
        if (level == MiLevel::kSpeaker) {
          // Informational per-speaker mean scores; metrics stay per-utterance.
          nlohmann::json spk = nlohmann::json::object();
          for (const auto& [id, acc] : by_speaker) spk[id] = acc.first / acc.second;
          seed_entry["speaker_mean_scores"] = spk;
        }
        per_seed.push_back(std::move(seed_entry));
      }

      results.push_back(nlohmann::json{{"feature_set", feature_set_name(tag)},
                                       {"level", lvl},
                                       {"n_features", feature_width(tag, cfg.extraction)},
                                       {"layout_fingerprint", layout_fingerprint(tag, cfg.extraction)},
                                       {"mean", mean_j},
                                       {"stddev", runs.size() < 2 ? nlohmann::json() : std_j},
                                       {"per_seed", per_seed}});
    }
  }

  nlohmann::json report{{"tool_version", kToolVersion},
                        {"created_at", detail::iso_timestamp()},
                        {"config", detail::config_echo(cfg)},
                        {"results", results}};
  std::ofstream((fs::path(cfg.out_dir) / "report.json").string()) << report.dump(2) << '\n';
  return report;
}

// ---------------------------------------------------------------------------
// Report utilities
// ---------------------------------------------------------------------------

// Every metric in the report must recompute exactly from its embedded
// per-utterance score table. Throws DataError on any mismatch.
inline void verify_report_metrics(const nlohmann::json& report) {
  for (const auto& result : report.at("results")) {
    for (const auto& seed_entry : result.at("per_seed")) {
      ScoredSet s;
      for (const auto& row : seed_entry.at("scores")) {
        s.scores.push_back(row.at("score").get<double>());
        s.labels.push_back(row.at("label").get<int>());
      }
      const auto& m = seed_entry.at("metrics");
      if (accuracy(s) != m.at("accuracy").get<double>())
        throw DataError("report: accuracy does not recompute from scores");
      if (roc_auc(s).second != m.at("auc").get<double>())
        throw DataError("report: auc does not recompute from scores");
      for (const auto& [key, value] : m.at("tpr_at_fpr").items()) {
        if (tpr_at_fpr(s, std::stod(key)) != value.get<double>())
          throw DataError("report: tpr_at_fpr(" + key + ") does not recompute from scores");
      }
    }
  }
}

// Comparison for determinism checks: everything except creation time.
inline bool reports_equal_ignoring_timestamp(nlohmann::json a, nlohmann::json b) {
  a.erase("created_at");
  b.erase("created_at");
  return a == b;
}

// Plain-text table, one row per (feature set, level).
inline std::string render_report_table(const nlohmann::json& report) {
  std::ostringstream os;
  os << "feature_set        level    accuracy       auc  ";
  std::vector<std::string> tpr_keys;
  if (!report.at("results").empty()) {
    for (const auto& [key, v] : report.at("results")[0].at("mean").at("tpr_at_fpr").items()) {
      tpr_keys.push_back(key);
      os << "tpr@fpr=" << key << "  ";
    }
  }
  os << '\n';
  for (const auto& result : report.at("results")) {
    char line[256];
    std::snprintf(line, sizeof(line), "%-18s %-8s", result.at("feature_set").get<std::string>().c_str(),
                  result.at("level").get<std::string>().c_str());
    os << line;
    auto cell = [&](double mean, const nlohmann::json& stddev) {
      std::ostringstream c;
      c.setf(std::ios::fixed);
      c.precision(3);
      c << mean;
      if (!stddev.is_null()) {
        c << "+-";
        c.precision(3);
        c << stddev.get<double>();
      }
      return c.str();
    };
    const auto& mean = result.at("mean");
    const auto& stddev = result.at("stddev");
    std::snprintf(line, sizeof(line), " %9s %9s ",
                  cell(mean.at("accuracy").get<double>(),
                       stddev.is_null() ? nlohmann::json() : stddev.at("accuracy")).c_str(),
                  cell(mean.at("auc").get<double>(),
                       stddev.is_null() ? nlohmann::json() : stddev.at("auc")).c_str());
    os << line;
    for (const std::string& key : tpr_keys) {
      std::snprintf(line, sizeof(line), " %11s",
                    cell(mean.at("tpr_at_fpr").at(key).get<double>(),
                         stddev.is_null() ? nlohmann::json() : stddev.at("tpr_at_fpr").at(key)).c_str());
      os << line;
    }
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Grey-box audit from exported logits
// ---------------------------------------------------------------------------

// Computes features for one split's ids from logits files. Loss features
// need <id>.ctc.milg and <id>.att.milg; error features need the
// <id>.nbest.jsonl sidecar. Gradient- or model-dependent feature sets are
// rejected: exported outputs are grey-box access, while Gaussian features
// need a model to evaluate perturbed inputs and adversarial features
// additionally need white-box backpropagation.
inline std::vector<MIExample> external_features(const std::string& logits_dir, const Corpus& corpus,
                                                const std::vector<std::string>& pos_ids,
                                                const std::vector<std::string>& neg_ids,
                                                FeatureSet tag, const ExtractionConfig& x,
                                                double label_smoothing) {
  namespace fs = std::filesystem;
  if (uses_adversarial(tag))
    throw AccessError("feature set '" + feature_set_name(tag) +
                      "' needs white-box gradient access; exported logits are grey-box only");
  if (uses_gaussian(tag))
    throw AccessError("feature set '" + feature_set_name(tag) +
                      "' needs model access to evaluate perturbed inputs; exported logits "
                      "provide grey-box outputs for the clean inputs only");

  std::vector<MIExample> out;
  auto emit = [&](const std::vector<std::string>& ids, int label) {
    for (const std::string& id : ids) {
      const Utterance& u = corpus.by_id(id);
      MIExample e;
      e.label = label;
      e.utterance_id = id;
      e.speaker_id = u.speaker_id;
      e.feature_set = feature_set_name(tag);
      if (tag == FeatureSet::kErrors) {
        std::vector<Hypothesis> hyps = read_nbest((fs::path(logits_dir) / (id + ".nbest.jsonl")).string());
        e.features = error_block(u.target, hyps, x.top_k);
      } else {
        Matrix ctc = read_logits((fs::path(logits_dir) / (id + ".ctc.milg")).string());
        Matrix att = read_logits((fs::path(logits_dir) / (id + ".att.milg")).string());
        if (att.rows != u.target.size() + 1)
          throw DataError("external_features: " + id + " attention matrix has " +
                          std::to_string(att.rows) + " rows, target needs " +
                          std::to_string(u.target.size() + 1));
        LossPair lp = loss_pair_from_logprobs(ctc, att, u.target, label_smoothing);
        e.features = {lp.attention_kl, lp.ctc};
      }
      out.push_back(std::move(e));
    }
  };
  emit(pos_ids, 1);
  emit(neg_ids, 0);
  return out;
}

// Grey-box audit: train the forest on logits-derived mi_train features and
// evaluate logits-derived mi_test features.
inline nlohmann::json audit_external(const ExperimentConfig& cfg, const std::string& logits_dir,
                                     const Corpus& corpus, const SplitManifest& split) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  const std::string lvl = level_name(split.level);
  nlohmann::json results = nlohmann::json::array();
  for (FeatureSet tag : cfg.feature_sets) {
    std::vector<MIExample> train_ex =
        external_features(logits_dir, corpus, split.mi_train_pos, split.mi_train_neg, tag,
                          cfg.extraction, cfg.target_model.label_smoothing);
    std::vector<MIExample> test_ex =
        external_features(logits_dir, corpus, split.mi_test_pos, split.mi_test_neg, tag,
                          cfg.extraction, cfg.target_model.label_smoothing);
    std::uint64_t seed = cfg.seeds.front();
    Forest forest = rf_train(train_ex, cfg.rf_trees,
                             seed_mix(seed, {fnv1a64("rf"), fnv1a64(lvl), fnv1a64(feature_set_slug(tag))}));
    ScoredSet scored;
    nlohmann::json scores = nlohmann::json::array();
    for (const MIExample& e : test_ex) {
      double s = rf_score(forest, e.features);
      scored.scores.push_back(s);
      scored.labels.push_back(e.label);
      scores.push_back({{"utterance_id", e.utterance_id},
                        {"speaker_id", e.speaker_id},
                        {"label", e.label},
                        {"score", s}});
    }
    MetricsReport m = compute_metrics(scored, cfg.fpr_targets, feature_set_name(tag), lvl);
    results.push_back(nlohmann::json{
        {"feature_set", feature_set_name(tag)},
        {"level", lvl},
        {"n_features", train_ex.front().features.size()},
        {"mean", detail::metrics_to_json(m)},
        {"stddev", nlohmann::json()},
        {"per_seed", nlohmann::json::array({nlohmann::json{
                         {"seed", seed}, {"metrics", detail::metrics_to_json(m)}, {"scores", scores}}})}});
  }
  nlohmann::json report{{"tool_version", kToolVersion},
                        {"created_at", detail::iso_timestamp()},
                        {"access", "grey-box (external logits)"},
                        {"config", detail::config_echo(cfg)},
                        {"results", results}};
  std::ofstream((fs::path(cfg.out_dir) / "report_external.json").string()) << report.dump(2) << '\n';
  return report;
}

}  // namespace miaudit
