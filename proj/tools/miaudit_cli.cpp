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
// Command-line front end.
//
//   miaudit synth          generate corpus + split manifests
//   miaudit train-asr      train the target or shadow recognizer
//   miaudit extract        extract membership features to a file
//   miaudit train-mi       fit the forest on a feature file
//   miaudit evaluate       full multi-seed experiment -> audit report
//   miaudit audit-external grey-box audit from exported logits
//   miaudit report         render an audit report as a table
//
// Exit codes: 0 success, 2 config error, 3 data/format error,
// 4 numerical failure.

#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "miaudit/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace miaudit;

ExperimentConfig load_config(const std::string& config_path, std::uint64_t seed_override,
                             const std::string& out_dir_override, int threads_override) {
  ExperimentConfig cfg = desk_default_config();
  if (!config_path.empty()) {
    std::ifstream in(config_path);
    if (!in) throw ConfigError("cannot open config file " + config_path);
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + config_path + " is not valid JSON");
    cfg = j.get<ExperimentConfig>();
  }
  if (seed_override != 0) cfg.seeds = {seed_override};
  if (!out_dir_override.empty()) cfg.out_dir = out_dir_override;
  if (threads_override > 0) cfg.threads = threads_override;
  cfg.validate();
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"membership-inference audit toolkit for desk-scale speech recognizers"};
  app.require_subcommand(1);

  std::string config_path, out_dir_flag;
  std::uint64_t seed_flag = 0;
  int threads_flag = 0;
  app.add_option("--config", config_path, "experiment config JSON");
  app.add_option("--seed", seed_flag, "override: run a single experiment seed");
  app.add_option("--out-dir", out_dir_flag, "override: output directory");
  app.add_option("--threads", threads_flag, "override: extraction worker threads");

  auto* synth = app.add_subcommand("synth", "generate corpus and split manifests");

  auto* train_asr = app.add_subcommand("train-asr", "train a recognizer");
  std::string role = "target";
  train_asr->add_option("--role", role, "target|shadow")->check(CLI::IsMember({"target", "shadow"}));

  auto* extract = app.add_subcommand("extract", "extract membership features");
  std::string model_path, split_name = "mi_test", level_str = "sample", tag_str = "losses";
  std::string features_out, emit_logits_dir;
  extract->add_option("--model", model_path, "checkpoint path (.miac)")->required();
  extract->add_option("--split", split_name, "mi_train|mi_test")
      ->check(CLI::IsMember({"mi_train", "mi_test"}));
  extract->add_option("--level", level_str, "sample|speaker");
  extract->add_option("--tag", tag_str, "feature set tag");
  extract->add_option("--features-out", features_out, "output feature file (JSONL)");
  extract->add_option("--emit-logits", emit_logits_dir,
                      "also export per-utterance MILG logits + n-best sidecars here");

  auto* train_mi = app.add_subcommand("train-mi", "fit the forest on a feature file");
  std::string train_features, forest_out;
  train_mi->add_option("--features", train_features, "training feature file")->required();
  train_mi->add_option("--forest-out", forest_out, "output forest file (.mirf)");

  auto* evaluate = app.add_subcommand("evaluate", "run the full experiment and emit the report");

  auto* audit_ext = app.add_subcommand("audit-external", "grey-box audit from exported logits");
  std::string logits_dir, corpus_path, split_path;
  audit_ext->add_option("--logits-dir", logits_dir, "directory of MILG files")->required();
  audit_ext->add_option("--corpus", corpus_path, "corpus manifest (JSONL)")->required();
  audit_ext->add_option("--split", split_path, "split manifest (JSON)")->required();

  auto* report_cmd = app.add_subcommand("report", "render an audit report as a table");
  std::string report_path;
  report_cmd->add_option("--report", report_path, "report JSON path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  ExperimentConfig cfg = load_config(config_path, seed_flag, out_dir_flag, threads_flag);
  fs::create_directories(cfg.out_dir);

  if (*synth) {
    ExperimentData data = prepare_data(cfg);
    std::string corpus_file = (fs::path(cfg.out_dir) / "corpus.jsonl").string();
    save_corpus(data.corpus, corpus_file);
    std::cout << "corpus " << corpus_file << " fingerprint " << corpus_fingerprint(data.corpus)
              << "\n";
    for (const auto& [lvl, m] : data.target_splits) {
      std::string path = (fs::path(cfg.out_dir) / ("splits_target_" + lvl + ".json")).string();
      save_splits(m, path);
      std::cout << "split " << path << " fingerprint " << m.fingerprint << "\n";
    }
    if (cfg.cross_model()) {
      for (const auto& [lvl, m] : data.shadow_splits) {
        std::string path = (fs::path(cfg.out_dir) / ("splits_shadow_" + lvl + ".json")).string();
        save_splits(m, path);
        std::cout << "split " << path << " fingerprint " << m.fingerprint << "\n";
      }
    }
    return 0;
  }

  if (*train_asr) {
    ExperimentData data = prepare_data(cfg);
    for (std::uint64_t seed : cfg.seeds) {
      Checkpoint ckpt = ensure_model(cfg, data, role, seed);
      std::cout << "checkpoint ckpt_" << role << "_seed" << seed << ".miac final_loss "
                << ckpt.meta.final_loss << " greedy_token_accuracy "
                << ckpt.meta.greedy_token_accuracy << "\n";
    }
    return 0;
  }

  if (*extract) {
    ExperimentData data = prepare_data(cfg);
    MiLevel level = level_from_name(level_str);
    FeatureSet tag = feature_set_from_name(tag_str);
    Checkpoint ckpt = load_checkpoint(model_path);
    ModelTensors mt = model_constants(ckpt);
    const SplitManifest& split = data.target_splits.at(level_name(level));
    const auto& pos = split_name == "mi_train" ? split.mi_train_pos : split.mi_test_pos;
    const auto& neg = split_name == "mi_train" ? split.mi_train_neg : split.mi_test_neg;

    ExtractionConfig x = cfg.extraction;
    std::uint64_t seed = cfg.seeds.front();
    x.gaussian.seed = seed_mix(seed, {fnv1a64("gaussian")});
    x.adversarial.seed = seed_mix(seed, {fnv1a64("adversarial")});
    std::vector<MIExample> examples =
        extract_features(mt, data.target_corpus, pos, neg, tag, x, cfg.threads);

    std::string path = features_out.empty()
                           ? (fs::path(cfg.out_dir) / ("features_" + split_name + "_" +
                                                       level_name(level) + "_" +
                                                       feature_set_slug(tag) + ".jsonl"))
                                 .string()
                           : features_out;
    save_features({feature_set_name(tag), level_name(level), split_name,
                   layout_fingerprint(tag, x), feature_width(tag, x), seed},
                  examples, path);
    std::cout << "features " << path << " rows " << examples.size() << " width "
              << feature_width(tag, x) << "\n";
    if (!emit_logits_dir.empty()) {
      std::vector<std::string> ids = pos;
      ids.insert(ids.end(), neg.begin(), neg.end());
      export_logits(mt, data.target_corpus, ids, x, emit_logits_dir);
      std::cout << "logits exported to " << emit_logits_dir << "\n";
    }
    return 0;
  }

  if (*train_mi) {
    auto [header, examples] = load_features(train_features);
    Forest forest = rf_train(examples, cfg.rf_trees,
                             seed_mix(cfg.seeds.front(),
                                      {fnv1a64("rf"), fnv1a64(header.level),
                                       fnv1a64(feature_set_slug(feature_set_from_name(header.feature_set)))}));
    std::string path = forest_out.empty()
                           ? (fs::path(cfg.out_dir) / "forest.mirf").string()
                           : forest_out;
    forest_save(forest, path);
    std::cout << "forest " << path << " trees " << forest.trees.size() << " n_features "
              << forest.n_features << "\n";
    return 0;
  }

  if (*evaluate) {
    nlohmann::json report = run_experiment(cfg);
    verify_report_metrics(report);
    std::cout << render_report_table(report);
    std::cout << "report " << (fs::path(cfg.out_dir) / "report.json").string() << "\n";
    return 0;
  }

  if (*audit_ext) {
    Corpus corpus = load_corpus(corpus_path);
    SplitManifest split = load_splits(split_path);
    nlohmann::json report = audit_external(cfg, logits_dir, corpus, split);
    verify_report_metrics(report);
    std::cout << render_report_table(report);
    std::cout << "report " << (fs::path(cfg.out_dir) / "report_external.json").string() << "\n";
    return 0;
  }

  if (*report_cmd) {
    std::ifstream in(report_path);
    if (!in) throw DataError("cannot open report " + report_path);
    nlohmann::json report = nlohmann::json::parse(in, nullptr, false);
    if (report.is_discarded()) throw DataError("report " + report_path + " is not valid JSON");
    verify_report_metrics(report);
    std::cout << render_report_table(report);
    return 0;
  }

  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const miaudit::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const miaudit::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const miaudit::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
