// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration, content-addressed pipeline stages, and ablation presets.

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmc/corpus.hpp"
#include "gmc/decode.hpp"
#include "gmc/eval.hpp"
#include "gmc/genrec.hpp"
#include "gmc/identity.hpp"
#include "gmc/tokenizer.hpp"

namespace gmc::pipeline {

enum class FinetuneMode { kNone, kLora, kFull };

struct FileDomain {
  std::string name;
  std::filesystem::path metadata;
  std::filesystem::path interactions;
};

struct DataConfig {
  std::string source = "synthetic";  // synthetic | files
  corpus::SyntheticSpec synthetic;
  std::vector<FileDomain> files;
  int k_core = 5;
  int max_len = 20;
  corpus::TrainExpansion expansion = corpus::TrainExpansion::kAllPrefixes;
  std::string text_separator = " ";
};

struct EmbedConfig {
  std::string provider = "hash";  // hash | remote
  int dim = 64;
  double text_noise = 0.2;
  bool standardize = false;
  std::string cache_file;  // remote only; empty disables the persistent cache
  int batch_limit = 32;
  int max_attempts = 4;
  int parallelism = 2;
};

struct AblationConfig {
  bool shared_codebook = true;
  bool unified_recommender = true;
  bool dcl = true;
  FinetuneMode finetune = FinetuneMode::kLora;
};

struct DecodeConfig {
  int beam_size = 20;
  decode::ScoreMode score_mode = decode::ScoreMode::kModel;
};

struct EvalConfig {
  std::vector<int> cutoffs = {5, 10};
  std::vector<int> overlap_k = {10, 20};
  eval::Distance distance = eval::Distance::kEuclidean;
  int top_codes = 100;
  int validation_users = 0;  // per domain during training; 0 = all
};

struct RunConfig {
  std::string name = "default";
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "gmc_run";
  int workers = 1;
  DataConfig data;
  EmbedConfig embed;
  tokenizer::QuantizerConfig quantizer;
  int disamb_cap = 16;
  genrec::TokenizeOptions tokenize;
  genrec::Seq2SeqConfig model;
  genrec::TrainOptions train;
  genrec::LoraConfig lora;
  genrec::TrainOptions finetune;
  DecodeConfig decode;
  EvalConfig eval;
  AblationConfig ablation;

  RunConfig();
  void validate() const;
  // Hash of everything that influences results (name, output_dir and
  // workers excluded).
  std::string hash() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
// "a.b.c=value"; value is parsed as JSON, falling back to a string.
void apply_override(RunConfig& config, const std::string& assignment);

enum class Stage { kCorpus, kEmbed, kTokenize, kAssign, kTrain, kFinetune, kDecode, kEvaluate, kAnalyze };

const std::vector<Stage>& all_stages();
std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

struct StageRecord {
  Stage stage = Stage::kCorpus;
  std::string hash;
  std::filesystem::path dir;
  double seconds = 0.0;
  bool skipped = false;
};

struct AnalysisResult {
  std::vector<double> purity;  // per level
  eval::OverlapReport overlap;
};

class Pipeline {
 public:
  explicit Pipeline(RunConfig config);

  const RunConfig& config() const { return config_; }

  // Runs one stage; a stage whose artifacts already exist for the current
  // configuration is skipped. Throws DependencyError when an upstream stage
  // has not been run for this configuration.
  StageRecord run(Stage stage);
  std::vector<StageRecord> run_through(Stage last);

  std::string stage_hash(Stage stage) const;
  std::filesystem::path stage_dir(Stage stage) const;
  bool complete(Stage stage) const;

  eval::MetricReport metrics() const;
  AnalysisResult analysis() const;

  // Histories in a line file ("domain<TAB>item_id item_id ...") decoded with
  // the domain's final model; writes one JSON line of ranked items each.
  void decode_file(const std::filesystem::path& input, const std::filesystem::path& output) const;

 private:
  void run_corpus(const std::filesystem::path& dir);
  void run_embed(const std::filesystem::path& dir);
  void run_tokenize(const std::filesystem::path& dir);
  void run_assign(const std::filesystem::path& dir);
  void run_train(const std::filesystem::path& dir);
  void run_finetune(const std::filesystem::path& dir);
  void run_decode(const std::filesystem::path& dir);
  void run_evaluate(const std::filesystem::path& dir);
  void run_analyze(const std::filesystem::path& dir);

  void require(Stage upstream) const;
  void write_manifest(const StageRecord& record) const;

  RunConfig config_;
};

// Ablation presets: default, wo-shared-codebook, wo-unified, wo-dcl,
// wo-finetune, full-finetune. Names are matched case-insensitively with
// "w/o" accepted for "wo" and spaces or underscores for hyphens.
std::vector<std::string> ablation_presets();
std::string canonical_preset(const std::string& name);
RunConfig apply_preset(const RunConfig& base, const std::string& preset);

struct AblationReport {
  eval::MetricReport base;
  eval::MetricReport variant;
  std::string table() const;  // side by side with relative differences
  std::string jsonl() const;
};

AblationReport run_ablation(const RunConfig& base, const std::string& preset);

}  // namespace gmc::pipeline
