// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Encoder-decoder transformer over identifier tokens, its low-rank domain
// adapters, and a loop-based inference engine.

#pragma once

#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmc/autodiff.hpp"
#include "gmc/corpus.hpp"
#include "gmc/identity.hpp"

namespace gmc::genrec {

using ad::Matrix;

struct Seq2SeqConfig {
  int vocab_size = 0;
  int d_model = 64;
  int heads = 4;
  int d_ff = 256;
  int encoder_layers = 2;
  int decoder_layers = 2;
  int max_input_tokens = 95;
  int max_target_tokens = 6;
  double dropout = 0.1;
  std::uint64_t seed = 17;

  void validate() const;
};

void to_json(nlohmann::json& j, const Seq2SeqConfig& c);
void from_json(const nlohmann::json& j, Seq2SeqConfig& c);

struct LoraConfig {
  int rank = 8;
  double alpha = 16.0;
  std::uint64_t seed = 23;

  double scale() const { return alpha / static_cast<double>(rank); }
};

void to_json(nlohmann::json& j, const LoraConfig& c);
void from_json(const nlohmann::json& j, LoraConfig& c);

struct Attention {
  ad::Parameter q, k, v, o;  // d_model x d_model, no bias
};

struct FeedForward {
  ad::Parameter w1, b1, w2, b2;
};

struct Norm {
  ad::Parameter gamma, beta;
};

struct EncoderLayer {
  Norm ln1, ln2;
  Attention attn;
  FeedForward ff;
};

struct DecoderLayer {
  Norm ln1, ln2, ln3;
  Attention self_attn, cross_attn;
  FeedForward ff;
};

class Seq2SeqModel {
 public:
  Seq2SeqConfig config;
  ad::Parameter embedding;  // vocab x d_model, shared by encoder and decoder inputs
  ad::Parameter enc_pos;
  ad::Parameter dec_pos;
  std::vector<EncoderLayer> encoder;
  std::vector<DecoderLayer> decoder;
  Norm enc_final, dec_final;
  ad::Parameter head_w;  // d_model x vocab
  ad::Parameter head_b;

  static Seq2SeqModel create(const Seq2SeqConfig& config);

  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Parameter*> parameters() const;
  long parameter_count() const;
  std::string checksum() const;

  // Attention projections that carry adapters, in a fixed order: per
  // encoder layer q,k,v,o; per decoder layer self q,k,v,o then cross q,k,v,o.
  std::vector<const ad::Parameter*> adapter_sites() const;
};

// Low-rank deltas W + scale * A^T B^T for every adapter site.
struct AdapterSet {
  LoraConfig config;
  int domain = -1;
  std::vector<ad::Parameter> a;  // rank x in, random
  std::vector<ad::Parameter> b;  // out x rank, zero

  static AdapterSet create(const Seq2SeqModel& model, const LoraConfig& config, int domain);
  std::vector<ad::Parameter*> parameters();
  long parameter_count() const;
  std::string checksum() const;
};

// One (history, next item) pair in token form. `target` ends with the end
// token.
struct Example {
  std::vector<int> input;
  std::vector<int> target;
  int domain = 0;
  int target_item = -1;
};

struct TokenizeOptions {
  bool item_separator = false;  // insert the begin token between history items
};

// History items oldest to newest; the oldest whole items are dropped first
// when the budget is exceeded.
std::vector<int> history_tokens(std::span<const int> history, const identity::Assignment& ids,
                                const identity::TokenVocabulary& vocab, int max_tokens,
                                const TokenizeOptions& options = {});
std::vector<int> target_tokens(int item, const identity::Assignment& ids, const identity::TokenVocabulary& vocab);
std::vector<Example> make_examples(std::span<const corpus::Pair> pairs, const identity::Assignment& ids,
                                   const identity::TokenVocabulary& vocab, int max_input_tokens,
                                   const TokenizeOptions& options = {});

// Throws DataError if any token is outside the vocabulary or a sequence is
// longer than the model accepts.
void validate_example(const Example& ex, const Seq2SeqConfig& config);

struct ForwardMode {
  bool grad_backbone = false;
  bool grad_adapters = false;
  Rng* dropout_rng = nullptr;  // null disables dropout
};

// Teacher-forced decoder logits for every target position of every example,
// packed in order. Parameters read through `model`/`adapters` only receive
// gradient when the mode asks for it.
ad::Var teacher_forced_logits(ad::Tape& tape, const Seq2SeqModel& model, const AdapterSet* adapters,
                              std::span<const Example* const> batch, const ForwardMode& mode);
// Mean token cross-entropy over the batch.
ad::Var sequence_loss(ad::Tape& tape, const Seq2SeqModel& model, const AdapterSet* adapters,
                      std::span<const Example* const> batch, const ForwardMode& mode);

// Deterministic evaluation-mode engine. Adapters are merged into the
// projection weights at construction; each query is computed with the same
// loops regardless of what else is being decoded, so scores are
// reproducible bit for bit.
class InferenceSession {
 public:
  explicit InferenceSession(const Seq2SeqModel& model, const AdapterSet* adapters = nullptr);

  struct Memory {
    std::vector<Matrix> k;  // per decoder layer, cross-attention keys
    std::vector<Matrix> v;
  };
  struct DecoderState {
    std::vector<Matrix> k;  // per decoder layer, rows 0..length-1 valid
    std::vector<Matrix> v;
    int length = 0;
  };

  Memory encode(std::span<const int> input) const;
  DecoderState start() const;
  // Feeds `token` at the next decoder position and returns log-probabilities
  // over the vocabulary.
  Eigen::VectorXd step(const Memory& memory, DecoderState& state, int token) const;
  // Sum of log P(target_l | input, target_<l), starting from the begin token.
  double score_sequence(std::span<const int> input, std::span<const int> target) const;

  int vocab_size() const { return config_.vocab_size; }
  const Seq2SeqConfig& config() const { return config_; }

 private:
  struct Layer {
    Eigen::VectorXd ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    Matrix q, k, v, o, cq, ck, cv, co;
    Matrix w1, w2;
    Eigen::VectorXd b1, b2;
  };

  Eigen::VectorXd decoder_hidden(const Memory& memory, DecoderState& state, int token) const;

  Seq2SeqConfig config_;
  Matrix embedding_, enc_pos_, dec_pos_, head_w_;
  Eigen::VectorXd head_b_, enc_final_g_, enc_final_b_, dec_final_g_, dec_final_b_;
  std::vector<Layer> enc_;
  std::vector<Layer> dec_;
};

struct TrainOptions {
  int epochs = 40;
  int batch_size = 64;
  double learning_rate = 2e-3;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int eval_every = 1;
  int patience = 0;  // evaluations without improvement before stopping; 0 = never
  std::uint64_t seed = 29;
};

void to_json(nlohmann::json& j, const TrainOptions& o);
void from_json(const nlohmann::json& j, TrainOptions& o);

struct EpochRecord {
  int epoch = 0;
  double loss = 0.0;
  bool evaluated = false;
  double valid = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  double initial_score = std::numeric_limits<double>::quiet_NaN();
  double best_score = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;  // -1: the starting parameters were kept
  long steps = 0;
  std::string jsonl() const;
};

// Validation score of a model (higher is better).
using Validator = std::function<double(const Seq2SeqModel&, const AdapterSet*)>;

// Trains every parameter of `model` on the pooled examples; keeps the
// parameters with the best validation score when a validator is given.
TrainLog train_unified(Seq2SeqModel& model, std::span<const Example> examples, const TrainOptions& options,
                       const Validator& validator);

struct FineTuneResult {
  AdapterSet adapters;
  TrainLog log;
};

// Trains only a fresh adapter set; the backbone is read-only. Starts from the
// zero-delta adapters' validation score and keeps them unless a later epoch
// is strictly better.
FineTuneResult finetune_domain(const Seq2SeqModel& backbone, int domain, std::span<const Example> examples,
                               const LoraConfig& lora, const TrainOptions& options, const Validator& validator);

struct FullFineTuneResult {
  Seq2SeqModel model;
  TrainLog log;
};

// Copies the backbone and trains all of its parameters on one domain.
FullFineTuneResult full_finetune_domain(const Seq2SeqModel& backbone, std::span<const Example> examples,
                                        const TrainOptions& options, const Validator& validator);

void save_model(const std::filesystem::path& path, const Seq2SeqModel& model);
Seq2SeqModel load_model(const std::filesystem::path& path);
void save_adapters(const std::filesystem::path& path, const AdapterSet& adapters);
AdapterSet load_adapters(const std::filesystem::path& path, const Seq2SeqModel& model);

}  // namespace gmc::genrec
