// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Residual-quantized autoencoder that maps item embeddings to L-level codes.

#pragma once

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmc/autodiff.hpp"
#include "gmc/common.hpp"

namespace gmc::tokenizer {

using ad::Matrix;

struct QuantizerConfig {
  int input_dim = 64;    // D
  int latent_dim = 16;   // d
  int levels = 4;        // L
  int codebook_size = 32;  // N
  double beta = 0.25;
  std::vector<int> hidden = {128, 64};  // encoder widths; the decoder mirrors them
  bool dcl_enabled = true;
  int dcl_warmup_epochs = 0;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 256;
  int epochs = 500;
  bool kmeans_init = true;
  int kmeans_iterations = 25;
  bool reseed_dead_codes = true;
  std::uint64_t seed = 7;

  // Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const QuantizerConfig& c);
void from_json(const nlohmann::json& j, QuantizerConfig& c);

// Fully connected ReLU network; no activation after the last layer.
struct Mlp {
  std::vector<ad::Parameter> weights;  // in x out
  std::vector<ad::Parameter> biases;   // 1 x out

  static Mlp create(const std::string& prefix, const std::vector<int>& widths, Rng& rng);
  ad::Var forward(ad::Tape& tape, ad::Var x);
  Matrix apply(const Matrix& x) const;
  int input_dim() const { return static_cast<int>(weights.front().value.rows()); }
  int output_dim() const { return static_cast<int>(weights.back().value.cols()); }
};

struct QuantizerState {
  QuantizerConfig config;
  Mlp encoder;
  Mlp decoder;
  std::vector<ad::Parameter> codebooks;  // L tensors of N x d

  static QuantizerState create(const QuantizerConfig& config, Rng& rng);
  std::vector<ad::Parameter*> parameters();
  std::vector<const ad::Matrix*> tensors() const;
};

struct QuantizationResult {
  std::vector<int> codes;
  Eigen::VectorXd quantized;
  std::vector<Eigen::VectorXd> residuals;  // r_0 = z, ..., r_L
};

// Latent for one embedding, or for every row of a batch. Rejects non-finite
// input and wrong widths with DataError.
Eigen::VectorXd encode(const Eigen::VectorXd& x, const QuantizerState& state);
Matrix encode_batch(const Matrix& x, const QuantizerState& state);

// Index of the nearest row of `codebook` to `r` by squared Euclidean
// distance; the lowest index wins ties.
int nearest_code(const Eigen::Ref<const Eigen::RowVectorXd>& r, const Matrix& codebook);

QuantizationResult residual_quantize(const Eigen::VectorXd& z, std::span<const Matrix> codebooks);
QuantizationResult residual_quantize(const Eigen::VectorXd& z, const QuantizerState& state);

// Codes for every row of `x` (n x L).
std::vector<std::vector<int>> quantize_items(const Matrix& x, const QuantizerState& state);

struct LossGraph {
  ad::Var recon;       // mean over the batch of ||x - x_hat||^2
  ad::Var codebook;    // mean of sum_l ||sg[r_{l-1}] - e_l||^2
  ad::Var commitment;  // mean of beta * sum_l ||r_{l-1} - sg[e_l]||^2
  ad::Var rq;          // codebook + commitment
  ad::Var dcl;         // valid only when has_dcl
  ad::Var total;
  bool has_dcl = false;
  std::vector<std::vector<int>> codes;  // per row
  Matrix latent;                        // z
  Matrix quantized;                     // z_hat
  std::vector<Matrix> residual_inputs;  // r_{l-1} per level, B x d
};

// Builds all loss terms for a batch on `tape`. `domains` is required when
// `with_dcl` is set.
LossGraph build_losses(ad::Tape& tape, QuantizerState& state, const Matrix& x, std::span<const int> domains,
                       bool with_dcl);

struct RqLosses {
  double recon = 0.0;
  double rq = 0.0;
};
RqLosses rqvae_losses(const Matrix& x, const QuantizerState& state);

// Contrastive loss over a batch of quantized latents; B < 2 throws DataError.
double dcl_loss(const Matrix& quantized, std::span<const int> domains);

// k-means++ seeded Lloyd iterations. Returns k x cols centers. With fewer
// distinct points than k the remaining centers are jittered copies.
Matrix kmeans(const Matrix& points, int k, int iterations, Rng& rng);

struct EpochLog {
  int epoch = 0;
  double recon = 0.0;
  double rq = 0.0;
  double dcl = 0.0;
  double total = 0.0;
  bool dcl_active = false;
  std::vector<double> utilization;  // fraction of codes used, per level
  int reseeded = 0;
};

struct StepLog {
  double recon = 0.0;
  double rq = 0.0;
  double dcl = 0.0;
  double total = 0.0;
};

struct TrainedQuantizer {
  QuantizerState state;
  std::vector<EpochLog> epochs;
  std::vector<StepLog> steps;
};

// Trains on the rows of `x` with their domain labels. Throws TrainingError
// if any loss becomes non-finite.
TrainedQuantizer train_quantizer(const Matrix& x, std::span<const int> domains, const QuantizerConfig& config);

void save_quantizer(const std::filesystem::path& path, const QuantizerState& state);
QuantizerState load_quantizer(const std::filesystem::path& path);
std::string training_log_jsonl(const std::vector<EpochLog>& log);

}  // namespace gmc::tokenizer
