// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmc/autodiff.hpp"
#include "gmc/common.hpp"

namespace gmc::embed {

struct SemanticEmbedding {
  std::vector<double> vector;
  std::string provider_id;
};

// Raised when a remote batch keeps failing after all retries.
class ProviderError : public Error {
 public:
  ProviderError(const std::string& message, std::vector<int> failed_indices)
      : Error(ErrorKind::kProvider, message), failed_indices_(std::move(failed_indices)) {}
  const std::vector<int>& failed_indices() const { return failed_indices_; }

 private:
  std::vector<int> failed_indices_;
};

// Lowercased alphanumeric tokens.
std::vector<std::string> tokenize_text(const std::string& text);

// Deterministic test embedder. The vector mixes a bag of per-token Gaussian
// vectors (texts sharing tokens end up close) with a Gaussian vector seeded by
// the whole normalized text. Both generators are seeded from SHA-256.
struct HashEmbedderConfig {
  int dim = 64;
  double text_noise = 0.2;  // weight of the whole-text component, in [0, 1]
};

std::string hash_provider_id(const HashEmbedderConfig& config);

SemanticEmbedding hash_embed(const std::string& text, const HashEmbedderConfig& config);
inline SemanticEmbedding hash_embed(const std::string& text, int dim) {
  return hash_embed(text, HashEmbedderConfig{dim, 0.2});
}

// One row per text.
ad::Matrix hash_embed_matrix(std::span<const std::string> texts, const HashEmbedderConfig& config);

// (provider id, text hash) -> vector. Optionally backed by an append-only
// binary file of records: 32-byte key, uint32 dim, dim float64 values.
// Safe for concurrent use.
class EmbeddingCache {
 public:
  EmbeddingCache() = default;
  explicit EmbeddingCache(std::filesystem::path file);

  std::optional<std::vector<double>> get(const std::string& provider_id, const std::string& text) const;
  void put(const std::string& provider_id, const std::string& text, const std::vector<double>& vector);
  std::size_t size() const;

 private:
  static Digest key(const std::string& provider_id, const std::string& text);

  mutable std::mutex mu_;
  std::map<Digest, std::vector<double>> entries_;
  std::optional<std::filesystem::path> file_;
};

// JSON batch client: POST {"texts": [...]} -> {"embeddings": [[...], ...]}.
struct RemoteEndpointConfig {
  std::string url;      // http://host:port/path
  std::string token;    // sent as a bearer token when non-empty
  int declared_dim = 4096;
  int batch_limit = 32;
  int max_attempts = 4;
  int initial_backoff_ms = 200;
  int parallelism = 2;
  int timeout_seconds = 60;
  std::string provider_id = "remote";

  // GMC_EMBED_ENDPOINT and GMC_EMBED_TOKEN.
  static RemoteEndpointConfig from_env(int declared_dim);
};

class RemoteEmbedder {
 public:
  RemoteEmbedder(RemoteEndpointConfig config, EmbeddingCache* cache);

  // One vector per text, in input order. Cached texts are not sent.
  std::vector<SemanticEmbedding> embed(std::span<const std::string> texts);

  int requests_sent() const { return requests_sent_; }

 private:
  std::vector<std::vector<double>> post_batch(const std::vector<std::string>& texts,
                                              const std::vector<int>& indices);

  RemoteEndpointConfig config_;
  EmbeddingCache* cache_;
  std::string host_;
  std::string path_;
  std::mutex mu_;
  int requests_sent_ = 0;
};

// Per-dimension zero mean / unit variance over rows, in place.
void standardize(ad::Matrix& embeddings);

}  // namespace gmc::embed
