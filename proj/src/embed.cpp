// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/embed.hpp"

#include <httplib.h>
#include <json.hpp>

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <future>
#include <thread>

namespace gmc::embed {

using nlohmann::json;

std::vector<std::string> tokenize_text(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      cur.push_back(static_cast<char>(std::tolower(c)));
    } else if (!cur.empty()) {
      tokens.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(std::move(cur));
  return tokens;
}

namespace {

Eigen::VectorXd seeded_gaussian(const std::string& label, int dim) {
  Digest d = sha256(label);
  std::uint64_t seed = 0;
  std::memcpy(&seed, d.data(), sizeof(seed));
  Rng rng(seed);
  Eigen::VectorXd v(dim);
  for (int i = 0; i < dim; ++i) v(i) = standard_normal(rng);
  return v;
}

}  // namespace

std::string hash_provider_id(const HashEmbedderConfig& config) {
  char buf[96];
  std::snprintf(buf, sizeof(buf), "hash-v1:dim=%d:noise=%.4f", config.dim, config.text_noise);
  return buf;
}

SemanticEmbedding hash_embed(const std::string& text, const HashEmbedderConfig& config) {
  if (config.dim < 1) throw ConfigError("embedding dimension must be >= 1");
  if (config.text_noise < 0.0 || config.text_noise > 1.0) throw ConfigError("text_noise must be in [0, 1]");
  std::vector<std::string> tokens = tokenize_text(text);
  if (tokens.empty()) throw DataError("cannot embed empty text");
  std::string normalized;
  for (const auto& t : tokens) {
    if (!normalized.empty()) normalized.push_back(' ');
    normalized += t;
  }
  const int dim = config.dim;
  Eigen::VectorXd bag = Eigen::VectorXd::Zero(dim);
  for (const auto& t : tokens) bag += seeded_gaussian("tok:" + t, dim);
  Eigen::VectorXd noise = seeded_gaussian("text:" + normalized, dim);
  const double root = std::sqrt(static_cast<double>(dim));
  Eigen::VectorXd v = (1.0 - config.text_noise) * bag.normalized() + config.text_noise * noise.normalized();
  v *= root;
  SemanticEmbedding out;
  out.vector.assign(v.data(), v.data() + dim);
  out.provider_id = hash_provider_id(config);
  return out;
}

ad::Matrix hash_embed_matrix(std::span<const std::string> texts, const HashEmbedderConfig& config) {
  ad::Matrix out(static_cast<Eigen::Index>(texts.size()), config.dim);
  for (std::size_t i = 0; i < texts.size(); ++i) {
    SemanticEmbedding e = hash_embed(texts[i], config);
    for (int j = 0; j < config.dim; ++j) out(static_cast<Eigen::Index>(i), j) = e.vector[static_cast<std::size_t>(j)];
  }
  return out;
}

EmbeddingCache::EmbeddingCache(std::filesystem::path file) : file_(std::move(file)) {
  std::ifstream in(*file_, std::ios::binary);
  if (!in) return;
  while (true) {
    Digest k{};
    std::uint32_t dim = 0;
    if (!in.read(reinterpret_cast<char*>(k.data()), static_cast<std::streamsize>(k.size()))) break;
    if (!in.read(reinterpret_cast<char*>(&dim), sizeof(dim))) break;
    std::vector<double> v(dim);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(dim * sizeof(double)))) break;
    entries_[k] = std::move(v);
  }
}

Digest EmbeddingCache::key(const std::string& provider_id, const std::string& text) {
  std::string buf = provider_id;
  buf.push_back('\0');
  buf += text;
  return sha256(buf);
}

std::optional<std::vector<double>> EmbeddingCache::get(const std::string& provider_id,
                                                       const std::string& text) const {
  Digest k = key(provider_id, text);
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(k);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void EmbeddingCache::put(const std::string& provider_id, const std::string& text,
                         const std::vector<double>& vector) {
  Digest k = key(provider_id, text);
  std::lock_guard<std::mutex> lock(mu_);
  if (entries_.count(k) != 0) return;
  entries_[k] = vector;
  if (file_) {
    if (file_->has_parent_path()) std::filesystem::create_directories(file_->parent_path());
    std::ofstream out(*file_, std::ios::binary | std::ios::app);
    if (!out) throw Error(ErrorKind::kInternal, "cannot append to cache " + file_->string());
    const std::uint32_t dim = static_cast<std::uint32_t>(vector.size());
    out.write(reinterpret_cast<const char*>(k.data()), static_cast<std::streamsize>(k.size()));
    out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
    out.write(reinterpret_cast<const char*>(vector.data()), static_cast<std::streamsize>(dim * sizeof(double)));
  }
}

std::size_t EmbeddingCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_.size();
}

RemoteEndpointConfig RemoteEndpointConfig::from_env(int declared_dim) {
  RemoteEndpointConfig c;
  c.declared_dim = declared_dim;
  if (const char* url = std::getenv("GMC_EMBED_ENDPOINT")) c.url = url;
  if (const char* tok = std::getenv("GMC_EMBED_TOKEN")) c.token = tok;
  if (c.url.empty()) throw ConfigError("GMC_EMBED_ENDPOINT is not set");
  return c;
}

RemoteEmbedder::RemoteEmbedder(RemoteEndpointConfig config, EmbeddingCache* cache)
    : config_(std::move(config)), cache_(cache) {
  if (config_.batch_limit < 1 || config_.max_attempts < 1 || config_.parallelism < 1) {
    throw ConfigError("remote embedder limits must be positive");
  }
  const std::string& url = config_.url;
  auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("endpoint url needs a scheme: " + url);
  auto slash = url.find('/', scheme + 3);
  host_ = slash == std::string::npos ? url : url.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url.substr(slash);
}

std::vector<std::vector<double>> RemoteEmbedder::post_batch(const std::vector<std::string>& texts,
                                                            const std::vector<int>& indices) {
  httplib::Client client(host_);
  client.set_connection_timeout(config_.timeout_seconds, 0);
  client.set_read_timeout(config_.timeout_seconds, 0);
  if (!config_.token.empty()) client.set_bearer_token_auth(config_.token);
  const std::string body = json{{"texts", texts}}.dump();
  std::string last_error;
  for (int attempt = 0; attempt < config_.max_attempts; ++attempt) {
    if (attempt > 0) {
      std::this_thread::sleep_for(std::chrono::milliseconds(config_.initial_backoff_ms << (attempt - 1)));
    }
    {
      std::lock_guard<std::mutex> lock(mu_);
      ++requests_sent_;
    }
    auto res = client.Post(path_, body, "application/json");
    if (!res) {
      last_error = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 429 || res->status >= 500) {
      last_error = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) {
      throw ProviderError("embedding service rejected batch: HTTP " + std::to_string(res->status), indices);
    }
    json reply;
    try {
      reply = json::parse(res->body);
    } catch (const json::exception& e) {
      throw ProtocolError(std::string("malformed embedding reply: ") + e.what());
    }
    if (!reply.contains("embeddings") || !reply["embeddings"].is_array()) {
      throw ProtocolError("embedding reply lacks an 'embeddings' array");
    }
    const auto& rows = reply["embeddings"];
    if (rows.size() != texts.size()) {
      throw ProtocolError("embedding reply has " + std::to_string(rows.size()) + " vectors for " +
                          std::to_string(texts.size()) + " texts");
    }
    std::vector<std::vector<double>> out;
    for (const auto& r : rows) {
      auto v = r.get<std::vector<double>>();
      if (static_cast<int>(v.size()) != config_.declared_dim) {
        throw ProtocolError("embedding dimension " + std::to_string(v.size()) + " does not match declared " +
                            std::to_string(config_.declared_dim));
      }
      for (double x : v) {
        if (!std::isfinite(x)) throw ProtocolError("embedding reply contains non-finite values");
      }
      out.push_back(std::move(v));
    }
    return out;
  }
  throw ProviderError("embedding batch failed after " + std::to_string(config_.max_attempts) +
                          " attempts: " + last_error,
                      indices);
}

std::vector<SemanticEmbedding> RemoteEmbedder::embed(std::span<const std::string> texts) {
  std::vector<SemanticEmbedding> out(texts.size());
  std::vector<int> pending;
  for (std::size_t i = 0; i < texts.size(); ++i) {
    out[i].provider_id = config_.provider_id;
    if (cache_ != nullptr) {
      if (auto hit = cache_->get(config_.provider_id, texts[i])) {
        out[i].vector = std::move(*hit);
        continue;
      }
    }
    pending.push_back(static_cast<int>(i));
  }
  std::vector<std::vector<int>> batches;
  for (std::size_t i = 0; i < pending.size(); i += static_cast<std::size_t>(config_.batch_limit)) {
    auto end = std::min(pending.size(), i + static_cast<std::size_t>(config_.batch_limit));
    batches.emplace_back(pending.begin() + static_cast<long>(i), pending.begin() + static_cast<long>(end));
  }
  for (std::size_t wave = 0; wave < batches.size(); wave += static_cast<std::size_t>(config_.parallelism)) {
    std::vector<std::future<std::vector<std::vector<double>>>> inflight;
    const std::size_t wave_end = std::min(batches.size(), wave + static_cast<std::size_t>(config_.parallelism));
    for (std::size_t b = wave; b < wave_end; ++b) {
      std::vector<std::string> batch_texts;
      for (int idx : batches[b]) batch_texts.push_back(texts[static_cast<std::size_t>(idx)]);
      inflight.push_back(std::async(std::launch::async, [this, batch_texts, idx = batches[b]]() {
        return post_batch(batch_texts, idx);
      }));
    }
    for (std::size_t b = wave; b < wave_end; ++b) {
      auto vectors = inflight[b - wave].get();
      for (std::size_t k = 0; k < vectors.size(); ++k) {
        const int idx = batches[b][k];
        if (cache_ != nullptr) cache_->put(config_.provider_id, texts[static_cast<std::size_t>(idx)], vectors[k]);
        out[static_cast<std::size_t>(idx)].vector = std::move(vectors[k]);
      }
    }
  }
  return out;
}

void standardize(ad::Matrix& embeddings) {
  if (embeddings.rows() < 2) return;
  for (Eigen::Index c = 0; c < embeddings.cols(); ++c) {
    double mean = embeddings.col(c).mean();
    double var = (embeddings.col(c).array() - mean).square().mean();
    double sd = std::sqrt(var);
    embeddings.col(c).array() -= mean;
    if (sd > 0.0) embeddings.col(c) /= sd;
  }
}

}  // namespace gmc::embed
