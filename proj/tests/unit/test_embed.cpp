// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <thread>

#include "gmc/embed.hpp"

// After Eigen: resolv.h defines a macro named _res.
#include <httplib.h>
#include <json.hpp>

namespace gmc::embed {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / std::sqrt(aa * bb);
}

TEST(HashEmbed, SpecExamples) {
  auto a = hash_embed("red pen office", 64);
  auto b = hash_embed("blue pen office", 64);
  auto c = hash_embed("guitar strings", 64);
  EXPECT_EQ(a.vector, hash_embed("red pen office", 64).vector);
  EXPECT_GT(cosine(a.vector, b.vector), cosine(a.vector, c.vector));
  EXPECT_EQ(hash_embed("x", 8).vector.size(), 8u);
  EXPECT_THROW(hash_embed("", 8), DataError);
  EXPECT_THROW(hash_embed("  !! ", 8), DataError);
  EXPECT_THROW(hash_embed("x", 0), ConfigError);
}

TEST(HashEmbed, NormalizationAndProviderId) {
  EXPECT_EQ(hash_embed("Red  PEN", 16).vector, hash_embed("red pen", 16).vector);
  HashEmbedderConfig a{16, 0.2}, b{16, 0.5};
  EXPECT_NE(hash_provider_id(a), hash_provider_id(b));
  EXPECT_NE(hash_embed("pen", a).vector, hash_embed("pen", b).vector);
  for (double v : hash_embed("some text", 128).vector) EXPECT_TRUE(std::isfinite(v));
  std::vector<std::string> texts{"a b", "c d"};
  ad::Matrix m = hash_embed_matrix(texts, a);
  ASSERT_EQ(m.rows(), 2);
  for (int k = 0; k < 16; ++k) EXPECT_EQ(m(1, k), hash_embed("c d", a).vector[static_cast<std::size_t>(k)]);
}

TEST(HashEmbed, SharedTokensRaiseSimilarityOnAverage) {
  Rng rng(3);
  int wins = 0;
  for (int trial = 0; trial < 200; ++trial) {
    auto w = [&] { return "w" + std::to_string(uniform_index(rng, 100000)); };
    const std::string s1 = w(), s2 = w(), x = w(), y = w(), z1 = w(), z2 = w();
    auto a = hash_embed(s1 + " " + s2 + " " + x, 32);
    auto b = hash_embed(s1 + " " + s2 + " " + y, 32);
    auto c = hash_embed(z1 + " " + z2 + " " + y, 32);
    wins += cosine(a.vector, b.vector) > cosine(a.vector, c.vector) ? 1 : 0;
  }
  EXPECT_GE(wins, 190);
}

TEST(Standardize, ZeroMeanUnitVariance) {
  Rng rng(4);
  ad::Matrix m(50, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 3.0 + 2.0 * standard_normal(rng);
  m.col(2).setConstant(1.0);
  standardize(m);
  for (int c = 0; c < 2; ++c) {
    EXPECT_NEAR(m.col(c).mean(), 0.0, 1e-12);
    EXPECT_NEAR((m.col(c).array() - m.col(c).mean()).square().mean(), 1.0, 1e-12);
  }
  for (Eigen::Index r = 0; r < m.rows(); ++r) EXPECT_EQ(m(r, 2), 0.0);
}

class CacheFile : public ::testing::Test {
 protected:
  void SetUp() override {
    path_ = fs::temp_directory_path() / ("gmc_cache_" + std::to_string(::getpid()) + ".bin");
    fs::remove(path_);
  }
  void TearDown() override { fs::remove(path_); }
  fs::path path_;
};

TEST_F(CacheFile, PersistsBitwise) {
  std::vector<double> v{0.1, -1.0 / 3.0, 1e-300, 12345.678};
  {
    EmbeddingCache cache(path_);
    EXPECT_FALSE(cache.get("p", "t").has_value());
    cache.put("p", "t", v);
    cache.put("q", "t", {1.0});
    EXPECT_EQ(cache.size(), 2u);
  }
  EmbeddingCache reopened(path_);
  EXPECT_EQ(reopened.size(), 2u);
  auto hit = reopened.get("p", "t");
  ASSERT_TRUE(hit.has_value());
  EXPECT_EQ(std::memcmp(hit->data(), v.data(), v.size() * sizeof(double)), 0);
  EXPECT_FALSE(reopened.get("p", "other").has_value());
}

TEST(Cache, ConcurrentAccess) {
  EmbeddingCache cache;
  std::vector<std::thread> ts;
  for (int t = 0; t < 4; ++t) {
    ts.emplace_back([&, t] {
      for (int i = 0; i < 200; ++i) {
        cache.put("p", std::to_string(t) + ":" + std::to_string(i), {static_cast<double>(i)});
        cache.get("p", std::to_string((t + 1) % 4) + ":" + std::to_string(i));
      }
    });
  }
  for (auto& th : ts) th.join();
  EXPECT_EQ(cache.size(), 800u);
}

// Local mock of the embedding service.
class MockService : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/embed", [this](const httplib::Request& req, httplib::Response& res) {
      ++calls_;
      if (req.get_header_value("Authorization") != expected_auth_) {
        res.status = 401;
        return;
      }
      if (fail_first_ > 0) {
        --fail_first_;
        res.status = 503;
        return;
      }
      if (always_status_ != 0) {
        res.status = always_status_;
        return;
      }
      auto body = json::parse(req.body);
      json rows = json::array();
      for (const auto& t : body.at("texts")) {
        auto v = hash_embed(t.get<std::string>(), reply_dim_).vector;
        rows.push_back(v);
      }
      res.set_content(json{{"embeddings", rows}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  RemoteEndpointConfig config(int dim) const {
    RemoteEndpointConfig c;
    c.url = "http://127.0.0.1:" + std::to_string(port_) + "/embed";
    c.token = "secret";
    c.declared_dim = dim;
    c.batch_limit = 2;
    c.initial_backoff_ms = 1;
    c.timeout_seconds = 5;
    return c;
  }

  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
  std::atomic<int> calls_{0};
  std::atomic<int> fail_first_{0};
  int always_status_ = 0;
  int reply_dim_ = 8;
  std::string expected_auth_ = "Bearer secret";
};

TEST_F(MockService, OrderPreservingBatches) {
  EmbeddingCache cache;
  RemoteEmbedder client(config(8), &cache);
  std::vector<std::string> texts{"alpha", "beta", "gamma", "delta", "eps"};
  auto out = client.embed(texts);
  ASSERT_EQ(out.size(), 5u);
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(out[i].vector, hash_embed(texts[i], 8).vector);
  EXPECT_EQ(client.requests_sent(), 3);
  // Cached texts are not sent again.
  auto again = client.embed(texts);
  EXPECT_EQ(client.requests_sent(), 3);
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(again[i].vector, out[i].vector);
  // Cache transparency: same vectors with no cache.
  RemoteEmbedder uncached(config(8), nullptr);
  auto fresh = uncached.embed(texts);
  for (std::size_t i = 0; i < texts.size(); ++i) EXPECT_EQ(fresh[i].vector, out[i].vector);
}

TEST_F(MockService, RetriesTransientFailures) {
  fail_first_ = 2;
  RemoteEmbedder client(config(8), nullptr);
  std::vector<std::string> texts{"one"};
  auto out = client.embed(texts);
  EXPECT_EQ(out[0].vector, hash_embed("one", 8).vector);
  EXPECT_EQ(calls_.load(), 3);
}

TEST_F(MockService, PermanentFailureCarriesIndices) {
  always_status_ = 500;
  auto c = config(8);
  c.max_attempts = 3;
  c.parallelism = 1;
  RemoteEmbedder client(c, nullptr);
  std::vector<std::string> texts{"a", "b"};
  try {
    client.embed(texts);
    FAIL() << "expected ProviderError";
  } catch (const ProviderError& e) {
    EXPECT_EQ(e.failed_indices(), (std::vector<int>{0, 1}));
    EXPECT_EQ(e.kind(), ErrorKind::kProvider);
  }
  EXPECT_EQ(calls_.load(), 3);
}

TEST_F(MockService, DimensionMismatchIsProtocolError) {
  reply_dim_ = 4;
  RemoteEmbedder client(config(8), nullptr);
  std::vector<std::string> texts{"a"};
  EXPECT_THROW(client.embed(texts), ProtocolError);
}

TEST_F(MockService, BadTokenIsRejected) {
  auto c = config(8);
  c.token = "wrong";
  RemoteEmbedder client(c, nullptr);
  std::vector<std::string> texts{"a"};
  EXPECT_THROW(client.embed(texts), ProviderError);
  EXPECT_EQ(calls_.load(), 1);
}

TEST(RemoteConfig, FromEnvironment) {
  ::unsetenv("GMC_EMBED_ENDPOINT");
  EXPECT_THROW(RemoteEndpointConfig::from_env(16), ConfigError);
  ::setenv("GMC_EMBED_ENDPOINT", "http://localhost:1/x", 1);
  ::setenv("GMC_EMBED_TOKEN", "tok", 1);
  auto c = RemoteEndpointConfig::from_env(16);
  EXPECT_EQ(c.url, "http://localhost:1/x");
  EXPECT_EQ(c.token, "tok");
  EXPECT_EQ(c.declared_dim, 16);
  ::unsetenv("GMC_EMBED_ENDPOINT");
  ::unsetenv("GMC_EMBED_TOKEN");
  RemoteEndpointConfig bad;
  bad.url = "no-scheme";
  EXPECT_THROW(RemoteEmbedder(bad, nullptr), ConfigError);
}

}  // namespace
}  // namespace gmc::embed
