// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Ranking metrics, user-weighted aggregation, and identifier analyses.

#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "gmc/autodiff.hpp"
#include "gmc/corpus.hpp"
#include "gmc/identity.hpp"

namespace gmc::eval {

// 1-based position of `target` in `ranked`, or 0 if absent.
int rank_of(std::span<const int> ranked, int target);
double recall_at_k(std::span<const int> ranked, int target, int k);
double ndcg_at_k(std::span<const int> ranked, int target, int k);

struct DomainMetrics {
  std::string domain;
  long users = 0;
  std::map<std::string, double> values;  // "recall@5", "ndcg@10", ...
};

std::string metric_name(const std::string& kind, int k);

// Mean Recall@k and NDCG@k for every cutoff over one domain's test cases.
DomainMetrics evaluate_domain(const std::string& domain, const std::vector<std::vector<int>>& rankings,
                              std::span<const int> targets, std::span<const int> cutoffs);

// Per-metric mean weighted by user count. Throws DataError on a
// non-positive count or mismatched metric sets.
DomainMetrics aggregate_weighted(std::span<const DomainMetrics> domains);

struct MetricReport {
  std::string config_hash;
  std::string variant;
  std::vector<int> cutoffs;
  std::vector<DomainMetrics> domains;
  DomainMetrics aggregate;

  std::string jsonl() const;
  std::string table() const;
};

MetricReport make_report(std::string config_hash, std::string variant, std::vector<int> cutoffs,
                         std::vector<DomainMetrics> domains);

struct CodeDistribution {
  int level = 0;
  int domain_count = 0;
  std::map<int, std::vector<int>> counts;  // code -> items per domain
  double purity = 0.0;                     // share of used codes whose majority domain holds >= threshold
  double threshold = 0.95;

  // CSV of the `top` most frequent codes: code,total,<domain>... .
  std::string csv(const corpus::Catalog& catalog, int top = 100) const;
};

CodeDistribution code_domain_distribution(const corpus::Catalog& catalog, const identity::Assignment& assignment,
                                          int level, double threshold = 0.95);

enum class Distance { kEuclidean, kCosine };

struct OverlapReport {
  std::string strategy;
  std::vector<int> neighbor_counts;
  std::vector<std::string> domains;
  std::vector<std::vector<double>> overlap;  // [k index][domain]
  std::vector<double> mean;                  // [k index], mean over domains

  std::string jsonl() const;
  std::string csv() const;
};

// For each item, the mean number of equal semantic codes (disambiguation
// excluded) with its K nearest same-domain items under `distance` on the
// raw embeddings; averaged per domain.
OverlapReport neighbor_code_overlap(const corpus::Catalog& catalog, const ad::Matrix& embeddings,
                                    const identity::Assignment& assignment, std::span<const int> neighbor_counts,
                                    const std::string& strategy, Distance distance = Distance::kEuclidean);

}  // namespace gmc::eval
