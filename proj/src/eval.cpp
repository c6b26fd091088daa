// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace gmc::eval {

using nlohmann::json;

namespace {

void check_k(int k) {
  if (k < 1) throw ConfigError("metric cutoff must be >= 1, got " + std::to_string(k));
}

std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

int rank_of(std::span<const int> ranked, int target) {
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (ranked[i] == target) return static_cast<int>(i) + 1;
  }
  return 0;
}

double recall_at_k(std::span<const int> ranked, int target, int k) {
  check_k(k);
  const int r = rank_of(ranked, target);
  return (r >= 1 && r <= k) ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const int> ranked, int target, int k) {
  check_k(k);
  const int r = rank_of(ranked, target);
  return (r >= 1 && r <= k) ? 1.0 / std::log2(static_cast<double>(r) + 1.0) : 0.0;
}

std::string metric_name(const std::string& kind, int k) { return kind + "@" + std::to_string(k); }

DomainMetrics evaluate_domain(const std::string& domain, const std::vector<std::vector<int>>& rankings,
                              std::span<const int> targets, std::span<const int> cutoffs) {
  if (rankings.size() != targets.size()) throw DataError("one ranking per target is required");
  DomainMetrics m;
  m.domain = domain;
  m.users = static_cast<long>(targets.size());
  for (int k : cutoffs) {
    check_k(k);
    double rec = 0.0, ndcg = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      rec += recall_at_k(rankings[i], targets[i], k);
      ndcg += ndcg_at_k(rankings[i], targets[i], k);
    }
    const double n = targets.empty() ? 1.0 : static_cast<double>(targets.size());
    m.values[metric_name("recall", k)] = rec / n;
    m.values[metric_name("ndcg", k)] = ndcg / n;
  }
  return m;
}

DomainMetrics aggregate_weighted(std::span<const DomainMetrics> domains) {
  DomainMetrics agg;
  agg.domain = "aggregate";
  if (domains.empty()) return agg;
  for (const auto& d : domains) {
    if (d.users <= 0) throw DataError("domain " + d.domain + " has no test users");
    if (d.values.size() != domains.front().values.size()) throw DataError("domains report different metrics");
    agg.users += d.users;
  }
  for (const auto& [name, unused] : domains.front().values) {
    double num = 0.0;
    for (const auto& d : domains) {
      auto it = d.values.find(name);
      if (it == d.values.end()) throw DataError("domain " + d.domain + " lacks metric " + name);
      num += static_cast<double>(d.users) * it->second;
    }
    agg.values[name] = num / static_cast<double>(agg.users);
  }
  return agg;
}

MetricReport make_report(std::string config_hash, std::string variant, std::vector<int> cutoffs,
                         std::vector<DomainMetrics> domains) {
  MetricReport r;
  r.config_hash = std::move(config_hash);
  r.variant = std::move(variant);
  r.cutoffs = std::move(cutoffs);
  r.domains = std::move(domains);
  r.aggregate = aggregate_weighted(r.domains);
  return r;
}

std::string MetricReport::jsonl() const {
  std::string out;
  auto emit = [&](const DomainMetrics& d) {
    json j{{"config_hash", config_hash}, {"variant", variant}, {"domain", d.domain}, {"users", d.users}};
    for (const auto& [k, v] : d.values) j[k] = v;
    out += j.dump();
    out.push_back('\n');
  };
  for (const auto& d : domains) emit(d);
  emit(aggregate);
  return out;
}

std::string MetricReport::table() const {
  std::vector<std::string> names;
  for (const char* kind : {"recall", "ndcg"}) {
    for (int k : cutoffs) names.push_back(metric_name(kind, k));
  }
  std::ostringstream os;
  os << "variant: " << variant << "  config: " << config_hash << "\n";
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-14s %7s", "domain", "users");
  os << buf;
  for (const auto& n : names) {
    std::snprintf(buf, sizeof(buf), " %10s", n.c_str());
    os << buf;
  }
  os << "\n";
  auto row = [&](const DomainMetrics& d) {
    std::snprintf(buf, sizeof(buf), "%-14s %7ld", d.domain.c_str(), d.users);
    os << buf;
    for (const auto& n : names) {
      auto it = d.values.find(n);
      std::snprintf(buf, sizeof(buf), " %10s", it == d.values.end() ? "-" : fixed(it->second).c_str());
      os << buf;
    }
    os << "\n";
  };
  for (const auto& d : domains) row(d);
  row(aggregate);
  return os.str();
}

CodeDistribution code_domain_distribution(const corpus::Catalog& catalog, const identity::Assignment& assignment,
                                          int level, double threshold) {
  if (level < 0 || level >= assignment.levels) throw ConfigError("level " + std::to_string(level) + " out of range");
  CodeDistribution d;
  d.level = level;
  d.threshold = threshold;
  d.domain_count = catalog.domain_count();
  for (int i = 0; i < catalog.size(); ++i) {
    const int code = assignment.ids[static_cast<std::size_t>(i)].codes[static_cast<std::size_t>(level)];
    auto& row = d.counts[code];
    if (row.empty()) row.assign(static_cast<std::size_t>(d.domain_count), 0);
    ++row[static_cast<std::size_t>(catalog[i].domain)];
  }
  int pure = 0;
  for (const auto& [code, row] : d.counts) {
    const int total = std::accumulate(row.begin(), row.end(), 0);
    const int top = *std::max_element(row.begin(), row.end());
    if (static_cast<double>(top) >= threshold * static_cast<double>(total)) ++pure;
  }
  d.purity = d.counts.empty() ? 1.0 : static_cast<double>(pure) / static_cast<double>(d.counts.size());
  return d;
}

std::string CodeDistribution::csv(const corpus::Catalog& catalog, int top) const {
  std::vector<std::pair<int, int>> order;  // (total, code)
  for (const auto& [code, row] : counts) order.emplace_back(std::accumulate(row.begin(), row.end(), 0), code);
  std::sort(order.begin(), order.end(), [](auto a, auto b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  if (static_cast<int>(order.size()) > top) order.resize(static_cast<std::size_t>(top));
  std::ostringstream os;
  os << "code,total";
  for (int t = 0; t < domain_count; ++t) os << ',' << catalog.domain_name(t);
  os << '\n';
  for (const auto& [total, code] : order) {
    os << code << ',' << total;
    for (int c : counts.at(code)) os << ',' << c;
    os << '\n';
  }
  return os.str();
}

OverlapReport neighbor_code_overlap(const corpus::Catalog& catalog, const ad::Matrix& embeddings,
                                    const identity::Assignment& assignment, std::span<const int> neighbor_counts,
                                    const std::string& strategy, Distance distance) {
  if (embeddings.rows() != catalog.size()) throw DataError("one embedding per catalog item is required");
  OverlapReport r;
  r.strategy = strategy;
  r.neighbor_counts.assign(neighbor_counts.begin(), neighbor_counts.end());
  r.overlap.assign(neighbor_counts.size(), std::vector<double>(static_cast<std::size_t>(catalog.domain_count()), 0.0));
  const int max_k = neighbor_counts.empty() ? 0 : *std::max_element(neighbor_counts.begin(), neighbor_counts.end());
  for (int t = 0; t < catalog.domain_count(); ++t) {
    r.domains.push_back(catalog.domain_name(t));
    const auto items = catalog.domain_items(t);
    const int n = static_cast<int>(items.size());
    for (int k : neighbor_counts) {
      if (k < 1 || k >= n) {
        throw ConfigError("neighbor count " + std::to_string(k) + " must be in [1, " + std::to_string(n - 1) + "]");
      }
    }
    std::vector<Eigen::VectorXd> vecs;
    for (int i : items) {
      Eigen::VectorXd v = embeddings.row(i).transpose();
      if (distance == Distance::kCosine) {
        const double norm = v.norm();
        if (norm > 0.0) v /= norm;
      }
      vecs.push_back(std::move(v));
    }
    std::vector<double> sums(neighbor_counts.size(), 0.0);
    std::vector<std::pair<double, int>> dist(static_cast<std::size_t>(n - 1));
    for (int a = 0; a < n; ++a) {
      std::size_t w = 0;
      for (int b = 0; b < n; ++b) {
        if (b == a) continue;
        const double d = distance == Distance::kCosine ? -vecs[static_cast<std::size_t>(a)].dot(vecs[static_cast<std::size_t>(b)])
                                                       : (vecs[static_cast<std::size_t>(a)] - vecs[static_cast<std::size_t>(b)]).squaredNorm();
        dist[w++] = {d, b};
      }
      std::partial_sort(dist.begin(), dist.begin() + max_k, dist.end());
      const auto& ca = assignment.ids[static_cast<std::size_t>(items[static_cast<std::size_t>(a)])].codes;
      std::vector<int> shared(static_cast<std::size_t>(max_k));
      for (int j = 0; j < max_k; ++j) {
        const auto& cb = assignment.ids[static_cast<std::size_t>(items[static_cast<std::size_t>(dist[static_cast<std::size_t>(j)].second)])].codes;
        int s = 0;
        for (std::size_t l = 0; l < ca.size(); ++l) s += ca[l] == cb[l] ? 1 : 0;
        shared[static_cast<std::size_t>(j)] = s;
      }
      for (std::size_t ki = 0; ki < neighbor_counts.size(); ++ki) {
        const int k = neighbor_counts[ki];
        const int total = std::accumulate(shared.begin(), shared.begin() + k, 0);
        sums[ki] += static_cast<double>(total) / static_cast<double>(k);
      }
    }
    for (std::size_t ki = 0; ki < neighbor_counts.size(); ++ki) {
      r.overlap[ki][static_cast<std::size_t>(t)] = sums[ki] / static_cast<double>(n);
    }
  }
  for (const auto& row : r.overlap) {
    r.mean.push_back(row.empty() ? 0.0 : std::accumulate(row.begin(), row.end(), 0.0) / static_cast<double>(row.size()));
  }
  return r;
}

std::string OverlapReport::jsonl() const {
  std::string out;
  for (std::size_t ki = 0; ki < neighbor_counts.size(); ++ki) {
    json j{{"strategy", strategy}, {"k", neighbor_counts[ki]}, {"mean", mean[ki]}};
    for (std::size_t t = 0; t < domains.size(); ++t) j["domains"][domains[t]] = overlap[ki][t];
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

std::string OverlapReport::csv() const {
  std::ostringstream os;
  os << "strategy,k,domain,overlap\n";
  for (std::size_t ki = 0; ki < neighbor_counts.size(); ++ki) {
    for (std::size_t t = 0; t < domains.size(); ++t) {
      os << strategy << ',' << neighbor_counts[ki] << ',' << domains[t] << ',' << fixed(overlap[ki][t], 6) << '\n';
    }
    os << strategy << ',' << neighbor_counts[ki] << ",mean," << fixed(mean[ki], 6) << '\n';
  }
  return os.str();
}

}  // namespace gmc::eval
