// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Multi-domain catalogs, interaction filtering, chronological sequences and
// leave-one-out splits, plus a seeded synthetic corpus generator.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace gmc::corpus {

struct Item {
  std::string item_id;
  int domain = 0;
  std::string title;
  std::string brand;
  std::vector<std::string> categories;
};

// Items of all domains; an item is addressed by its index in the catalog.
class Catalog {
 public:
  explicit Catalog(std::vector<std::string> domain_names = {});

  int add(Item item);
  const Item& operator[](int index) const { return items_[static_cast<std::size_t>(index)]; }
  int size() const { return static_cast<int>(items_.size()); }
  const std::vector<Item>& items() const { return items_; }

  std::optional<int> find(int domain, const std::string& item_id) const;
  std::vector<int> domain_items(int domain) const;

  int domain_count() const { return static_cast<int>(domain_names_.size()); }
  const std::vector<std::string>& domain_names() const { return domain_names_; }
  const std::string& domain_name(int t) const { return domain_names_[static_cast<std::size_t>(t)]; }

 private:
  std::vector<std::string> domain_names_;
  std::vector<Item> items_;
  std::map<std::pair<int, std::string>, int> index_;
};

struct Interaction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;
  int domain = 0;
};

struct InteractionSequence {
  int domain = 0;
  std::vector<int> items;  // catalog indices, oldest first
};

struct Corpus {
  Catalog catalog;
  std::vector<InteractionSequence> sequences;
};

struct KCoreResult {
  std::vector<Interaction> interactions;
  bool empty = false;  // set when filtering removed everything
  int rounds = 0;
};

// Iteratively drops interactions whose user or item has fewer than k
// interactions until none remain to drop. Users and items are keyed per
// domain, so each domain is filtered on its own.
KCoreResult k_core_filter(std::span<const Interaction> interactions, int k);

// One sequence per (domain, user) in order of first appearance. Items are
// sorted by timestamp (stable), the most recent max_len kept, and sequences
// shorter than 3 dropped. Interactions with items missing from the catalog
// raise DataError.
std::vector<InteractionSequence> build_sequences(std::span<const Interaction> interactions,
                                                 const Catalog& catalog, int max_len);

struct Pair {
  std::vector<int> history;
  int target = 0;
  int domain = 0;
};

struct SplitDataset {
  std::vector<Pair> train;
  std::vector<Pair> valid;
  std::vector<Pair> test;
};

enum class TrainExpansion { kFinalOnly, kAllPrefixes };

SplitDataset leave_one_out_split(std::span<const InteractionSequence> sequences,
                                 TrainExpansion expansion);

struct TextTemplate {
  std::string separator = " ";
};

// title, brand, categories in that order; empty fields skipped.
std::string item_text(const Item& item, const TextTemplate& tmpl = {});

struct SyntheticDomainSpec {
  std::string name;
  int n_items = 200;
  int n_users = 300;
  int n_topics = 5;
  double pattern_strength = 0.8;
  int min_length = 4;
  int max_length = 10;
};

// Items of every domain share one attribute vocabulary. With probability
// pattern_strength a user's next item keeps the current topic and moves to
// the next attribute (the same rule in every domain); otherwise it is drawn
// uniformly from the domain.
struct SyntheticSpec {
  std::vector<SyntheticDomainSpec> domains;
  int n_attributes = 8;
  int max_len = 20;
};

struct SyntheticItemInfo {
  int topic = 0;
  int attribute = 0;
};

struct SyntheticCorpus {
  Corpus corpus;
  std::vector<SyntheticItemInfo> info;  // aligned with the catalog
};

SyntheticCorpus synthesize_domains(const SyntheticSpec& spec, std::uint64_t seed);

// ---- files -----------------------------------------------------------------

// Line-delimited JSON: {"item_id", "title", "brand", "categories": [..]}.
// Records without a title are skipped.
std::vector<Item> read_metadata(const std::filesystem::path& path, int domain);

// CSV lines "user_id,item_id,timestamp"; an optional header line is skipped.
std::vector<Interaction> read_interactions(const std::filesystem::path& path, int domain);

void save_corpus(const Corpus& corpus, const std::filesystem::path& dir);
Corpus load_corpus(const std::filesystem::path& dir);

// Line-delimited JSON: {"domain", "history": [item_id..], "target", "split"}.
void write_split_manifest(const std::filesystem::path& path, const Catalog& catalog,
                          const SplitDataset& split);

}  // namespace gmc::corpus
