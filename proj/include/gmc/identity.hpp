// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <compare>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmc/common.hpp"
#include "gmc/corpus.hpp"

namespace gmc::identity {

struct SemanticIdentifier {
  std::vector<int> codes;
  int disamb = 0;

  auto operator<=>(const SemanticIdentifier&) const = default;
};

struct Assignment {
  std::vector<SemanticIdentifier> ids;  // by catalog index
  int levels = 0;
  int codebook_size = 0;
  int max_group = 1;          // largest set of items sharing all codes
  int colliding_items = 0;    // items whose codes are shared with another item
  double collision_rate() const {
    return ids.empty() ? 0.0 : static_cast<double>(colliding_items) / static_cast<double>(ids.size());
  }
};

// `codes[i]` are the L codes of catalog item i. Items sharing all codes get
// suffixes 0..g-1 ordered by (domain, item_id).
Assignment assign_identifiers(const corpus::Catalog& catalog, const std::vector<std::vector<int>>& codes,
                              int codebook_size);

// Token layout: pad, begin, end, then L blocks of N code tokens, then the
// disambiguation block.
class TokenVocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBegin = 1;
  static constexpr int kEnd = 2;
  static constexpr int kSpecials = 3;

  enum class Kind { kSpecial, kCode, kDisamb };
  struct Entry {
    Kind kind = Kind::kSpecial;
    int level = -1;
    int value = 0;
  };

  TokenVocabulary() = default;
  TokenVocabulary(int levels, int codebook_size, int disamb_size);
  // Disambiguation block sized max(max_group, cap).
  static TokenVocabulary for_assignment(const Assignment& a, int disamb_cap = 16);

  int levels() const { return levels_; }
  int codebook_size() const { return codebook_size_; }
  int disamb_size() const { return disamb_size_; }
  int size() const { return kSpecials + levels_ * codebook_size_ + disamb_size_; }

  int code_token(int level, int code) const;
  int disamb_token(int disamb) const;
  Entry entry(int token) const;

  // L code tokens followed by the disambiguation token; no end token.
  std::vector<int> tokens(const SemanticIdentifier& id) const;
  // Inverse of tokens(); throws DecodeError on malformed input.
  SemanticIdentifier identifier(std::span<const int> tokens) const;
  int identifier_length() const { return levels_ + 1; }

 private:
  int levels_ = 0;
  int codebook_size_ = 0;
  int disamb_size_ = 0;
};

// Trie over the complete token sequences (identifier tokens + end) of one
// domain. Children are kept sorted by token id.
class PrefixTree {
 public:
  struct Node {
    std::vector<int> tokens;
    std::vector<int> children;
    int item = -1;  // catalog index at leaves
  };

  // Throws DataError on a duplicate identifier.
  PrefixTree(std::span<const std::vector<int>> sequences, std::span<const int> items, int end_token);

  static constexpr int kRoot = 0;
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::span<const int> allowed(int id) const { return nodes_[static_cast<std::size_t>(id)].tokens; }
  // Child reached by `token`, or -1.
  int child(int id, int token) const;
  // Node at the end of `prefix`, or -1 if it leaves the trie.
  int walk(std::span<const int> prefix) const;
  bool is_leaf(int id) const { return nodes_[static_cast<std::size_t>(id)].item >= 0; }
  int leaf_count() const { return leaves_; }
  int end_token() const { return end_token_; }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  // All complete sequences in lexicographic token order with their items.
  std::vector<std::pair<std::vector<int>, int>> enumerate() const;

 private:
  std::vector<Node> nodes_;
  int leaves_ = 0;
  int end_token_ = 0;
};

PrefixTree build_prefix_tree(const corpus::Catalog& catalog, const Assignment& assignment,
                             const TokenVocabulary& vocab, int domain);

// Catalog index for a complete identifier path (the trailing end token may
// be omitted). Throws DecodeError otherwise.
int detokenize(const PrefixTree& tree, std::span<const int> tokens);

// Line-delimited exports with a version header.
void write_identifiers(const std::filesystem::path& path, const corpus::Catalog& catalog, const Assignment& a);
Assignment read_identifiers(const std::filesystem::path& path, const corpus::Catalog& catalog);
void write_vocabulary(const std::filesystem::path& path, const TokenVocabulary& vocab);

}  // namespace gmc::identity
