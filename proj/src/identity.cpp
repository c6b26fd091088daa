// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/identity.hpp"

#include <algorithm>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "gmc/common.hpp"

namespace gmc::identity {

Assignment assign_identifiers(const corpus::Catalog& catalog, const std::vector<std::vector<int>>& codes,
                              int codebook_size) {
  if (static_cast<int>(codes.size()) != catalog.size()) {
    throw DataError("one code tuple per catalog item is required");
  }
  Assignment a;
  a.codebook_size = codebook_size;
  a.levels = codes.empty() ? 0 : static_cast<int>(codes.front().size());
  std::map<std::vector<int>, std::vector<int>> groups;
  for (int i = 0; i < catalog.size(); ++i) {
    const auto& c = codes[static_cast<std::size_t>(i)];
    if (static_cast<int>(c.size()) != a.levels) throw DataError("code tuples have different lengths");
    for (int v : c) {
      if (v < 0 || v >= codebook_size) throw DataError("code out of range");
    }
    groups[c].push_back(i);
  }
  a.ids.resize(codes.size());
  for (auto& [c, members] : groups) {
    std::sort(members.begin(), members.end(), [&](int x, int y) {
      const auto& ix = catalog[x];
      const auto& iy = catalog[y];
      if (ix.domain != iy.domain) return ix.domain < iy.domain;
      return ix.item_id < iy.item_id;
    });
    for (std::size_t k = 0; k < members.size(); ++k) {
      a.ids[static_cast<std::size_t>(members[k])] = SemanticIdentifier{c, static_cast<int>(k)};
    }
    a.max_group = std::max(a.max_group, static_cast<int>(members.size()));
    if (members.size() > 1) a.colliding_items += static_cast<int>(members.size());
  }
  return a;
}

TokenVocabulary::TokenVocabulary(int levels, int codebook_size, int disamb_size)
    : levels_(levels), codebook_size_(codebook_size), disamb_size_(disamb_size) {
  if (levels < 1 || codebook_size < 1 || disamb_size < 1) throw ConfigError("vocabulary sizes must be positive");
}

TokenVocabulary TokenVocabulary::for_assignment(const Assignment& a, int disamb_cap) {
  return TokenVocabulary(a.levels, a.codebook_size, std::max(a.max_group, disamb_cap));
}

int TokenVocabulary::code_token(int level, int code) const {
  if (level < 0 || level >= levels_ || code < 0 || code >= codebook_size_) {
    throw DataError("code (" + std::to_string(level) + ", " + std::to_string(code) + ") outside the vocabulary");
  }
  return kSpecials + level * codebook_size_ + code;
}

int TokenVocabulary::disamb_token(int disamb) const {
  if (disamb < 0 || disamb >= disamb_size_) {
    throw DataError("disambiguation index " + std::to_string(disamb) + " outside the vocabulary");
  }
  return kSpecials + levels_ * codebook_size_ + disamb;
}

TokenVocabulary::Entry TokenVocabulary::entry(int token) const {
  if (token < 0 || token >= size()) throw DataError("token " + std::to_string(token) + " out of vocabulary");
  if (token < kSpecials) return {Kind::kSpecial, -1, token};
  const int t = token - kSpecials;
  if (t < levels_ * codebook_size_) return {Kind::kCode, t / codebook_size_, t % codebook_size_};
  return {Kind::kDisamb, levels_, t - levels_ * codebook_size_};
}

std::vector<int> TokenVocabulary::tokens(const SemanticIdentifier& id) const {
  if (static_cast<int>(id.codes.size()) != levels_) throw DataError("identifier has the wrong number of levels");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(levels_ + 1));
  for (int l = 0; l < levels_; ++l) out.push_back(code_token(l, id.codes[static_cast<std::size_t>(l)]));
  out.push_back(disamb_token(id.disamb));
  return out;
}

SemanticIdentifier TokenVocabulary::identifier(std::span<const int> tokens) const {
  if (static_cast<int>(tokens.size()) != levels_ + 1) throw DecodeError("identifier token sequence has the wrong length");
  SemanticIdentifier id;
  for (int l = 0; l < levels_; ++l) {
    const int tok = tokens[static_cast<std::size_t>(l)];
    if (tok < 0 || tok >= size()) throw DecodeError("token out of vocabulary");
    Entry e = entry(tok);
    if (e.kind != Kind::kCode || e.level != l) throw DecodeError("expected a level-" + std::to_string(l) + " code token");
    id.codes.push_back(e.value);
  }
  const int last = tokens.back();
  if (last < 0 || last >= size() || entry(last).kind != Kind::kDisamb) throw DecodeError("expected a disambiguation token");
  id.disamb = entry(last).value;
  return id;
}

PrefixTree::PrefixTree(std::span<const std::vector<int>> sequences, std::span<const int> items, int end_token)
    : end_token_(end_token) {
  if (sequences.size() != items.size()) throw InternalError("prefix tree needs one item per sequence");
  nodes_.emplace_back();
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    std::vector<int> path = sequences[s];
    path.push_back(end_token);
    int cur = kRoot;
    for (int tok : path) {
      Node& n = nodes_[static_cast<std::size_t>(cur)];
      auto it = std::lower_bound(n.tokens.begin(), n.tokens.end(), tok);
      const auto pos = it - n.tokens.begin();
      if (it != n.tokens.end() && *it == tok) {
        cur = n.children[static_cast<std::size_t>(pos)];
        continue;
      }
      const int next = static_cast<int>(nodes_.size());
      n.tokens.insert(it, tok);
      n.children.insert(n.children.begin() + pos, next);
      nodes_.emplace_back();
      cur = next;
    }
    Node& leaf = nodes_[static_cast<std::size_t>(cur)];
    if (leaf.item >= 0) throw DataError("duplicate identifier in prefix tree");
    leaf.item = items[s];
    ++leaves_;
  }
}

int PrefixTree::child(int id, int token) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  auto it = std::lower_bound(n.tokens.begin(), n.tokens.end(), token);
  if (it == n.tokens.end() || *it != token) return -1;
  return n.children[static_cast<std::size_t>(it - n.tokens.begin())];
}

int PrefixTree::walk(std::span<const int> prefix) const {
  int cur = kRoot;
  for (int tok : prefix) {
    cur = child(cur, tok);
    if (cur < 0) return -1;
  }
  return cur;
}

std::vector<std::pair<std::vector<int>, int>> PrefixTree::enumerate() const {
  std::vector<std::pair<std::vector<int>, int>> out;
  std::vector<int> path;
  auto visit = [&](auto&& self, int id) -> void {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.item >= 0) out.emplace_back(path, n.item);
    for (std::size_t k = 0; k < n.tokens.size(); ++k) {
      path.push_back(n.tokens[k]);
      self(self, n.children[k]);
      path.pop_back();
    }
  };
  visit(visit, kRoot);
  return out;
}

PrefixTree build_prefix_tree(const corpus::Catalog& catalog, const Assignment& assignment,
                             const TokenVocabulary& vocab, int domain) {
  std::vector<std::vector<int>> seqs;
  std::vector<int> items;
  for (int i : catalog.domain_items(domain)) {
    seqs.push_back(vocab.tokens(assignment.ids[static_cast<std::size_t>(i)]));
    items.push_back(i);
  }
  return PrefixTree(seqs, items, TokenVocabulary::kEnd);
}

int detokenize(const PrefixTree& tree, std::span<const int> tokens) {
  int cur = tree.walk(tokens);
  if (cur >= 0 && !tree.is_leaf(cur)) cur = tree.child(cur, tree.end_token());
  if (cur < 0 || !tree.is_leaf(cur)) throw DecodeError("token sequence is not a complete identifier in this domain");
  return tree.node(cur).item;
}

void write_identifiers(const std::filesystem::path& path, const corpus::Catalog& catalog, const Assignment& a) {
  std::ostringstream os;
  os << "# gmc-identifiers v1 levels=" << a.levels << " codebook_size=" << a.codebook_size << "\n";
  os << "domain\titem_id";
  for (int l = 0; l < a.levels; ++l) os << "\tc" << (l + 1);
  os << "\tdisamb\n";
  for (int i = 0; i < catalog.size(); ++i) {
    const auto& id = a.ids[static_cast<std::size_t>(i)];
    os << catalog.domain_name(catalog[i].domain) << '\t' << catalog[i].item_id;
    for (int c : id.codes) os << '\t' << c;
    os << '\t' << id.disamb << '\n';
  }
  write_file_atomic(path, os.str());
}

Assignment read_identifiers(const std::filesystem::path& path, const corpus::Catalog& catalog) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw ProtocolError("empty identifier file");
  Assignment a;
  if (std::sscanf(line.c_str(), "# gmc-identifiers v1 levels=%d codebook_size=%d", &a.levels, &a.codebook_size) != 2) {
    throw ProtocolError("unrecognized identifier file header");
  }
  std::getline(in, line);  // column names
  std::map<std::string, int> domain_index;
  for (int t = 0; t < catalog.domain_count(); ++t) domain_index[catalog.domain_name(t)] = t;
  std::vector<std::vector<int>> codes(static_cast<std::size_t>(catalog.size()));
  std::vector<int> disamb(static_cast<std::size_t>(catalog.size()), -1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split(line, '\t');
    if (static_cast<int>(f.size()) != a.levels + 3) throw ProtocolError("malformed identifier line: " + line);
    auto dom = domain_index.find(f[0]);
    if (dom == domain_index.end()) throw DataError("unknown domain " + f[0]);
    auto idx = catalog.find(dom->second, f[1]);
    if (!idx) throw DataError("unknown item " + f[1]);
    std::vector<int> c;
    for (int l = 0; l < a.levels; ++l) c.push_back(std::stoi(f[static_cast<std::size_t>(l + 2)]));
    codes[static_cast<std::size_t>(*idx)] = std::move(c);
    disamb[static_cast<std::size_t>(*idx)] = std::stoi(f.back());
  }
  for (int i = 0; i < catalog.size(); ++i) {
    if (disamb[static_cast<std::size_t>(i)] < 0) throw DataError("identifier missing for " + catalog[i].item_id);
  }
  Assignment rebuilt = assign_identifiers(catalog, codes, a.codebook_size);
  for (int i = 0; i < catalog.size(); ++i) {
    if (rebuilt.ids[static_cast<std::size_t>(i)].disamb != disamb[static_cast<std::size_t>(i)]) {
      throw ProtocolError("identifier file disagrees with the collision rule");
    }
  }
  return rebuilt;
}

void write_vocabulary(const std::filesystem::path& path, const TokenVocabulary& vocab) {
  std::ostringstream os;
  os << "# gmc-vocabulary v1 levels=" << vocab.levels() << " codebook_size=" << vocab.codebook_size()
     << " disamb_size=" << vocab.disamb_size() << "\n";
  os << "token\tkind\tlevel\tvalue\n";
  static const char* specials[] = {"pad", "begin", "end"};
  for (int t = 0; t < vocab.size(); ++t) {
    auto e = vocab.entry(t);
    switch (e.kind) {
      case TokenVocabulary::Kind::kSpecial: os << t << '\t' << specials[t] << "\t-\t-\n"; break;
      case TokenVocabulary::Kind::kCode: os << t << "\tcode\t" << e.level << '\t' << e.value << '\n'; break;
      case TokenVocabulary::Kind::kDisamb: os << t << "\tdisamb\t-\t" << e.value << '\n'; break;
    }
  }
  write_file_atomic(path, os.str());
}

}  // namespace gmc::identity
