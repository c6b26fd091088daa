// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "gmc/identity.hpp"

namespace gmc::identity {
namespace {

corpus::Catalog make_catalog(int domains, int per_domain) {
  std::vector<std::string> names;
  for (int t = 0; t < domains; ++t) names.push_back("d" + std::to_string(t));
  corpus::Catalog cat(names);
  for (int t = 0; t < domains; ++t) {
    for (int i = 0; i < per_domain; ++i) {
      cat.add(corpus::Item{"item" + std::to_string(per_domain - i), t, "title", "", {}});
    }
  }
  return cat;
}

TEST(AssignIdentifiers, IdenticalCodesGetSuffixes) {
  corpus::Catalog cat = make_catalog(1, 2);
  Assignment a = assign_identifiers(cat, {{3, 1}, {3, 1}}, 4);
  // Suffixes follow item_id order: "item1" (index 1) before "item2" (index 0).
  EXPECT_EQ(a.ids[1], (SemanticIdentifier{{3, 1}, 0}));
  EXPECT_EQ(a.ids[0], (SemanticIdentifier{{3, 1}, 1}));
  EXPECT_EQ(a.max_group, 2);
  EXPECT_DOUBLE_EQ(a.collision_rate(), 1.0);
}

TEST(AssignIdentifiers, UniqueCodesHaveZeroSuffix) {
  corpus::Catalog cat = make_catalog(2, 2);
  Assignment a = assign_identifiers(cat, {{0, 0}, {0, 1}, {1, 0}, {1, 1}}, 2);
  for (const auto& id : a.ids) EXPECT_EQ(id.disamb, 0);
  EXPECT_EQ(a.colliding_items, 0);
  EXPECT_EQ(a.max_group, 1);
}

TEST(AssignIdentifiers, CrossDomainCollisionOrderedByDomainFirst) {
  corpus::Catalog cat = make_catalog(2, 1);
  Assignment a = assign_identifiers(cat, {{1, 1}, {1, 1}}, 2);
  EXPECT_EQ(a.ids[0].disamb, 0);
  EXPECT_EQ(a.ids[1].disamb, 1);
}

TEST(AssignIdentifiers, RandomCodesAreUniqueAndSuffixesContiguous) {
  Rng rng(3);
  corpus::Catalog cat = make_catalog(3, 100);
  std::vector<std::vector<int>> codes;
  for (int i = 0; i < cat.size(); ++i) {
    codes.push_back({static_cast<int>(uniform_index(rng, 3)), static_cast<int>(uniform_index(rng, 3))});
  }
  Assignment a = assign_identifiers(cat, codes, 3);
  std::set<SemanticIdentifier> seen(a.ids.begin(), a.ids.end());
  EXPECT_EQ(seen.size(), 300u);
  std::map<std::vector<int>, std::set<int>> suffixes;
  for (const auto& id : a.ids) suffixes[id.codes].insert(id.disamb);
  for (const auto& [c, s] : suffixes) {
    EXPECT_EQ(*s.begin(), 0);
    EXPECT_EQ(*s.rbegin(), static_cast<int>(s.size()) - 1);
  }
}

TEST(AssignIdentifiers, RejectsBadInput) {
  corpus::Catalog cat = make_catalog(1, 2);
  EXPECT_THROW(assign_identifiers(cat, {{0}}, 2), DataError);
  EXPECT_THROW(assign_identifiers(cat, {{0}, {2}}, 2), DataError);
  EXPECT_THROW(assign_identifiers(cat, {{0}, {0, 1}}, 2), DataError);
}

TEST(Vocabulary, LayoutIsInjectiveAndLevelDisjoint) {
  TokenVocabulary v(3, 5, 4);
  EXPECT_EQ(v.size(), 3 * 5 + 4 + 3);
  std::set<int> seen{TokenVocabulary::kPad, TokenVocabulary::kBegin, TokenVocabulary::kEnd};
  for (int l = 0; l < 3; ++l) {
    for (int c = 0; c < 5; ++c) {
      const int t = v.code_token(l, c);
      EXPECT_TRUE(seen.insert(t).second);
      auto e = v.entry(t);
      EXPECT_EQ(e.kind, TokenVocabulary::Kind::kCode);
      EXPECT_EQ(e.level, l);
      EXPECT_EQ(e.value, c);
    }
  }
  for (int d = 0; d < 4; ++d) EXPECT_TRUE(seen.insert(v.disamb_token(d)).second);
  EXPECT_EQ(static_cast<int>(seen.size()), v.size());
  EXPECT_NE(v.code_token(0, 1), v.code_token(1, 1));
  EXPECT_THROW(v.code_token(3, 0), DataError);
  EXPECT_THROW(v.disamb_token(4), DataError);
  EXPECT_THROW(v.entry(v.size()), DataError);
}

TEST(Vocabulary, DisambBlockPaddedToCap) {
  Assignment a;
  a.levels = 2;
  a.codebook_size = 4;
  a.max_group = 3;
  EXPECT_EQ(TokenVocabulary::for_assignment(a).disamb_size(), 16);
  a.max_group = 20;
  EXPECT_EQ(TokenVocabulary::for_assignment(a).disamb_size(), 20);
}

TEST(Vocabulary, TokensRoundTrip) {
  TokenVocabulary v(2, 4, 16);
  SemanticIdentifier id{{3, 2}, 5};
  auto toks = v.tokens(id);
  ASSERT_EQ(toks.size(), 3u);
  EXPECT_EQ(v.identifier(toks), id);
  std::vector<int> swapped{toks[1], toks[0], toks[2]};
  EXPECT_THROW(v.identifier(swapped), DecodeError);
  EXPECT_THROW(v.identifier(std::vector<int>{toks[0], toks[1]}), DecodeError);
}

struct SmallTree {
  corpus::Catalog cat = make_catalog(1, 3);
  Assignment a;
  TokenVocabulary v;
  SmallTree() {
    a = assign_identifiers(cat, {{0, 1}, {0, 2}, {1, 1}}, 3);
    v = TokenVocabulary::for_assignment(a);
  }
};

TEST(PrefixTreeTest, AllowedSetsAreExact) {
  SmallTree s;
  PrefixTree t = build_prefix_tree(s.cat, s.a, s.v, 0);
  EXPECT_EQ(t.leaf_count(), 3);
  auto root = t.allowed(PrefixTree::kRoot);
  EXPECT_EQ(std::vector<int>(root.begin(), root.end()), (std::vector<int>{s.v.code_token(0, 0), s.v.code_token(0, 1)}));
  int n = t.walk(std::vector<int>{s.v.code_token(0, 0)});
  auto next = t.allowed(n);
  EXPECT_EQ(std::vector<int>(next.begin(), next.end()), (std::vector<int>{s.v.code_token(1, 1), s.v.code_token(1, 2)}));
  int full = t.walk(s.v.tokens(s.a.ids[2]));
  auto end = t.allowed(full);
  EXPECT_EQ(std::vector<int>(end.begin(), end.end()), (std::vector<int>{TokenVocabulary::kEnd}));
}

TEST(PrefixTreeTest, DetokenizeRoundTripsAndRejects) {
  SmallTree s;
  PrefixTree t = build_prefix_tree(s.cat, s.a, s.v, 0);
  for (int i = 0; i < 3; ++i) {
    auto toks = s.v.tokens(s.a.ids[static_cast<std::size_t>(i)]);
    EXPECT_EQ(detokenize(t, toks), i);
    toks.push_back(TokenVocabulary::kEnd);
    EXPECT_EQ(detokenize(t, toks), i);
    toks.pop_back();
    toks.pop_back();
    EXPECT_THROW(detokenize(t, toks), DecodeError);
  }
  EXPECT_THROW(detokenize(t, std::vector<int>{s.v.code_token(0, 1), s.v.code_token(1, 2), s.v.disamb_token(0)}),
               DecodeError);
}

TEST(PrefixTreeTest, OtherDomainSequenceRejected) {
  corpus::Catalog cat = make_catalog(2, 1);
  Assignment a = assign_identifiers(cat, {{0, 0}, {1, 1}}, 2);
  TokenVocabulary v = TokenVocabulary::for_assignment(a);
  PrefixTree t0 = build_prefix_tree(cat, a, v, 0);
  EXPECT_THROW(detokenize(t0, v.tokens(a.ids[1])), DecodeError);
}

TEST(PrefixTreeTest, DuplicateIdentifierRejected) {
  std::vector<std::vector<int>> seqs{{3, 4}, {3, 4}};
  std::vector<int> items{0, 1};
  EXPECT_THROW(PrefixTree(seqs, items, TokenVocabulary::kEnd), DataError);
}

TEST(PrefixTreeTest, AcceptedSetEqualsIdentifierSet) {
  Rng rng(4);
  corpus::Catalog cat = make_catalog(2, 60);
  std::vector<std::vector<int>> codes;
  for (int i = 0; i < cat.size(); ++i) {
    codes.push_back({static_cast<int>(uniform_index(rng, 4)), static_cast<int>(uniform_index(rng, 4)),
                     static_cast<int>(uniform_index(rng, 4))});
  }
  Assignment a = assign_identifiers(cat, codes, 4);
  TokenVocabulary v = TokenVocabulary::for_assignment(a);
  for (int t = 0; t < 2; ++t) {
    PrefixTree tree = build_prefix_tree(cat, a, v, t);
    std::set<std::vector<int>> expected;
    for (int i : cat.domain_items(t)) {
      auto toks = v.tokens(a.ids[static_cast<std::size_t>(i)]);
      toks.push_back(TokenVocabulary::kEnd);
      expected.insert(toks);
    }
    std::set<std::vector<int>> accepted;
    for (const auto& [seq, item] : tree.enumerate()) {
      accepted.insert(seq);
      EXPECT_EQ(cat[item].domain, t);
    }
    EXPECT_EQ(accepted, expected);
    EXPECT_EQ(tree.leaf_count(), 60);
  }
}

TEST(IdentifierFiles, RoundTrip) {
  Rng rng(5);
  corpus::Catalog cat = make_catalog(2, 30);
  std::vector<std::vector<int>> codes;
  for (int i = 0; i < cat.size(); ++i) codes.push_back({static_cast<int>(uniform_index(rng, 3)), 1});
  Assignment a = assign_identifiers(cat, codes, 3);
  auto dir = std::filesystem::temp_directory_path() / "gmc_identity_files";
  std::filesystem::create_directories(dir);
  write_identifiers(dir / "identifiers.tsv", cat, a);
  Assignment b = read_identifiers(dir / "identifiers.tsv", cat);
  EXPECT_EQ(a.ids, b.ids);
  write_vocabulary(dir / "vocab.tsv", TokenVocabulary::for_assignment(a));
  EXPECT_TRUE(std::filesystem::exists(dir / "vocab.tsv"));
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace gmc::identity
