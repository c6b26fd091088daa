// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace gmc::decode {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool ranks_before(double sa, const std::vector<int>& ta, double sb, const std::vector<int>& tb) {
  if (sa != sb) return sa > sb;
  return ta < tb;
}

// Per-token scores for the allowed tokens of `node`, in allowed order.
std::vector<double> allowed_scores(const Eigen::VectorXd& logprobs, const identity::PrefixTree& tree, int node,
                                   ScoreMode mode) {
  auto allowed = tree.allowed(node);
  if (allowed.empty()) throw InternalError("prefix tree node " + std::to_string(node) + " allows no token");
  std::vector<double> out(allowed.size());
  for (std::size_t k = 0; k < allowed.size(); ++k) {
    if (allowed[k] < 0 || allowed[k] >= logprobs.size()) throw InternalError("prefix tree token outside the vocabulary");
    out[k] = logprobs(allowed[k]);
  }
  if (mode == ScoreMode::kMaskedRenormalized) {
    double mx = kNegInf;
    for (double v : out) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : out) z += std::exp(v - mx);
    const double lz = mx + std::log(z);
    for (double& v : out) v -= lz;
  }
  return out;
}

struct Hypothesis {
  std::vector<int> tokens;
  double score = 0.0;
  int node = identity::PrefixTree::kRoot;
  genrec::InferenceSession::DecoderState state;
};

struct Candidate {
  std::size_t parent;
  int token;
  int node;
  double score;
  std::vector<int> tokens;
};

}  // namespace

Eigen::VectorXd mask_invalid(const Eigen::VectorXd& logits, const identity::PrefixTree& tree, int node) {
  auto allowed = tree.allowed(node);
  if (allowed.empty()) throw InternalError("prefix tree node " + std::to_string(node) + " allows no token");
  Eigen::VectorXd out = Eigen::VectorXd::Constant(logits.size(), kNegInf);
  for (int t : allowed) {
    if (t < 0 || t >= logits.size()) throw InternalError("prefix tree token outside the vocabulary");
    out(t) = logits(t);
  }
  return out;
}

std::vector<Recommendation> constrained_beam_search(const genrec::InferenceSession& session,
                                                    std::span<const int> history, const identity::PrefixTree& tree,
                                                    const DecodeOptions& options) {
  if (options.beam_size < 1) throw ConfigError("beam_size must be >= 1");
  if (tree.leaf_count() == 0) throw DataError("cannot decode against an empty catalog");
  const auto memory = session.encode(history);
  std::vector<Hypothesis> beam;
  beam.push_back(Hypothesis{{}, 0.0, identity::PrefixTree::kRoot, session.start()});
  std::vector<Recommendation> done;
  while (!beam.empty()) {
    std::vector<Candidate> cands;
    for (std::size_t h = 0; h < beam.size(); ++h) {
      Hypothesis& hyp = beam[h];
      const int prev = hyp.tokens.empty() ? identity::TokenVocabulary::kBegin : hyp.tokens.back();
      Eigen::VectorXd lp = session.step(memory, hyp.state, prev);
      auto allowed = tree.allowed(hyp.node);
      auto scores = allowed_scores(lp, tree, hyp.node, options.score_mode);
      for (std::size_t k = 0; k < allowed.size(); ++k) {
        Candidate c{h, allowed[k], tree.node(hyp.node).children[k], hyp.score + scores[k], hyp.tokens};
        c.tokens.push_back(allowed[k]);
        cands.push_back(std::move(c));
      }
    }
    const std::size_t keep = std::min(cands.size(), static_cast<std::size_t>(options.beam_size));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) { return ranks_before(a.score, a.tokens, b.score, b.tokens); });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      Candidate& c = cands[i];
      if (tree.is_leaf(c.node)) {
        done.push_back(Recommendation{tree.node(c.node).item, c.score, std::move(c.tokens)});
      } else {
        next.push_back(Hypothesis{std::move(c.tokens), c.score, c.node, beam[c.parent].state});
      }
    }
    beam = std::move(next);
  }
  std::sort(done.begin(), done.end(), [](const Recommendation& a, const Recommendation& b) {
    return ranks_before(a.score, a.tokens, b.score, b.tokens);
  });
  if (done.size() > static_cast<std::size_t>(options.beam_size)) done.resize(static_cast<std::size_t>(options.beam_size));
  std::set<int> seen;
  for (const auto& r : done) {
    if (!seen.insert(r.item).second) throw InternalError("beam search produced a duplicate item");
  }
  return done;
}

std::vector<Recommendation> exhaustive_ranking(const genrec::InferenceSession& session, std::span<const int> history,
                                               const identity::PrefixTree& tree, ScoreMode mode) {
  std::vector<Recommendation> out;
  const auto memory = session.encode(history);
  for (auto& [tokens, item] : tree.enumerate()) {
    auto state = session.start();
    int node = identity::PrefixTree::kRoot;
    int prev = identity::TokenVocabulary::kBegin;
    double score = 0.0;
    for (int tok : tokens) {
      Eigen::VectorXd lp = session.step(memory, state, prev);
      auto allowed = tree.allowed(node);
      auto scores = allowed_scores(lp, tree, node, mode);
      const auto k = static_cast<std::size_t>(std::lower_bound(allowed.begin(), allowed.end(), tok) - allowed.begin());
      score += scores[k];
      node = tree.child(node, tok);
      prev = tok;
    }
    out.push_back(Recommendation{item, score, tokens});
  }
  std::sort(out.begin(), out.end(), [](const Recommendation& a, const Recommendation& b) {
    return ranks_before(a.score, a.tokens, b.score, b.tokens);
  });
  return out;
}

}  // namespace gmc::decode
