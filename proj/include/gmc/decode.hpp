// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Trie-constrained beam search over one domain's identifiers.

#pragma once

#include <span>
#include <vector>

#include <Eigen/Dense>

#include "gmc/genrec.hpp"
#include "gmc/identity.hpp"

namespace gmc::decode {

enum class ScoreMode {
  kModel,                // raw model log-probabilities; equals score_sequence
  kMaskedRenormalized,   // log-softmax restricted to the allowed set at each step
};

struct DecodeOptions {
  int beam_size = 20;
  ScoreMode score_mode = ScoreMode::kModel;
};

struct Recommendation {
  int item = -1;            // catalog index
  double score = 0.0;       // cumulative log-probability
  std::vector<int> tokens;  // identifier tokens followed by the end token
};

// Sets every entry outside the node's allowed set to -inf. Throws
// InternalError if the node allows nothing or allows a token beyond the
// logits.
Eigen::VectorXd mask_invalid(const Eigen::VectorXd& logits, const identity::PrefixTree& tree, int node);

// Ranked by score descending, ties by token sequence ascending; at most
// beam_size entries.
std::vector<Recommendation> constrained_beam_search(const genrec::InferenceSession& session,
                                                    std::span<const int> history, const identity::PrefixTree& tree,
                                                    const DecodeOptions& options = {});

// Scores every identifier in the tree with the same ordering rule; the
// reference ranking for small catalogs.
std::vector<Recommendation> exhaustive_ranking(const genrec::InferenceSession& session, std::span<const int> history,
                                               const identity::PrefixTree& tree,
                                               ScoreMode mode = ScoreMode::kModel);

}  // namespace gmc::decode
