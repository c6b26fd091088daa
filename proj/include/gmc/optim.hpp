// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "gmc/autodiff.hpp"

namespace gmc {

struct AdamWOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Adam with decoupled weight decay. Holds moment buffers for a fixed list of
// parameters; only trainable ones are updated.
class AdamW {
 public:
  AdamW(std::vector<ad::Parameter*> params, AdamWOptions options);

  void zero_grad();
  // Applies one update from the parameters' accumulated gradients.
  void step();
  // Rescales gradients so their global L2 norm is at most max_norm. Returns
  // the norm before clipping.
  double clip_grad_norm(double max_norm);

  void set_learning_rate(double lr) { options_.learning_rate = lr; }
  const AdamWOptions& options() const { return options_; }
  long steps() const { return t_; }

 private:
  std::vector<ad::Parameter*> params_;
  std::vector<ad::Matrix> m_;
  std::vector<ad::Matrix> v_;
  AdamWOptions options_;
  long t_ = 0;
};

}  // namespace gmc
