// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. A Tape lives for one forward/backward pass; Parameters outlive
// it and receive accumulated gradients when backward() runs.

#pragma once

#include <Eigen/Dense>

#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gmc/common.hpp"

namespace gmc::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Matrix v)
      : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
};

class Tape {
 public:
  // Called with the id of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, int)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var constant(Matrix value);
  // References the parameter's storage; the parameter must outlive the tape.
  Var leaf(Parameter& param);
  // Reads external storage without ever receiving gradient.
  Var reference(const Matrix& value);

  // Seeds d(loss)/d(loss) = 1 and propagates. Accumulates into the grad of
  // every trainable Parameter reached.
  void backward(Var loss);

  const Matrix& value(int id) const;
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  // Gradient buffer of a node, zero-allocated on first use.
  Matrix& grad(int id);
  bool has_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad.size() > 0; }

  // Records a computed value. `parents` decide whether the result requires
  // gradient; `fn` is dropped when it does not.
  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    const Matrix* external = nullptr;
    Parameter* param = nullptr;
    Matrix grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  bool grad_enabled_;
  std::deque<Node> nodes_;
};

// ---- operations -----------------------------------------------------------

Var matmul(Var a, Var b);          // a * b
Var matmul_nt(Var a, Var b);       // a * b^T
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var add_row(Var a, Var row);       // broadcast a 1 x n row over every row of a
Var relu(Var a);
Var dropout(Var a, double p, Rng& rng);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gather_rows(Var table, std::span<const int> ids);
Var sum_squares(Var a);            // 1 x 1
Var sum_all(Var a);                // 1 x 1

// Sum over rows of -log softmax(logits[r])[targets[r]]; 1 x 1.
Var cross_entropy_sum(Var logits, std::span<const int> targets);

// Value of `primary`; gradient routed unchanged to both `primary` and
// `passthrough` (shapes must match). With a constant primary this is the
// straight-through estimator.
Var straight_through(Var primary, Var passthrough);

// Per-example attention over packed sequences. Example b owns query rows
// [q_offsets[b], q_offsets[b+1]) and key/value rows [k_offsets[b], k_offsets[b+1]).
// With `causal`, query i only sees keys 0..i of its own example.
struct SegmentLayout {
  std::vector<int> q_offsets;
  std::vector<int> k_offsets;
};
Var attention(Var q, Var k, Var v, std::shared_ptr<const SegmentLayout> layout, int heads,
              bool causal);

// Batch contrastive loss over item domains:
//   -(1/B) sum_i log( sum_j exp(<z_i,z_j>) [t_j == t_i] / sum_j exp(<z_i,z_j>) )
// with j ranging over the whole batch (self pair included). 1 x 1.
Var domain_contrastive(Var z, std::span<const int> labels);

// Stable value-only form of the same loss.
double domain_contrastive_value(const Matrix& z, std::span<const int> labels);

}  // namespace gmc::ad
