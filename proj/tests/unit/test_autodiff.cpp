// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <functional>

#include "gmc/autodiff.hpp"
#include "gmc/optim.hpp"
#include "gmc/serialize.hpp"

namespace gmc::ad {
namespace {

namespace fs = std::filesystem;

Matrix random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double s = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = s * standard_normal(rng);
  return m;
}

using Fn = std::function<Var(Tape&, std::vector<Var>&)>;

// Central differences against the tape gradient for every parameter entry.
void check_gradients(std::vector<Parameter>& params, const Fn& f, double tol = 1e-6) {
  for (auto& p : params) p.zero_grad();
  {
    Tape tape;
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.leaf(p));
    tape.backward(f(tape, leaves));
  }
  auto value = [&] {
    Tape tape(false);
    std::vector<Var> leaves;
    for (auto& p : params) leaves.push_back(tape.leaf(p));
    return f(tape, leaves).scalar();
  };
  const double h = 1e-6;
  for (auto& p : params) {
    for (Eigen::Index i = 0; i < p.value.size(); ++i) {
      const double orig = p.value.data()[i];
      p.value.data()[i] = orig + h;
      const double up = value();
      p.value.data()[i] = orig - h;
      const double down = value();
      p.value.data()[i] = orig;
      const double fd = (up - down) / (2.0 * h);
      const double an = p.grad.data()[i];
      EXPECT_NEAR(an, fd, tol * std::max(1.0, std::abs(fd))) << p.name << "[" << i << "]";
    }
  }
}

// Non-symmetric scalar read-out of a matrix.
Var readout(Tape& t, Var x, Rng& rng) {
  Matrix w = random_matrix(rng, x.cols(), 1);
  return add(sum_squares(x), sum_all(matmul(x, t.constant(w))));
}

TEST(AutodiffOps, LinearAlgebra) {
  Rng rng(1);
  std::vector<Parameter> ps{{"a", random_matrix(rng, 3, 4)}, {"b", random_matrix(rng, 4, 2)}, {"c", random_matrix(rng, 5, 4)},
                            {"r", random_matrix(rng, 1, 2)}};
  const std::uint64_t seed = 2;
  check_gradients(ps, [&](Tape& t, std::vector<Var>& v) {
    Rng r(seed);
    Var ab = add_row(matmul(v[0], v[1]), v[3]);
    Var acT = matmul_nt(v[0], v[2]);
    Var mix = sub(scale(ab, 0.7), scale(ab, 0.2));
    return add(readout(t, mix, r), readout(t, acT, r));
  });
}

TEST(AutodiffOps, NonlinearitiesAndNorm) {
  Rng rng(3);
  std::vector<Parameter> ps{{"x", random_matrix(rng, 4, 6)}, {"g", random_matrix(rng, 1, 6)}, {"b", random_matrix(rng, 1, 6)}};
  check_gradients(ps, [&](Tape& t, std::vector<Var>& v) {
    Rng r(4);
    Var y = layer_norm(v[0], v[1], v[2]);
    return readout(t, relu(y), r);
  });
}

TEST(AutodiffOps, GatherAndCrossEntropy) {
  Rng rng(5);
  std::vector<Parameter> ps{{"table", random_matrix(rng, 6, 5)}, {"w", random_matrix(rng, 5, 7)}};
  const std::vector<int> ids{0, 3, 3, 5, 1};
  const std::vector<int> targets{6, 0, 2, 2, 4};
  check_gradients(ps, [&](Tape&, std::vector<Var>& v) {
    return cross_entropy_sum(matmul(gather_rows(v[0], ids), v[1]), targets);
  });
}

TEST(AutodiffOps, CrossEntropyValue) {
  Tape t;
  Matrix logits(2, 3);
  logits << 1.0, 2.0, 3.0, 0.0, 0.0, 0.0;
  const std::vector<int> targets{2, 1};
  const double expected = -(3.0 - std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0))) + std::log(3.0);
  EXPECT_NEAR(cross_entropy_sum(t.constant(logits), targets).scalar(), expected, 1e-12);
  Matrix huge(1, 2);
  huge << 1000.0, 0.0;
  const std::vector<int> zero{0};
  EXPECT_NEAR(cross_entropy_sum(t.constant(huge), zero).scalar(), 0.0, 1e-12);
}

TEST(AutodiffOps, AttentionSegmentsAndCausality) {
  Rng rng(6);
  auto layout = std::make_shared<SegmentLayout>(SegmentLayout{{0, 3, 5}, {0, 4, 6}});
  std::vector<Parameter> ps{{"q", random_matrix(rng, 5, 4)}, {"k", random_matrix(rng, 6, 4)}, {"v", random_matrix(rng, 6, 4)}};
  check_gradients(ps, [&](Tape& t, std::vector<Var>& v) {
    Rng r(7);
    return readout(t, attention(v[0], v[1], v[2], layout, 2, false), r);
  });
  auto square = std::make_shared<SegmentLayout>(SegmentLayout{{0, 3, 5}, {0, 3, 5}});
  std::vector<Parameter> qs{{"q", random_matrix(rng, 5, 4)}, {"k", random_matrix(rng, 5, 4)}, {"v", random_matrix(rng, 5, 4)}};
  check_gradients(qs, [&](Tape& t, std::vector<Var>& v) {
    Rng r(8);
    return readout(t, attention(v[0], v[1], v[2], square, 2, true), r);
  });
  // A causal query ignores later keys: changing key/value row 2 leaves rows 0..1 unchanged.
  Tape t1, t2;
  Matrix q = random_matrix(rng, 3, 4), k = random_matrix(rng, 3, 4), v = random_matrix(rng, 3, 4);
  auto one = std::make_shared<SegmentLayout>(SegmentLayout{{0, 3}, {0, 3}});
  Matrix a = attention(t1.constant(q), t1.constant(k), t1.constant(v), one, 1, true).value();
  k.row(2).setConstant(9.0);
  v.row(2).setConstant(-9.0);
  Matrix b = attention(t2.constant(q), t2.constant(k), t2.constant(v), one, 1, true).value();
  EXPECT_EQ(a.topRows(2), b.topRows(2));
  EXPECT_NE(a.row(2), b.row(2));
}

TEST(AutodiffOps, StraightThroughRoutesToBoth) {
  Rng rng(9);
  Parameter a("a", random_matrix(rng, 2, 3)), b("b", random_matrix(rng, 2, 3));
  Tape t;
  Var y = straight_through(t.leaf(a), t.leaf(b));
  EXPECT_EQ(y.value(), a.value);
  t.backward(sum_all(y));
  EXPECT_EQ(a.grad, Matrix::Ones(2, 3));
  EXPECT_EQ(b.grad, Matrix::Ones(2, 3));
}

TEST(AutodiffOps, DropoutScalesAndMasks) {
  Rng rng(10);
  Parameter x("x", Matrix::Ones(200, 50));
  Tape t;
  Var y = dropout(t.leaf(x), 0.25, rng);
  int zeros = 0;
  for (Eigen::Index i = 0; i < y.value().size(); ++i) {
    const double v = y.value().data()[i];
    if (v == 0.0) {
      ++zeros;
    } else {
      EXPECT_DOUBLE_EQ(v, 1.0 / 0.75);
    }
  }
  EXPECT_NEAR(zeros / 10000.0, 0.25, 0.02);
  t.backward(sum_all(y));
  EXPECT_EQ(x.grad, y.value());
}

TEST(Tape, ReferencesAndFrozenParametersGetNoGradient) {
  Rng rng(11);
  Parameter a("a", random_matrix(rng, 2, 2)), frozen("f", random_matrix(rng, 2, 2));
  frozen.trainable = false;
  Matrix ext = random_matrix(rng, 2, 2);
  Tape t;
  Var y = add(matmul(t.leaf(a), t.leaf(frozen)), t.reference(ext));
  t.backward(sum_squares(y));
  EXPECT_GT(a.grad.norm(), 0.0);
  EXPECT_EQ(frozen.grad.norm(), 0.0);
  Tape off(false);
  Var z = matmul(off.leaf(a), off.leaf(a));
  EXPECT_FALSE(off.requires_grad(z.id));
}

TEST(AdamW, MatchesHandComputedSteps) {
  Parameter p("p", Matrix::Constant(1, 2, 1.0));
  AdamW opt({&p}, AdamWOptions{0.1, 0.9, 0.999, 1e-8, 0.01});
  double value = 1.0, m = 0.0, v = 0.0;
  for (int step = 1; step <= 3; ++step) {
    const double g = 2.0 * value;  // gradient of x^2
    p.grad.setConstant(g);
    opt.step();
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    value *= 1.0 - 0.1 * 0.01;
    value -= 0.1 * (m / (1.0 - std::pow(0.9, step))) / (std::sqrt(v / (1.0 - std::pow(0.999, step))) + 1e-8);
    EXPECT_NEAR(p.value(0, 0), value, 1e-14);
  }
  EXPECT_EQ(opt.steps(), 3);
  Parameter frozen("f", Matrix::Constant(1, 1, 5.0));
  frozen.trainable = false;
  frozen.grad.setConstant(1.0);
  AdamW opt2({&frozen}, AdamWOptions{});
  opt2.step();
  EXPECT_EQ(frozen.value(0, 0), 5.0);
}

TEST(AdamW, ClipGradNorm) {
  Parameter a("a", Matrix::Zero(1, 2)), b("b", Matrix::Zero(1, 1));
  a.grad << 3.0, 0.0;
  b.grad << 4.0;
  AdamW opt({&a, &b}, AdamWOptions{});
  EXPECT_DOUBLE_EQ(opt.clip_grad_norm(1.0), 5.0);
  EXPECT_NEAR(a.grad(0, 0), 0.6, 1e-11);
  EXPECT_NEAR(b.grad(0, 0), 0.8, 1e-11);
  EXPECT_NEAR(opt.clip_grad_norm(10.0), 1.0, 1e-11);
  EXPECT_NEAR(a.grad(0, 0), 0.6, 1e-11);
}

TEST(Serialize, BlobRoundTripAndErrors) {
  const fs::path dir = fs::temp_directory_path() / "gmc_serialize_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Rng rng(12);
  io::Blob b;
  b.kind = "thing";
  b.meta = {{"x", 1}};
  b.tensors = {{"w", random_matrix(rng, 3, 2)}, {"empty", Matrix(0, 4)}};
  io::write_blob(dir / "b.bin", b);
  io::Blob back = io::read_blob(dir / "b.bin", "thing");
  EXPECT_EQ(back.meta, b.meta);
  EXPECT_EQ(back.tensor("w"), b.tensors[0].second);
  EXPECT_EQ(back.tensor("empty").cols(), 4);
  EXPECT_THROW(back.tensor("nope"), ProtocolError);
  EXPECT_THROW(io::read_blob(dir / "b.bin", "other"), ProtocolError);
  const std::string bytes = read_file(dir / "b.bin");
  write_file_atomic(dir / "cut.bin", bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(io::read_blob(dir / "cut.bin", "thing"), ProtocolError);
  write_file_atomic(dir / "junk.bin", "hello world, not a blob");
  EXPECT_THROW(io::read_blob(dir / "junk.bin", "thing"), ProtocolError);
  Matrix m = random_matrix(rng, 4, 3);
  io::write_matrix(dir / "m.bin", m);
  EXPECT_EQ(io::read_matrix(dir / "m.bin"), m);
  Matrix m2 = m;
  EXPECT_EQ(io::checksum({&m}), io::checksum({&m2}));
  m2(0, 0) = std::nextafter(m2(0, 0), 10.0);
  EXPECT_NE(io::checksum({&m}), io::checksum({&m2}));
  fs::remove_all(dir);
}

}  // namespace
}  // namespace gmc::ad
