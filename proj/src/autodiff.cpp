// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/autodiff.hpp"

#include <cmath>
#include <limits>

namespace gmc::ad {

const Matrix& Var::value() const { return tape->value(id); }

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Parameter& param) {
  Node node;
  node.external = &param.value;
  node.param = &param;
  node.requires_grad = grad_enabled_ && param.trainable;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::reference(const Matrix& value) {
  Node node;
  node.external = &value;
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.external != nullptr ? *n.external : n.value;
}

Matrix& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) {
    const Matrix& v = value(id);
    n.grad = Matrix::Zero(v.rows(), v.cols());
  }
  return n.grad;
}

Var Tape::push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  Node node;
  node.value = std::move(value);
  if (grad_enabled_) {
    for (const Var& p : parents) {
      if (requires_grad(p.id)) {
        node.requires_grad = true;
        break;
      }
    }
  }
  if (node.requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

void Tape::backward(Var loss) {
  if (!grad_enabled_) throw InternalError("backward on a tape without gradients");
  if (loss.rows() != 1 || loss.cols() != 1) throw InternalError("backward needs a scalar loss");
  if (!requires_grad(loss.id)) return;
  grad(loss.id)(0, 0) += 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.param != nullptr && n.requires_grad && n.grad.size() > 0) {
      if (n.param->grad.size() != n.param->value.size()) n.param->zero_grad();
      n.param->grad += n.grad;
    }
  }
}

namespace {
bool rg(Tape& t, Var v) { return t.requires_grad(v.id); }
}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = a.value() * b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, a)) t.grad(a.id).noalias() += g * b.value().transpose();
    if (rg(t, b)) t.grad(b.id).noalias() += a.value().transpose() * g;
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = a.value() * b.value().transpose();
  return t.push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, a)) t.grad(a.id).noalias() += g * b.value();
    if (rg(t, b)) t.grad(b.id).noalias() += g.transpose() * a.value();
  });
}

Var add(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = a.value() + b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, a)) t.grad(a.id) += g;
    if (rg(t, b)) t.grad(b.id) += g;
  });
}

Var sub(Var a, Var b) {
  Tape& t = *a.tape;
  Matrix out = a.value() - b.value();
  return t.push(std::move(out), {a, b}, [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, a)) t.grad(a.id) += g;
    if (rg(t, b)) t.grad(b.id) -= g;
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Matrix out = a.value() * s;
  return t.push(std::move(out), {a}, [a, s](Tape& t, int self) {
    t.grad(a.id) += t.grad(self) * s;
  });
}

Var add_row(Var a, Var row) {
  Tape& t = *a.tape;
  Matrix out = a.value();
  out.rowwise() += row.value().row(0);
  return t.push(std::move(out), {a, row}, [a, row](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, a)) t.grad(a.id) += g;
    if (rg(t, row)) t.grad(row.id) += g.colwise().sum();
  });
}

Var relu(Var a) {
  Tape& t = *a.tape;
  Matrix out = a.value().cwiseMax(0.0);
  return t.push(std::move(out), {a}, [a](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.grad(a.id) += (a.value().array() > 0.0).select(g, 0.0);
  });
}

Var dropout(Var a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  Tape& t = *a.tape;
  auto mask = std::make_shared<Matrix>(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < mask->size(); ++i) {
    mask->data()[i] = uniform01(rng) < p ? 0.0 : keep;
  }
  Matrix out = a.value().cwiseProduct(*mask);
  return t.push(std::move(out), {a}, [a, mask](Tape& t, int self) {
    t.grad(a.id) += t.grad(self).cwiseProduct(*mask);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Tape& t = *x.tape;
  const Matrix& xv = x.value();
  const Eigen::Index n = xv.rows();
  const Eigen::Index w = xv.cols();
  auto xhat = std::make_shared<Matrix>(n, w);
  auto inv_std = std::make_shared<Eigen::VectorXd>(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    double mean = xv.row(r).mean();
    double var = (xv.row(r).array() - mean).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (xv.row(r).array() - mean) * is;
  }
  Matrix out = xhat->array().rowwise() * gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return t.push(std::move(out), {x, gamma, beta}, [x, gamma, beta, xhat, inv_std](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, gamma)) t.grad(gamma.id) += g.cwiseProduct(*xhat).colwise().sum();
    if (rg(t, beta)) t.grad(beta.id) += g.colwise().sum();
    if (rg(t, x)) {
      Matrix dxhat = g.array().rowwise() * gamma.value().row(0).array();
      Matrix& dx = t.grad(x.id);
      const double inv_w = 1.0 / static_cast<double>(dxhat.cols());
      for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
        double s1 = dxhat.row(r).sum();
        double s2 = dxhat.row(r).dot(xhat->row(r));
        dx.row(r).array() += (*inv_std)(r) * inv_w *
                             (static_cast<double>(dxhat.cols()) * dxhat.row(r).array() - s1 -
                              xhat->row(r).array() * s2);
      }
    }
  });
}

Var gather_rows(Var table, std::span<const int> ids) {
  Tape& t = *table.tape;
  const Matrix& tv = table.value();
  Matrix out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw DataError("gather index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return t.push(std::move(out), {table}, [table, idx](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    Matrix& gt = t.grad(table.id);
    for (std::size_t i = 0; i < idx->size(); ++i) {
      gt.row((*idx)[i]) += g.row(static_cast<Eigen::Index>(i));
    }
  });
}

Var sum_squares(Var a) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = a.value().squaredNorm();
  return t.push(std::move(out), {a}, [a](Tape& t, int self) {
    t.grad(a.id) += (2.0 * t.grad(self)(0, 0)) * a.value();
  });
}

Var sum_all(Var a) {
  Tape& t = *a.tape;
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return t.push(std::move(out), {a}, [a](Tape& t, int self) {
    t.grad(a.id).array() += t.grad(self)(0, 0);
  });
}

Var cross_entropy_sum(Var logits, std::span<const int> targets) {
  Tape& t = *logits.tape;
  const Matrix& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows()) {
    throw InternalError("cross_entropy_sum: target count mismatch");
  }
  auto probs = std::make_shared<Matrix>(lv.rows(), lv.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const int y = targets[static_cast<std::size_t>(r)];
    if (y < 0 || y >= lv.cols()) throw DataError("target token out of vocabulary");
    double m = lv.row(r).maxCoeff();
    probs->row(r) = (lv.row(r).array() - m).exp();
    double z = probs->row(r).sum();
    probs->row(r) /= z;
    total += (m + std::log(z)) - lv(r, y);
  }
  Matrix out(1, 1);
  out(0, 0) = total;
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  return t.push(std::move(out), {logits}, [logits, probs, tgt](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    Matrix& gl = t.grad(logits.id);
    gl += g * (*probs);
    for (std::size_t r = 0; r < tgt->size(); ++r) gl(static_cast<Eigen::Index>(r), (*tgt)[r]) -= g;
  });
}

Var straight_through(Var primary, Var passthrough) {
  Tape& t = *primary.tape;
  if (primary.rows() != passthrough.rows() || primary.cols() != passthrough.cols()) {
    throw InternalError("straight_through: shape mismatch");
  }
  Matrix out = primary.value();
  return t.push(std::move(out), {primary, passthrough}, [primary, passthrough](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    if (rg(t, primary)) t.grad(primary.id) += g;
    if (rg(t, passthrough)) t.grad(passthrough.id) += g;
  });
}

Var attention(Var q, Var k, Var v, std::shared_ptr<const SegmentLayout> layout, int heads,
              bool causal) {
  Tape& t = *q.tape;
  const Matrix& qv = q.value();
  const Matrix& kv = k.value();
  const Matrix& vv = v.value();
  const Eigen::Index width = qv.cols();
  const Eigen::Index dh = width / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t segments = layout->q_offsets.size() - 1;
  auto probs = std::make_shared<std::vector<Matrix>>(segments * static_cast<std::size_t>(heads));
  Matrix out = Matrix::Zero(qv.rows(), width);
  for (std::size_t b = 0; b < segments; ++b) {
    const int q0 = layout->q_offsets[b];
    const int nq = layout->q_offsets[b + 1] - q0;
    const int k0 = layout->k_offsets[b];
    const int nk = layout->k_offsets[b + 1] - k0;
    if (causal && nq != nk) throw InternalError("causal attention needs square segments");
    for (int h = 0; h < heads; ++h) {
      Matrix s = qv.block(q0, h * dh, nq, dh) * kv.block(k0, h * dh, nk, dh).transpose();
      s *= sc;
      for (int i = 0; i < nq; ++i) {
        const int limit = causal ? i + 1 : nk;
        double m = s.row(i).head(limit).maxCoeff();
        double z = 0.0;
        for (int j = 0; j < limit; ++j) {
          s(i, j) = std::exp(s(i, j) - m);
          z += s(i, j);
        }
        for (int j = 0; j < limit; ++j) s(i, j) /= z;
        for (int j = limit; j < nk; ++j) s(i, j) = 0.0;
      }
      out.block(q0, h * dh, nq, dh).noalias() = s * vv.block(k0, h * dh, nk, dh);
      (*probs)[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)] = std::move(s);
    }
  }
  return t.push(std::move(out), {q, k, v}, [q, k, v, layout, heads, probs, dh, sc](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    const Matrix& qv = q.value();
    const Matrix& kv = k.value();
    const Matrix& vv = v.value();
    Matrix* gq = rg(t, q) ? &t.grad(q.id) : nullptr;
    Matrix* gk = rg(t, k) ? &t.grad(k.id) : nullptr;
    Matrix* gv = rg(t, v) ? &t.grad(v.id) : nullptr;
    const std::size_t segments = layout->q_offsets.size() - 1;
    for (std::size_t b = 0; b < segments; ++b) {
      const int q0 = layout->q_offsets[b];
      const int nq = layout->q_offsets[b + 1] - q0;
      const int k0 = layout->k_offsets[b];
      const int nk = layout->k_offsets[b + 1] - k0;
      for (int h = 0; h < heads; ++h) {
        const Matrix& p = (*probs)[b * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)];
        auto go = g.block(q0, h * dh, nq, dh);
        if (gv != nullptr) gv->block(k0, h * dh, nk, dh).noalias() += p.transpose() * go;
        Matrix dp = go * vv.block(k0, h * dh, nk, dh).transpose();
        Eigen::VectorXd rs = dp.cwiseProduct(p).rowwise().sum();
        Matrix ds = p.cwiseProduct(dp.colwise() - rs);
        ds *= sc;
        if (gq != nullptr) gq->block(q0, h * dh, nq, dh).noalias() += ds * kv.block(k0, h * dh, nk, dh);
        if (gk != nullptr) gk->block(k0, h * dh, nk, dh).noalias() += ds.transpose() * qv.block(q0, h * dh, nq, dh);
      }
    }
  });
}

namespace {

// Row-wise softmax over all columns (p) and over same-label columns (q).
void contrastive_terms(const Matrix& z, std::span<const int> labels, Matrix* p, Matrix* qm,
                       double* loss) {
  const Eigen::Index b = z.rows();
  Matrix s = z * z.transpose();
  double total = 0.0;
  if (p != nullptr) p->resize(b, b);
  if (qm != nullptr) qm->setZero(b, b);
  for (Eigen::Index i = 0; i < b; ++i) {
    double m_all = -std::numeric_limits<double>::infinity();
    double m_same = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < b; ++j) {
      m_all = std::max(m_all, s(i, j));
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        m_same = std::max(m_same, s(i, j));
      }
    }
    double z_all = 0.0;
    double z_same = 0.0;
    for (Eigen::Index j = 0; j < b; ++j) {
      double e_all = std::exp(s(i, j) - m_all);
      z_all += e_all;
      if (p != nullptr) (*p)(i, j) = e_all;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(i)]) {
        double e_same = std::exp(s(i, j) - m_same);
        z_same += e_same;
        if (qm != nullptr) (*qm)(i, j) = e_same;
      }
    }
    if (p != nullptr) p->row(i) /= z_all;
    if (qm != nullptr) qm->row(i) /= z_same;
    total += (m_all + std::log(z_all)) - (m_same + std::log(z_same));
  }
  *loss = total / static_cast<double>(b);
}

}  // namespace

double domain_contrastive_value(const Matrix& z, std::span<const int> labels) {
  if (z.rows() < 2) throw DataError("contrastive loss needs a batch of at least 2");
  if (static_cast<Eigen::Index>(labels.size()) != z.rows()) throw DataError("label count mismatch");
  double loss = 0.0;
  contrastive_terms(z, labels, nullptr, nullptr, &loss);
  return loss;
}

Var domain_contrastive(Var z, std::span<const int> labels) {
  Tape& t = *z.tape;
  const Matrix& zv = z.value();
  if (zv.rows() < 2) throw DataError("contrastive loss needs a batch of at least 2");
  if (static_cast<Eigen::Index>(labels.size()) != zv.rows()) throw DataError("label count mismatch");
  auto p = std::make_shared<Matrix>();
  auto qm = std::make_shared<Matrix>();
  double loss = 0.0;
  contrastive_terms(zv, labels, p.get(), qm.get(), &loss);
  Matrix out(1, 1);
  out(0, 0) = loss;
  return t.push(std::move(out), {z}, [z, p, qm](Tape& t, int self) {
    const double g = t.grad(self)(0, 0) / static_cast<double>(p->rows());
    Matrix gs = g * (*p - *qm);
    t.grad(z.id).noalias() += (gs + gs.transpose()) * z.value();
  });
}

}  // namespace gmc::ad
