// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/optim.hpp"

#include <cmath>

namespace gmc {

AdamW::AdamW(std::vector<ad::Parameter*> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (ad::Parameter* p : params_) {
    m_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(ad::Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void AdamW::zero_grad() {
  for (ad::Parameter* p : params_) p->zero_grad();
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (ad::Parameter* p : params_) {
    if (p->trainable) sq += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (ad::Parameter* p : params_) {
      if (p->trainable) p->grad *= s;
    }
  }
  return norm;
}

void AdamW::step() {
  ++t_;
  const double b1 = options_.beta1;
  const double b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  const double lr = options_.learning_rate;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Parameter* p = params_[i];
    if (!p->trainable) continue;
    if (p->grad.size() != p->value.size()) p->zero_grad();
    m_[i] = b1 * m_[i] + (1.0 - b1) * p->grad;
    v_[i] = b2 * v_[i] + (1.0 - b2) * p->grad.cwiseAbs2();
    if (options_.weight_decay > 0.0) p->value *= (1.0 - lr * options_.weight_decay);
    p->value.array() -=
        lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + options_.eps);
  }
}

}  // namespace gmc
