// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/tokenizer.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "gmc/optim.hpp"
#include "gmc/serialize.hpp"

namespace gmc::tokenizer {

using nlohmann::json;

void QuantizerConfig::validate() const {
  if (levels < 1) throw ConfigError("quantizer levels must be >= 1");
  if (codebook_size < 2) throw ConfigError("codebook size must be >= 2");
  if (latent_dim < 1 || latent_dim > input_dim) throw ConfigError("latent dim must be in [1, input dim]");
  if (!(beta > 0.0)) throw ConfigError("beta must be positive");
  if (dcl_enabled && batch_size < 2) throw ConfigError("contrastive loss needs batch size >= 2");
  if (batch_size < 1) throw ConfigError("batch size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (dcl_warmup_epochs < 0) throw ConfigError("dcl warm-up must be >= 0");
  for (int h : hidden) {
    if (h < 1) throw ConfigError("hidden widths must be positive");
  }
}

void to_json(json& j, const QuantizerConfig& c) {
  j = json{{"input_dim", c.input_dim},
           {"latent_dim", c.latent_dim},
           {"levels", c.levels},
           {"codebook_size", c.codebook_size},
           {"beta", c.beta},
           {"hidden", c.hidden},
           {"dcl_enabled", c.dcl_enabled},
           {"dcl_warmup_epochs", c.dcl_warmup_epochs},
           {"learning_rate", c.learning_rate},
           {"weight_decay", c.weight_decay},
           {"batch_size", c.batch_size},
           {"epochs", c.epochs},
           {"kmeans_init", c.kmeans_init},
           {"kmeans_iterations", c.kmeans_iterations},
           {"reseed_dead_codes", c.reseed_dead_codes},
           {"seed", c.seed}};
}

void from_json(const json& j, QuantizerConfig& c) {
  QuantizerConfig d;
  c.input_dim = j.value("input_dim", d.input_dim);
  c.latent_dim = j.value("latent_dim", d.latent_dim);
  c.levels = j.value("levels", d.levels);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.beta = j.value("beta", d.beta);
  c.hidden = j.value("hidden", d.hidden);
  c.dcl_enabled = j.value("dcl_enabled", d.dcl_enabled);
  c.dcl_warmup_epochs = j.value("dcl_warmup_epochs", d.dcl_warmup_epochs);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.kmeans_init = j.value("kmeans_init", d.kmeans_init);
  c.kmeans_iterations = j.value("kmeans_iterations", d.kmeans_iterations);
  c.reseed_dead_codes = j.value("reseed_dead_codes", d.reseed_dead_codes);
  c.seed = j.value("seed", d.seed);
}

Mlp Mlp::create(const std::string& prefix, const std::vector<int>& widths, Rng& rng) {
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
    const int in = widths[i];
    const int out = widths[i + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    Matrix w(in, out);
    for (Eigen::Index k = 0; k < w.size(); ++k) w.data()[k] = (2.0 * uniform01(rng) - 1.0) * bound;
    Matrix b(1, out);
    for (Eigen::Index k = 0; k < b.size(); ++k) b.data()[k] = (2.0 * uniform01(rng) - 1.0) * bound;
    mlp.weights.emplace_back(prefix + ".w" + std::to_string(i), std::move(w));
    mlp.biases.emplace_back(prefix + ".b" + std::to_string(i), std::move(b));
  }
  return mlp;
}

ad::Var Mlp::forward(ad::Tape& tape, ad::Var x) {
  ad::Var h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    h = ad::add_row(ad::matmul(h, tape.leaf(weights[i])), tape.leaf(biases[i]));
    if (i + 1 < weights.size()) h = ad::relu(h);
  }
  return h;
}

Matrix Mlp::apply(const Matrix& x) const {
  Matrix h = x;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    Matrix next = h * weights[i].value;
    next.rowwise() += biases[i].value.row(0);
    if (i + 1 < weights.size()) next = next.cwiseMax(0.0);
    h = std::move(next);
  }
  return h;
}

QuantizerState QuantizerState::create(const QuantizerConfig& config, Rng& rng) {
  config.validate();
  QuantizerState s;
  s.config = config;
  std::vector<int> enc{config.input_dim};
  enc.insert(enc.end(), config.hidden.begin(), config.hidden.end());
  enc.push_back(config.latent_dim);
  std::vector<int> dec(enc.rbegin(), enc.rend());
  s.encoder = Mlp::create("encoder", enc, rng);
  s.decoder = Mlp::create("decoder", dec, rng);
  for (int l = 0; l < config.levels; ++l) {
    Matrix cb(config.codebook_size, config.latent_dim);
    for (Eigen::Index k = 0; k < cb.size(); ++k) cb.data()[k] = 0.1 * standard_normal(rng);
    s.codebooks.emplace_back("codebook" + std::to_string(l), std::move(cb));
  }
  return s;
}

std::vector<ad::Parameter*> QuantizerState::parameters() {
  std::vector<ad::Parameter*> out;
  for (Mlp* m : {&encoder, &decoder}) {
    for (std::size_t i = 0; i < m->weights.size(); ++i) {
      out.push_back(&m->weights[i]);
      out.push_back(&m->biases[i]);
    }
  }
  for (auto& cb : codebooks) out.push_back(&cb);
  return out;
}

std::vector<const ad::Matrix*> QuantizerState::tensors() const {
  std::vector<const ad::Matrix*> out;
  for (const Mlp* m : {&encoder, &decoder}) {
    for (std::size_t i = 0; i < m->weights.size(); ++i) {
      out.push_back(&m->weights[i].value);
      out.push_back(&m->biases[i].value);
    }
  }
  for (const auto& cb : codebooks) out.push_back(&cb.value);
  return out;
}

namespace {

void check_input(const Matrix& x, int dim) {
  if (x.cols() != dim) {
    throw DataError("embedding has dimension " + std::to_string(x.cols()) + ", quantizer expects " +
                    std::to_string(dim));
  }
  if (!x.allFinite()) throw DataError("embedding contains non-finite values");
}

}  // namespace

Matrix encode_batch(const Matrix& x, const QuantizerState& state) {
  check_input(x, state.config.input_dim);
  return state.encoder.apply(x);
}

Eigen::VectorXd encode(const Eigen::VectorXd& x, const QuantizerState& state) {
  Matrix row = x.transpose();
  return encode_batch(row, state).row(0).transpose();
}

int nearest_code(const Eigen::Ref<const Eigen::RowVectorXd>& r, const Matrix& codebook) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  const Eigen::Index d = codebook.cols();
  for (Eigen::Index k = 0; k < codebook.rows(); ++k) {
    double dist = 0.0;
    for (Eigen::Index j = 0; j < d; ++j) {
      const double diff = r(j) - codebook(k, j);
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(k);
    }
  }
  return best;
}

QuantizationResult residual_quantize(const Eigen::VectorXd& z, std::span<const Matrix> codebooks) {
  QuantizationResult out;
  out.quantized = Eigen::VectorXd::Zero(z.size());
  out.residuals.push_back(z);
  for (const Matrix& cb : codebooks) {
    if (cb.cols() != z.size()) throw DataError("codebook width does not match latent dimension");
    const Eigen::VectorXd& r = out.residuals.back();
    const int c = nearest_code(r.transpose(), cb);
    out.codes.push_back(c);
    const Eigen::VectorXd e = cb.row(c).transpose();
    out.quantized += e;
    out.residuals.push_back(r - e);
  }
  return out;
}

QuantizationResult residual_quantize(const Eigen::VectorXd& z, const QuantizerState& state) {
  std::vector<Matrix> cbs;
  for (const auto& p : state.codebooks) cbs.push_back(p.value);
  return residual_quantize(z, cbs);
}

std::vector<std::vector<int>> quantize_items(const Matrix& x, const QuantizerState& state) {
  Matrix z = encode_batch(x, state);
  std::vector<Matrix> cbs;
  for (const auto& p : state.codebooks) cbs.push_back(p.value);
  std::vector<std::vector<int>> codes;
  codes.reserve(static_cast<std::size_t>(z.rows()));
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    codes.push_back(residual_quantize(z.row(i).transpose(), cbs).codes);
  }
  return codes;
}

LossGraph build_losses(ad::Tape& tape, QuantizerState& state, const Matrix& x, std::span<const int> domains,
                       bool with_dcl) {
  const auto& cfg = state.config;
  check_input(x, cfg.input_dim);
  const Eigen::Index b = x.rows();
  if (b < 1) throw DataError("empty batch");
  const double inv_b = 1.0 / static_cast<double>(b);

  LossGraph g;
  ad::Var xv = tape.constant(x);
  ad::Var z = state.encoder.forward(tape, xv);
  g.latent = z.value();

  const int levels = cfg.levels;
  std::vector<std::vector<int>> level_codes(static_cast<std::size_t>(levels), std::vector<int>(static_cast<std::size_t>(b)));
  g.codes.assign(static_cast<std::size_t>(b), std::vector<int>(static_cast<std::size_t>(levels)));
  g.residual_inputs.assign(static_cast<std::size_t>(levels), Matrix(b, cfg.latent_dim));
  g.quantized = Matrix::Zero(b, cfg.latent_dim);
  for (Eigen::Index i = 0; i < b; ++i) {
    Eigen::RowVectorXd r = g.latent.row(i);
    for (int l = 0; l < levels; ++l) {
      g.residual_inputs[static_cast<std::size_t>(l)].row(i) = r;
      const Matrix& cb = state.codebooks[static_cast<std::size_t>(l)].value;
      const int c = nearest_code(r, cb);
      level_codes[static_cast<std::size_t>(l)][static_cast<std::size_t>(i)] = c;
      g.codes[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)] = c;
      g.quantized.row(i) += cb.row(c);
      r -= cb.row(c);
    }
  }

  // Codebook term moves entries toward the frozen residual; commitment term
  // moves z toward the frozen quantization of its residual.
  Matrix prefix = Matrix::Zero(b, cfg.latent_dim);
  ad::Var codebook_sum{};
  ad::Var commit_sum{};
  ad::Var zq{};
  for (int l = 0; l < levels; ++l) {
    ad::Var e = ad::gather_rows(tape.leaf(state.codebooks[static_cast<std::size_t>(l)]),
                                level_codes[static_cast<std::size_t>(l)]);
    ad::Var cb_term = ad::sum_squares(ad::sub(tape.constant(g.residual_inputs[static_cast<std::size_t>(l)]), e));
    prefix += e.value();
    ad::Var commit_term = ad::sum_squares(ad::sub(z, tape.constant(prefix)));
    codebook_sum = l == 0 ? cb_term : ad::add(codebook_sum, cb_term);
    commit_sum = l == 0 ? commit_term : ad::add(commit_sum, commit_term);
    zq = l == 0 ? e : ad::add(zq, e);
  }
  g.codebook = ad::scale(codebook_sum, inv_b);
  g.commitment = ad::scale(commit_sum, cfg.beta * inv_b);
  g.rq = ad::add(g.codebook, g.commitment);

  ad::Var z_st = ad::straight_through(tape.constant(g.quantized), z);
  ad::Var x_hat = state.decoder.forward(tape, z_st);
  g.recon = ad::scale(ad::sum_squares(ad::sub(xv, x_hat)), inv_b);
  g.total = ad::add(g.recon, g.rq);

  if (with_dcl) {
    if (static_cast<Eigen::Index>(domains.size()) != b) throw DataError("domain labels do not match batch");
    ad::Var zq_st = ad::straight_through(zq, z);
    g.dcl = ad::domain_contrastive(zq_st, domains);
    g.has_dcl = true;
    g.total = ad::add(g.total, g.dcl);
  }
  return g;
}

RqLosses rqvae_losses(const Matrix& x, const QuantizerState& state) {
  ad::Tape tape(false);
  // The graph only reads parameters on a gradient-free tape.
  auto& mutable_state = const_cast<QuantizerState&>(state);
  LossGraph g = build_losses(tape, mutable_state, x, {}, false);
  return {g.recon.scalar(), g.rq.scalar()};
}

double dcl_loss(const Matrix& quantized, std::span<const int> domains) {
  return ad::domain_contrastive_value(quantized, domains);
}

Matrix kmeans(const Matrix& points, int k, int iterations, Rng& rng) {
  const Eigen::Index n = points.rows();
  const Eigen::Index d = points.cols();
  if (n < 1 || k < 1) throw DataError("k-means needs points and k >= 1");
  Matrix centers(k, d);
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(n, std::numeric_limits<double>::infinity());
  auto update_dist = [&](int c) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dd = (points.row(i) - centers.row(c)).squaredNorm();
      if (dd < dist(i)) dist(i) = dd;
    }
  };
  centers.row(0) = points.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
  update_dist(0);
  for (int c = 1; c < k; ++c) {
    const double total = dist.sum();
    if (total > 0.0) {
      double u = uniform01(rng) * total;
      Eigen::Index pick = n - 1;
      for (Eigen::Index i = 0; i < n; ++i) {
        u -= dist(i);
        if (u < 0.0 && dist(i) > 0.0) {
          pick = i;
          break;
        }
      }
      centers.row(c) = points.row(pick);
    } else {
      const Eigen::Index src = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
      for (Eigen::Index j = 0; j < d; ++j) centers(c, j) = points(src, j) + 1e-3 * standard_normal(rng);
    }
    update_dist(c);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      const int c = nearest_code(points.row(i), centers);
      if (c != assign[static_cast<std::size_t>(i)]) {
        assign[static_cast<std::size_t>(i)] = c;
        changed = true;
      }
    }
    if (!changed) break;
    Matrix sums = Matrix::Zero(k, d);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assign[static_cast<std::size_t>(i)]) += points.row(i);
      ++counts[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) centers.row(c) = sums.row(c) / counts[static_cast<std::size_t>(c)];
    }
  }
  return centers;
}

namespace {

void kmeans_init(QuantizerState& state, const Matrix& batch, Rng& rng) {
  Matrix r = encode_batch(batch, state);
  for (auto& cb : state.codebooks) {
    cb.value = kmeans(r, state.config.codebook_size, state.config.kmeans_iterations, rng);
    for (Eigen::Index i = 0; i < r.rows(); ++i) r.row(i) -= cb.value.row(nearest_code(r.row(i), cb.value));
  }
}

std::string describe(const StepLog& s, int epoch, int step) {
  std::ostringstream os;
  os << "quantizer diverged at epoch " << epoch << " step " << step << ": recon=" << s.recon << " rq=" << s.rq
     << " dcl=" << s.dcl << " total=" << s.total;
  return os.str();
}

}  // namespace

TrainedQuantizer train_quantizer(const Matrix& x, std::span<const int> domains, const QuantizerConfig& config) {
  config.validate();
  check_input(x, config.input_dim);
  const Eigen::Index n = x.rows();
  if (n < 1) throw DataError("no items to train the quantizer on");
  if (static_cast<Eigen::Index>(domains.size()) != n) throw DataError("one domain label per item is required");
  if (config.dcl_enabled && n < 2) throw DataError("contrastive loss needs at least two items");

  Rng rng(config.seed);
  TrainedQuantizer out;
  out.state = QuantizerState::create(config, rng);
  QuantizerState& state = out.state;
  AdamWOptions opts;
  opts.learning_rate = config.learning_rate;
  opts.weight_decay = config.weight_decay;
  AdamW optim(state.parameters(), opts);

  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const int levels = config.levels;
  const int codes = config.codebook_size;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    std::vector<std::pair<std::size_t, std::size_t>> batches;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(config.batch_size)) {
      batches.emplace_back(s, std::min(order.size(), s + static_cast<std::size_t>(config.batch_size)));
    }
    if (batches.size() > 1 && batches.back().second - batches.back().first < 2) {
      batches[batches.size() - 2].second = batches.back().second;
      batches.pop_back();
    }
    const bool dcl_on = config.dcl_enabled && epoch >= config.dcl_warmup_epochs;
    std::vector<std::vector<int>> usage(static_cast<std::size_t>(levels), std::vector<int>(static_cast<std::size_t>(codes), 0));
    EpochLog log;
    log.epoch = epoch;
    log.dcl_active = dcl_on;
    std::vector<Matrix> last_residuals;

    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto [lo, hi] = batches[bi];
      const auto bsz = static_cast<Eigen::Index>(hi - lo);
      Matrix xb(bsz, x.cols());
      std::vector<int> db(static_cast<std::size_t>(bsz));
      for (Eigen::Index i = 0; i < bsz; ++i) {
        const int src = order[lo + static_cast<std::size_t>(i)];
        xb.row(i) = x.row(src);
        db[static_cast<std::size_t>(i)] = domains[static_cast<std::size_t>(src)];
      }
      if (epoch == 0 && bi == 0 && config.kmeans_init) kmeans_init(state, xb, rng);

      ad::Tape tape;
      optim.zero_grad();
      LossGraph g = build_losses(tape, state, xb, db, dcl_on && bsz >= 2);
      StepLog step;
      step.recon = g.recon.scalar();
      step.rq = g.rq.scalar();
      step.dcl = g.has_dcl ? g.dcl.scalar() : 0.0;
      step.total = g.total.scalar();
      if (!std::isfinite(step.total)) throw TrainingError(describe(step, epoch, static_cast<int>(bi)));
      tape.backward(g.total);
      optim.step();
      out.steps.push_back(step);

      const double w = static_cast<double>(bsz) / static_cast<double>(n);
      log.recon += w * step.recon;
      log.rq += w * step.rq;
      log.dcl += w * step.dcl;
      for (const auto& row : g.codes) {
        for (int l = 0; l < levels; ++l) ++usage[static_cast<std::size_t>(l)][static_cast<std::size_t>(row[static_cast<std::size_t>(l)])];
      }
      last_residuals = std::move(g.residual_inputs);
    }
    log.total = log.recon + log.rq + log.dcl;
    for (int l = 0; l < levels; ++l) {
      int used = 0;
      for (int c : usage[static_cast<std::size_t>(l)]) used += c > 0 ? 1 : 0;
      log.utilization.push_back(static_cast<double>(used) / codes);
    }
    if (config.reseed_dead_codes && epoch + 1 < config.epochs && !last_residuals.empty()) {
      for (int l = 0; l < levels; ++l) {
        const Matrix& pool = last_residuals[static_cast<std::size_t>(l)];
        Matrix& cb = state.codebooks[static_cast<std::size_t>(l)].value;
        for (int c = 0; c < codes; ++c) {
          if (usage[static_cast<std::size_t>(l)][static_cast<std::size_t>(c)] == 0) {
            cb.row(c) = pool.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(pool.rows()))));
            ++log.reseeded;
          }
        }
      }
    }
    out.epochs.push_back(std::move(log));
  }
  return out;
}

void save_quantizer(const std::filesystem::path& path, const QuantizerState& state) {
  io::Blob blob;
  blob.kind = "quantizer";
  blob.meta = state.config;
  for (const Mlp* m : {&state.encoder, &state.decoder}) {
    for (std::size_t i = 0; i < m->weights.size(); ++i) {
      blob.tensors.emplace_back(m->weights[i].name, m->weights[i].value);
      blob.tensors.emplace_back(m->biases[i].name, m->biases[i].value);
    }
  }
  for (const auto& cb : state.codebooks) blob.tensors.emplace_back(cb.name, cb.value);
  io::write_blob(path, blob);
}

QuantizerState load_quantizer(const std::filesystem::path& path) {
  io::Blob blob = io::read_blob(path, "quantizer");
  QuantizerConfig config = blob.meta.get<QuantizerConfig>();
  Rng rng(0);
  QuantizerState state = QuantizerState::create(config, rng);
  for (ad::Parameter* p : state.parameters()) {
    const Matrix& m = blob.tensor(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw ProtocolError("checkpoint tensor '" + p->name + "' has the wrong shape");
    }
    p->value = m;
    p->zero_grad();
  }
  return state;
}

std::string training_log_jsonl(const std::vector<EpochLog>& log) {
  std::string out;
  for (const auto& e : log) {
    json j{{"epoch", e.epoch},       {"recon", e.recon}, {"rq", e.rq},
           {"dcl", e.dcl},           {"total", e.total}, {"dcl_active", e.dcl_active},
           {"utilization", e.utilization}, {"reseeded", e.reseeded}};
    out += j.dump();
    out.push_back('\n');
  }
  return out;
}

}  // namespace gmc::tokenizer
