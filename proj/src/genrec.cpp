// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/genrec.hpp"

#include <cmath>
#include <memory>
#include <numeric>
#include <sstream>

#include "gmc/optim.hpp"
#include "gmc/serialize.hpp"

namespace gmc::genrec {

using nlohmann::json;
using identity::TokenVocabulary;

// ---- configuration ---------------------------------------------------------

void Seq2SeqConfig::validate() const {
  if (vocab_size < TokenVocabulary::kSpecials + 1) throw ConfigError("vocabulary too small");
  if (d_model < 1 || heads < 1 || d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (d_ff < 1) throw ConfigError("d_ff must be positive");
  if (encoder_layers < 1 || decoder_layers < 1) throw ConfigError("need at least one encoder and decoder layer");
  if (max_input_tokens < 1 || max_target_tokens < 1) throw ConfigError("sequence limits must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

void to_json(json& j, const Seq2SeqConfig& c) {
  j = json{{"vocab_size", c.vocab_size},
           {"d_model", c.d_model},
           {"heads", c.heads},
           {"d_ff", c.d_ff},
           {"encoder_layers", c.encoder_layers},
           {"decoder_layers", c.decoder_layers},
           {"max_input_tokens", c.max_input_tokens},
           {"max_target_tokens", c.max_target_tokens},
           {"dropout", c.dropout},
           {"seed", c.seed}};
}

void from_json(const json& j, Seq2SeqConfig& c) {
  Seq2SeqConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.heads = j.value("heads", d.heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.encoder_layers = j.value("encoder_layers", d.encoder_layers);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.max_input_tokens = j.value("max_input_tokens", d.max_input_tokens);
  c.max_target_tokens = j.value("max_target_tokens", d.max_target_tokens);
  c.dropout = j.value("dropout", d.dropout);
  c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const LoraConfig& c) { j = json{{"rank", c.rank}, {"alpha", c.alpha}, {"seed", c.seed}}; }

void from_json(const json& j, LoraConfig& c) {
  LoraConfig d;
  c.rank = j.value("rank", d.rank);
  c.alpha = j.value("alpha", d.alpha);
  c.seed = j.value("seed", d.seed);
}

void to_json(json& j, const TrainOptions& o) {
  j = json{{"epochs", o.epochs},           {"batch_size", o.batch_size}, {"learning_rate", o.learning_rate},
           {"weight_decay", o.weight_decay}, {"clip_norm", o.clip_norm},   {"eval_every", o.eval_every},
           {"patience", o.patience},       {"seed", o.seed}};
}

void from_json(const json& j, TrainOptions& o) {
  TrainOptions d;
  o.epochs = j.value("epochs", d.epochs);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.learning_rate = j.value("learning_rate", d.learning_rate);
  o.weight_decay = j.value("weight_decay", d.weight_decay);
  o.clip_norm = j.value("clip_norm", d.clip_norm);
  o.eval_every = j.value("eval_every", d.eval_every);
  o.patience = j.value("patience", d.patience);
  o.seed = j.value("seed", d.seed);
}

// ---- parameters --------------------------------------------------------------

namespace {

Matrix uniform(Eigen::Index r, Eigen::Index c, double bound, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
  return m;
}

Matrix normal(Eigen::Index r, Eigen::Index c, double sd, Rng& rng) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * standard_normal(rng);
  return m;
}

ad::Parameter linear(const std::string& name, int in, int out, Rng& rng) {
  return ad::Parameter(name, uniform(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
}

Norm make_norm(const std::string& name, int w) {
  return Norm{ad::Parameter(name + ".g", Matrix::Ones(1, w)), ad::Parameter(name + ".b", Matrix::Zero(1, w))};
}

Attention make_attention(const std::string& name, int w, Rng& rng) {
  return Attention{linear(name + ".q", w, w, rng), linear(name + ".k", w, w, rng), linear(name + ".v", w, w, rng),
                   linear(name + ".o", w, w, rng)};
}

FeedForward make_ff(const std::string& name, int w, int f, Rng& rng) {
  return FeedForward{linear(name + ".w1", w, f, rng), ad::Parameter(name + ".b1", Matrix::Zero(1, f)),
                     linear(name + ".w2", f, w, rng), ad::Parameter(name + ".b2", Matrix::Zero(1, w))};
}

template <typename Model, typename P>
std::vector<P*> collect(Model& m) {
  std::vector<P*> out{&m.embedding, &m.enc_pos, &m.dec_pos};
  auto norm = [&](auto& n) {
    out.push_back(&n.gamma);
    out.push_back(&n.beta);
  };
  auto attn = [&](auto& a) {
    for (auto* p : {&a.q, &a.k, &a.v, &a.o}) out.push_back(p);
  };
  auto ff = [&](auto& f) {
    for (auto* p : {&f.w1, &f.b1, &f.w2, &f.b2}) out.push_back(p);
  };
  for (auto& l : m.encoder) {
    norm(l.ln1);
    attn(l.attn);
    norm(l.ln2);
    ff(l.ff);
  }
  for (auto& l : m.decoder) {
    norm(l.ln1);
    attn(l.self_attn);
    norm(l.ln2);
    attn(l.cross_attn);
    norm(l.ln3);
    ff(l.ff);
  }
  norm(m.enc_final);
  norm(m.dec_final);
  out.push_back(&m.head_w);
  out.push_back(&m.head_b);
  return out;
}

}  // namespace

Seq2SeqModel Seq2SeqModel::create(const Seq2SeqConfig& config) {
  config.validate();
  Rng rng(config.seed);
  const int w = config.d_model;
  const double emb_sd = 1.0 / std::sqrt(static_cast<double>(w));
  Seq2SeqModel m;
  m.config = config;
  m.embedding = ad::Parameter("embedding", normal(config.vocab_size, w, emb_sd, rng));
  m.enc_pos = ad::Parameter("enc_pos", normal(config.max_input_tokens, w, emb_sd, rng));
  m.dec_pos = ad::Parameter("dec_pos", normal(config.max_target_tokens, w, emb_sd, rng));
  for (int i = 0; i < config.encoder_layers; ++i) {
    const std::string p = "enc." + std::to_string(i);
    m.encoder.push_back(EncoderLayer{make_norm(p + ".ln1", w), make_norm(p + ".ln2", w), make_attention(p + ".attn", w, rng),
                                     make_ff(p + ".ff", w, config.d_ff, rng)});
  }
  for (int i = 0; i < config.decoder_layers; ++i) {
    const std::string p = "dec." + std::to_string(i);
    m.decoder.push_back(DecoderLayer{make_norm(p + ".ln1", w), make_norm(p + ".ln2", w), make_norm(p + ".ln3", w),
                                     make_attention(p + ".self", w, rng), make_attention(p + ".cross", w, rng),
                                     make_ff(p + ".ff", w, config.d_ff, rng)});
  }
  m.enc_final = make_norm("enc.final", w);
  m.dec_final = make_norm("dec.final", w);
  m.head_w = linear("head.w", w, config.vocab_size, rng);
  m.head_b = ad::Parameter("head.b", Matrix::Zero(1, config.vocab_size));
  return m;
}

std::vector<ad::Parameter*> Seq2SeqModel::parameters() { return collect<Seq2SeqModel, ad::Parameter>(*this); }

std::vector<const ad::Parameter*> Seq2SeqModel::parameters() const {
  return collect<const Seq2SeqModel, const ad::Parameter>(*this);
}

long Seq2SeqModel::parameter_count() const {
  long n = 0;
  for (const auto* p : parameters()) n += static_cast<long>(p->size());
  return n;
}

std::string Seq2SeqModel::checksum() const {
  std::vector<const Matrix*> t;
  for (const auto* p : parameters()) t.push_back(&p->value);
  return io::checksum(t);
}

std::vector<const ad::Parameter*> Seq2SeqModel::adapter_sites() const {
  std::vector<const ad::Parameter*> out;
  for (const auto& l : encoder) {
    for (const auto* p : {&l.attn.q, &l.attn.k, &l.attn.v, &l.attn.o}) out.push_back(p);
  }
  for (const auto& l : decoder) {
    for (const auto* p : {&l.self_attn.q, &l.self_attn.k, &l.self_attn.v, &l.self_attn.o}) out.push_back(p);
    for (const auto* p : {&l.cross_attn.q, &l.cross_attn.k, &l.cross_attn.v, &l.cross_attn.o}) out.push_back(p);
  }
  return out;
}

AdapterSet AdapterSet::create(const Seq2SeqModel& model, const LoraConfig& config, int domain) {
  if (config.rank < 1) throw ConfigError("adapter rank must be >= 1");
  if (!(config.alpha > 0.0)) throw ConfigError("adapter alpha must be positive");
  AdapterSet s;
  s.config = config;
  s.domain = domain;
  Rng rng(derive_seed(config.seed, "adapter/" + std::to_string(domain)));
  int idx = 0;
  for (const auto* site : model.adapter_sites()) {
    const auto in = site->value.rows();
    const auto out = site->value.cols();
    const std::string name = "lora." + std::to_string(idx++);
    s.a.emplace_back(name + ".a", uniform(config.rank, in, 1.0 / std::sqrt(static_cast<double>(in)), rng));
    s.b.emplace_back(name + ".b", Matrix::Zero(out, config.rank));
  }
  return s;
}

std::vector<ad::Parameter*> AdapterSet::parameters() {
  std::vector<ad::Parameter*> out;
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.push_back(&a[i]);
    out.push_back(&b[i]);
  }
  return out;
}

long AdapterSet::parameter_count() const {
  long n = 0;
  for (std::size_t i = 0; i < a.size(); ++i) n += static_cast<long>(a[i].size() + b[i].size());
  return n;
}

std::string AdapterSet::checksum() const {
  std::vector<const Matrix*> t;
  for (std::size_t i = 0; i < a.size(); ++i) {
    t.push_back(&a[i].value);
    t.push_back(&b[i].value);
  }
  return io::checksum(t);
}

// ---- tokenization --------------------------------------------------------------

std::vector<int> history_tokens(std::span<const int> history, const identity::Assignment& ids,
                                const TokenVocabulary& vocab, int max_tokens, const TokenizeOptions& options) {
  std::vector<std::vector<int>> items;
  int total = 0;
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    std::vector<int> t = vocab.tokens(ids.ids[static_cast<std::size_t>(*it)]);
    const int extra = static_cast<int>(t.size()) + ((options.item_separator && !items.empty()) ? 1 : 0);
    if (total + extra > max_tokens) break;
    total += extra;
    items.push_back(std::move(t));
  }
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(total));
  for (auto it = items.rbegin(); it != items.rend(); ++it) {
    if (options.item_separator && !out.empty()) out.push_back(TokenVocabulary::kBegin);
    out.insert(out.end(), it->begin(), it->end());
  }
  return out;
}

std::vector<int> target_tokens(int item, const identity::Assignment& ids, const TokenVocabulary& vocab) {
  std::vector<int> t = vocab.tokens(ids.ids[static_cast<std::size_t>(item)]);
  t.push_back(TokenVocabulary::kEnd);
  return t;
}

std::vector<Example> make_examples(std::span<const corpus::Pair> pairs, const identity::Assignment& ids,
                                   const TokenVocabulary& vocab, int max_input_tokens, const TokenizeOptions& options) {
  std::vector<Example> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    Example ex;
    ex.input = history_tokens(p.history, ids, vocab, max_input_tokens, options);
    ex.target = target_tokens(p.target, ids, vocab);
    ex.domain = p.domain;
    ex.target_item = p.target;
    out.push_back(std::move(ex));
  }
  return out;
}

void validate_example(const Example& ex, const Seq2SeqConfig& config) {
  if (ex.input.empty()) throw DataError("example has an empty history");
  if (static_cast<int>(ex.input.size()) > config.max_input_tokens) throw DataError("history longer than max_input_tokens");
  if (ex.target.empty() || static_cast<int>(ex.target.size()) > config.max_target_tokens) {
    throw DataError("target length outside [1, max_target_tokens]");
  }
  for (int t : ex.input) {
    if (t < 0 || t >= config.vocab_size) throw DataError("input token " + std::to_string(t) + " out of vocabulary");
  }
  for (int t : ex.target) {
    if (t < 0 || t >= config.vocab_size) throw DataError("target token " + std::to_string(t) + " out of vocabulary");
  }
}

// ---- training-mode forward ----------------------------------------------------

namespace {

class Graph {
 public:
  Graph(ad::Tape& tape, const Seq2SeqModel& model, const AdapterSet* adapters, const ForwardMode& mode)
      : tape_(tape), model_(model), adapters_(adapters), mode_(mode) {}

  ad::Var param(const ad::Parameter& p) {
    return mode_.grad_backbone ? tape_.leaf(const_cast<ad::Parameter&>(p)) : tape_.reference(p.value);
  }

  ad::Var adapter(const ad::Parameter& p) {
    return mode_.grad_adapters ? tape_.leaf(const_cast<ad::Parameter&>(p)) : tape_.reference(p.value);
  }

  ad::Var proj(ad::Var x, const ad::Parameter& w, int site) {
    ad::Var y = ad::matmul(x, param(w));
    if (adapters_ != nullptr) {
      const auto s = static_cast<std::size_t>(site);
      ad::Var low = ad::matmul_nt(x, adapter(adapters_->a[s]));
      ad::Var delta = ad::matmul_nt(low, adapter(adapters_->b[s]));
      y = ad::add(y, ad::scale(delta, adapters_->config.scale()));
    }
    return y;
  }

  ad::Var norm(ad::Var x, const Norm& n) { return ad::layer_norm(x, param(n.gamma), param(n.beta)); }

  ad::Var drop(ad::Var x) {
    if (mode_.dropout_rng == nullptr || model_.config.dropout <= 0.0) return x;
    return ad::dropout(x, model_.config.dropout, *mode_.dropout_rng);
  }

  ad::Var ff(ad::Var x, const FeedForward& f) {
    ad::Var h = ad::relu(ad::add_row(ad::matmul(x, param(f.w1)), param(f.b1)));
    h = drop(h);
    return ad::add_row(ad::matmul(h, param(f.w2)), param(f.b2));
  }

  ad::Var attend(ad::Var xq, ad::Var xkv, const Attention& a, int site, std::shared_ptr<const ad::SegmentLayout> layout,
                 bool causal) {
    ad::Var q = proj(xq, a.q, site);
    ad::Var k = proj(xkv, a.k, site + 1);
    ad::Var v = proj(xkv, a.v, site + 2);
    ad::Var o = ad::attention(q, k, v, std::move(layout), model_.config.heads, causal);
    return proj(o, a.o, site + 3);
  }

 private:
  ad::Tape& tape_;
  const Seq2SeqModel& model_;
  const AdapterSet* adapters_;
  const ForwardMode& mode_;
};

}  // namespace

ad::Var teacher_forced_logits(ad::Tape& tape, const Seq2SeqModel& model, const AdapterSet* adapters,
                              std::span<const Example* const> batch, const ForwardMode& mode) {
  const auto& cfg = model.config;
  std::vector<int> enc_tok, enc_pos, dec_tok, dec_pos;
  auto enc_layout = std::make_shared<ad::SegmentLayout>();
  auto dec_layout = std::make_shared<ad::SegmentLayout>();
  auto cross_layout = std::make_shared<ad::SegmentLayout>();
  enc_layout->q_offsets.push_back(0);
  dec_layout->q_offsets.push_back(0);
  for (const Example* ex : batch) {
    validate_example(*ex, cfg);
    for (std::size_t i = 0; i < ex->input.size(); ++i) {
      enc_tok.push_back(ex->input[i]);
      enc_pos.push_back(static_cast<int>(i));
    }
    dec_tok.push_back(TokenVocabulary::kBegin);
    dec_pos.push_back(0);
    for (std::size_t i = 0; i + 1 < ex->target.size(); ++i) {
      dec_tok.push_back(ex->target[i]);
      dec_pos.push_back(static_cast<int>(i + 1));
    }
    enc_layout->q_offsets.push_back(static_cast<int>(enc_tok.size()));
    dec_layout->q_offsets.push_back(static_cast<int>(dec_tok.size()));
  }
  enc_layout->k_offsets = enc_layout->q_offsets;
  dec_layout->k_offsets = dec_layout->q_offsets;
  cross_layout->q_offsets = dec_layout->q_offsets;
  cross_layout->k_offsets = enc_layout->q_offsets;

  Graph g(tape, model, adapters, mode);
  ad::Var emb = g.param(model.embedding);
  ad::Var x = ad::add(ad::gather_rows(emb, enc_tok), ad::gather_rows(g.param(model.enc_pos), enc_pos));
  x = g.drop(x);
  int site = 0;
  for (const auto& layer : model.encoder) {
    ad::Var h = g.norm(x, layer.ln1);
    x = ad::add(x, g.drop(g.attend(h, h, layer.attn, site, enc_layout, false)));
    x = ad::add(x, g.drop(g.ff(g.norm(x, layer.ln2), layer.ff)));
    site += 4;
  }
  ad::Var memory = g.norm(x, model.enc_final);

  ad::Var y = ad::add(ad::gather_rows(emb, dec_tok), ad::gather_rows(g.param(model.dec_pos), dec_pos));
  y = g.drop(y);
  for (const auto& layer : model.decoder) {
    ad::Var h = g.norm(y, layer.ln1);
    y = ad::add(y, g.drop(g.attend(h, h, layer.self_attn, site, dec_layout, true)));
    h = g.norm(y, layer.ln2);
    y = ad::add(y, g.drop(g.attend(h, memory, layer.cross_attn, site + 4, cross_layout, false)));
    y = ad::add(y, g.drop(g.ff(g.norm(y, layer.ln3), layer.ff)));
    site += 8;
  }
  y = g.norm(y, model.dec_final);
  return ad::add_row(ad::matmul(y, g.param(model.head_w)), g.param(model.head_b));
}

ad::Var sequence_loss(ad::Tape& tape, const Seq2SeqModel& model, const AdapterSet* adapters,
                      std::span<const Example* const> batch, const ForwardMode& mode) {
  ad::Var logits = teacher_forced_logits(tape, model, adapters, batch, mode);
  std::vector<int> targets;
  for (const Example* ex : batch) targets.insert(targets.end(), ex->target.begin(), ex->target.end());
  ad::Var ce = ad::cross_entropy_sum(logits, targets);
  return ad::scale(ce, 1.0 / static_cast<double>(targets.size()));
}

// ---- inference -------------------------------------------------------------------

namespace {

Eigen::VectorXd row_vec(const Matrix& m) { return m.row(0).transpose(); }

// y = x * w with a fixed accumulation order per output element.
void linear_into(const double* x, const Matrix& w, Eigen::Ref<Eigen::VectorXd> y) {
  y.setZero();
  for (Eigen::Index i = 0; i < w.rows(); ++i) {
    const double xi = x[i];
    y.noalias() += xi * w.row(i).transpose();
  }
}

Eigen::VectorXd linear_vec(const Eigen::VectorXd& x, const Matrix& w) {
  Eigen::VectorXd y(w.cols());
  linear_into(x.data(), w, y);
  return y;
}

Eigen::VectorXd layer_norm_vec(const Eigen::VectorXd& x, const Eigen::VectorXd& g, const Eigen::VectorXd& b) {
  const auto n = x.size();
  double mean = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) mean += x(i);
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) var += (x(i) - mean) * (x(i) - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Eigen::VectorXd out(n);
  for (Eigen::Index i = 0; i < n; ++i) out(i) = (x(i) - mean) * inv * g(i) + b(i);
  return out;
}

// Multi-head attention of one query over rows [0, count) of k and v.
Eigen::VectorXd attend_one(const Eigen::VectorXd& q, const Matrix& k, const Matrix& v, Eigen::Index count, int heads) {
  const Eigen::Index w = q.size();
  const Eigen::Index dh = w / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  Eigen::VectorXd out = Eigen::VectorXd::Zero(w);
  std::vector<double> s(static_cast<std::size_t>(count));
  for (int h = 0; h < heads; ++h) {
    const Eigen::Index off = h * dh;
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < count; ++j) {
      double dot = 0.0;
      for (Eigen::Index c = 0; c < dh; ++c) dot += q(off + c) * k(j, off + c);
      s[static_cast<std::size_t>(j)] = dot * sc;
      mx = std::max(mx, s[static_cast<std::size_t>(j)]);
    }
    double z = 0.0;
    for (Eigen::Index j = 0; j < count; ++j) {
      s[static_cast<std::size_t>(j)] = std::exp(s[static_cast<std::size_t>(j)] - mx);
      z += s[static_cast<std::size_t>(j)];
    }
    for (Eigen::Index j = 0; j < count; ++j) {
      const double p = s[static_cast<std::size_t>(j)] / z;
      for (Eigen::Index c = 0; c < dh; ++c) out(off + c) += p * v(j, off + c);
    }
  }
  return out;
}

Eigen::VectorXd feed_forward(const Eigen::VectorXd& x, const Matrix& w1, const Eigen::VectorXd& b1, const Matrix& w2,
                             const Eigen::VectorXd& b2) {
  Eigen::VectorXd h = linear_vec(x, w1);
  for (Eigen::Index i = 0; i < h.size(); ++i) h(i) = std::max(0.0, h(i) + b1(i));
  Eigen::VectorXd y = linear_vec(h, w2);
  for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += b2(i);
  return y;
}

Matrix merged(const ad::Parameter& w, const AdapterSet* adapters, int site) {
  if (adapters == nullptr) return w.value;
  const auto s = static_cast<std::size_t>(site);
  Matrix delta = adapters->a[s].value.transpose() * adapters->b[s].value.transpose();
  return w.value + adapters->config.scale() * delta;
}

}  // namespace

InferenceSession::InferenceSession(const Seq2SeqModel& model, const AdapterSet* adapters) : config_(model.config) {
  if (adapters != nullptr && adapters->a.size() != model.adapter_sites().size()) {
    throw ProtocolError("adapter set does not match the model");
  }
  embedding_ = model.embedding.value;
  enc_pos_ = model.enc_pos.value;
  dec_pos_ = model.dec_pos.value;
  head_w_ = model.head_w.value;
  head_b_ = row_vec(model.head_b.value);
  enc_final_g_ = row_vec(model.enc_final.gamma.value);
  enc_final_b_ = row_vec(model.enc_final.beta.value);
  dec_final_g_ = row_vec(model.dec_final.gamma.value);
  dec_final_b_ = row_vec(model.dec_final.beta.value);
  int site = 0;
  for (const auto& l : model.encoder) {
    Layer L;
    L.ln1_g = row_vec(l.ln1.gamma.value);
    L.ln1_b = row_vec(l.ln1.beta.value);
    L.ln2_g = row_vec(l.ln2.gamma.value);
    L.ln2_b = row_vec(l.ln2.beta.value);
    L.q = merged(l.attn.q, adapters, site);
    L.k = merged(l.attn.k, adapters, site + 1);
    L.v = merged(l.attn.v, adapters, site + 2);
    L.o = merged(l.attn.o, adapters, site + 3);
    L.w1 = l.ff.w1.value;
    L.b1 = row_vec(l.ff.b1.value);
    L.w2 = l.ff.w2.value;
    L.b2 = row_vec(l.ff.b2.value);
    enc_.push_back(std::move(L));
    site += 4;
  }
  for (const auto& l : model.decoder) {
    Layer L;
    L.ln1_g = row_vec(l.ln1.gamma.value);
    L.ln1_b = row_vec(l.ln1.beta.value);
    L.ln2_g = row_vec(l.ln2.gamma.value);
    L.ln2_b = row_vec(l.ln2.beta.value);
    L.ln3_g = row_vec(l.ln3.gamma.value);
    L.ln3_b = row_vec(l.ln3.beta.value);
    L.q = merged(l.self_attn.q, adapters, site);
    L.k = merged(l.self_attn.k, adapters, site + 1);
    L.v = merged(l.self_attn.v, adapters, site + 2);
    L.o = merged(l.self_attn.o, adapters, site + 3);
    L.cq = merged(l.cross_attn.q, adapters, site + 4);
    L.ck = merged(l.cross_attn.k, adapters, site + 5);
    L.cv = merged(l.cross_attn.v, adapters, site + 6);
    L.co = merged(l.cross_attn.o, adapters, site + 7);
    L.w1 = l.ff.w1.value;
    L.b1 = row_vec(l.ff.b1.value);
    L.w2 = l.ff.w2.value;
    L.b2 = row_vec(l.ff.b2.value);
    dec_.push_back(std::move(L));
    site += 8;
  }
}

InferenceSession::Memory InferenceSession::encode(std::span<const int> input) const {
  if (input.empty()) throw DataError("cannot encode an empty history");
  if (static_cast<int>(input.size()) > config_.max_input_tokens) throw DataError("history longer than max_input_tokens");
  const auto n = static_cast<Eigen::Index>(input.size());
  const int w = config_.d_model;
  Matrix x(n, w);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int t = input[static_cast<std::size_t>(i)];
    if (t < 0 || t >= config_.vocab_size) throw DataError("input token " + std::to_string(t) + " out of vocabulary");
    x.row(i) = embedding_.row(t) + enc_pos_.row(i);
  }
  Matrix q(n, w), k(n, w), v(n, w);
  for (const Layer& L : enc_) {
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd h = layer_norm_vec(x.row(i).transpose(), L.ln1_g, L.ln1_b);
      q.row(i) = linear_vec(h, L.q).transpose();
      k.row(i) = linear_vec(h, L.k).transpose();
      v.row(i) = linear_vec(h, L.v).transpose();
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd a = attend_one(q.row(i).transpose(), k, v, n, config_.heads);
      x.row(i) += linear_vec(a, L.o).transpose();
      Eigen::VectorXd h = layer_norm_vec(x.row(i).transpose(), L.ln2_g, L.ln2_b);
      x.row(i) += feed_forward(h, L.w1, L.b1, L.w2, L.b2).transpose();
    }
  }
  Memory mem;
  Matrix m(n, w);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) = layer_norm_vec(x.row(i).transpose(), enc_final_g_, enc_final_b_).transpose();
  for (const Layer& L : dec_) {
    Matrix ck(n, w), cv(n, w);
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::VectorXd mi = m.row(i).transpose();
      ck.row(i) = linear_vec(mi, L.ck).transpose();
      cv.row(i) = linear_vec(mi, L.cv).transpose();
    }
    mem.k.push_back(std::move(ck));
    mem.v.push_back(std::move(cv));
  }
  return mem;
}

InferenceSession::DecoderState InferenceSession::start() const {
  DecoderState s;
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    s.k.emplace_back(config_.max_target_tokens, config_.d_model);
    s.v.emplace_back(config_.max_target_tokens, config_.d_model);
  }
  return s;
}

Eigen::VectorXd InferenceSession::decoder_hidden(const Memory& memory, DecoderState& state, int token) const {
  if (token < 0 || token >= config_.vocab_size) throw DataError("token " + std::to_string(token) + " out of vocabulary");
  if (state.length >= config_.max_target_tokens) throw DataError("decoder ran past max_target_tokens");
  const int pos = state.length;
  Eigen::VectorXd y = embedding_.row(token).transpose() + dec_pos_.row(pos).transpose();
  for (std::size_t l = 0; l < dec_.size(); ++l) {
    const Layer& L = dec_[l];
    Eigen::VectorXd h = layer_norm_vec(y, L.ln1_g, L.ln1_b);
    Eigen::VectorXd q = linear_vec(h, L.q);
    state.k[l].row(pos) = linear_vec(h, L.k).transpose();
    state.v[l].row(pos) = linear_vec(h, L.v).transpose();
    y += linear_vec(attend_one(q, state.k[l], state.v[l], pos + 1, config_.heads), L.o);
    h = layer_norm_vec(y, L.ln2_g, L.ln2_b);
    q = linear_vec(h, L.cq);
    y += linear_vec(attend_one(q, memory.k[l], memory.v[l], memory.k[l].rows(), config_.heads), L.co);
    h = layer_norm_vec(y, L.ln3_g, L.ln3_b);
    y += feed_forward(h, L.w1, L.b1, L.w2, L.b2);
  }
  state.length = pos + 1;
  return layer_norm_vec(y, dec_final_g_, dec_final_b_);
}

Eigen::VectorXd InferenceSession::step(const Memory& memory, DecoderState& state, int token) const {
  Eigen::VectorXd h = decoder_hidden(memory, state, token);
  Eigen::VectorXd logits = linear_vec(h, head_w_);
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    logits(i) += head_b_(i);
    mx = std::max(mx, logits(i));
  }
  double z = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) z += std::exp(logits(i) - mx);
  const double lz = mx + std::log(z);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits(i) -= lz;
  return logits;
}

double InferenceSession::score_sequence(std::span<const int> input, std::span<const int> target) const {
  if (target.empty()) return 0.0;
  Memory mem = encode(input);
  DecoderState st = start();
  int prev = TokenVocabulary::kBegin;
  double total = 0.0;
  for (int tok : target) {
    if (tok < 0 || tok >= config_.vocab_size) throw DataError("target token out of vocabulary");
    Eigen::VectorXd lp = step(mem, st, prev);
    total += lp(tok);
    prev = tok;
  }
  return total;
}

// ---- training loops ----------------------------------------------------------------

std::string TrainLog::jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    json j{{"epoch", e.epoch}, {"loss", e.loss}};
    if (e.evaluated) j["valid"] = e.valid;
    out += j.dump();
    out.push_back('\n');
  }
  json summary{{"best_epoch", best_epoch}, {"steps", steps}};
  if (std::isfinite(best_score)) summary["best_score"] = best_score;
  if (std::isfinite(initial_score)) summary["initial_score"] = initial_score;
  out += summary.dump();
  out.push_back('\n');
  return out;
}

namespace {

using LossFn = std::function<ad::Var(ad::Tape&, std::span<const Example* const>, Rng&)>;

struct LoopSpec {
  std::vector<ad::Parameter*> params;
  LossFn loss;
  std::function<double()> evaluate;  // may be empty
  bool evaluate_initial = false;
};

std::vector<Matrix> snapshot(const std::vector<ad::Parameter*>& params) {
  std::vector<Matrix> out;
  out.reserve(params.size());
  for (auto* p : params) out.push_back(p->value);
  return out;
}

void restore(const std::vector<ad::Parameter*>& params, const std::vector<Matrix>& values) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
}

TrainLog run_loop(const LoopSpec& spec, std::span<const Example> examples, const TrainOptions& options) {
  if (options.batch_size < 1 || options.epochs < 0 || options.eval_every < 1) {
    throw ConfigError("invalid training options");
  }
  TrainLog log;
  std::vector<Matrix> best;
  if (spec.evaluate && spec.evaluate_initial) {
    log.initial_score = spec.evaluate();
    log.best_score = log.initial_score;
    best = snapshot(spec.params);
  }
  if (examples.empty()) {
    if (!best.empty()) restore(spec.params, best);
    return log;
  }
  AdamWOptions opts;
  opts.learning_rate = options.learning_rate;
  opts.weight_decay = options.weight_decay;
  AdamW optim(spec.params, opts);
  Rng order_rng(derive_seed(options.seed, "order"));
  Rng drop_rng(derive_seed(options.seed, "dropout"));
  std::vector<int> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  int stale = 0;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle(order, order_rng);
    double loss_sum = 0.0;
    int batches = 0;
    for (std::size_t s = 0; s < order.size(); s += static_cast<std::size_t>(options.batch_size)) {
      const std::size_t e = std::min(order.size(), s + static_cast<std::size_t>(options.batch_size));
      std::vector<const Example*> batch;
      for (std::size_t i = s; i < e; ++i) batch.push_back(&examples[static_cast<std::size_t>(order[i])]);
      ad::Tape tape;
      optim.zero_grad();
      ad::Var loss = spec.loss(tape, batch, drop_rng);
      const double v = loss.scalar();
      if (!std::isfinite(v)) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) + " step " +
                            std::to_string(log.steps) + ": loss=" + std::to_string(v));
      }
      tape.backward(loss);
      if (options.clip_norm > 0.0) optim.clip_grad_norm(options.clip_norm);
      optim.step();
      loss_sum += v;
      ++batches;
      ++log.steps;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / batches;
    const bool eval_now = spec.evaluate && ((epoch + 1) % options.eval_every == 0 || epoch + 1 == options.epochs);
    bool stop = false;
    if (eval_now) {
      rec.evaluated = true;
      rec.valid = spec.evaluate();
      if (rec.valid > log.best_score) {
        log.best_score = rec.valid;
        log.best_epoch = epoch;
        best = snapshot(spec.params);
        stale = 0;
      } else if (options.patience > 0 && ++stale >= options.patience) {
        stop = true;
      }
    }
    log.epochs.push_back(rec);
    if (stop) break;
  }
  if (!best.empty()) restore(spec.params, best);
  return log;
}

void check_examples(std::span<const Example> examples, const Seq2SeqConfig& config) {
  for (const auto& ex : examples) validate_example(ex, config);
}

}  // namespace

TrainLog train_unified(Seq2SeqModel& model, std::span<const Example> examples, const TrainOptions& options,
                       const Validator& validator) {
  check_examples(examples, model.config);
  LoopSpec spec;
  spec.params = model.parameters();
  for (auto* p : spec.params) p->trainable = true;
  spec.loss = [&model](ad::Tape& tape, std::span<const Example* const> batch, Rng& rng) {
    ForwardMode mode{true, false, &rng};
    return sequence_loss(tape, model, nullptr, batch, mode);
  };
  if (validator) spec.evaluate = [&]() { return validator(model, nullptr); };
  return run_loop(spec, examples, options);
}

FineTuneResult finetune_domain(const Seq2SeqModel& backbone, int domain, std::span<const Example> examples,
                               const LoraConfig& lora, const TrainOptions& options, const Validator& validator) {
  check_examples(examples, backbone.config);
  FineTuneResult out{AdapterSet::create(backbone, lora, domain), {}};
  AdapterSet& adapters = out.adapters;
  LoopSpec spec;
  spec.params = adapters.parameters();
  spec.loss = [&backbone, &adapters](ad::Tape& tape, std::span<const Example* const> batch, Rng& rng) {
    ForwardMode mode{false, true, &rng};
    return sequence_loss(tape, backbone, &adapters, batch, mode);
  };
  if (validator) spec.evaluate = [&]() { return validator(backbone, &adapters); };
  spec.evaluate_initial = true;
  out.log = run_loop(spec, examples, options);
  return out;
}

FullFineTuneResult full_finetune_domain(const Seq2SeqModel& backbone, std::span<const Example> examples,
                                        const TrainOptions& options, const Validator& validator) {
  check_examples(examples, backbone.config);
  FullFineTuneResult out{backbone, {}};
  Seq2SeqModel& model = out.model;
  LoopSpec spec;
  spec.params = model.parameters();
  for (auto* p : spec.params) p->zero_grad();
  spec.loss = [&model](ad::Tape& tape, std::span<const Example* const> batch, Rng& rng) {
    ForwardMode mode{true, false, &rng};
    return sequence_loss(tape, model, nullptr, batch, mode);
  };
  if (validator) spec.evaluate = [&]() { return validator(model, nullptr); };
  spec.evaluate_initial = true;
  out.log = run_loop(spec, examples, options);
  return out;
}

// ---- checkpoints ---------------------------------------------------------------------

void save_model(const std::filesystem::path& path, const Seq2SeqModel& model) {
  io::Blob blob;
  blob.kind = "seq2seq";
  blob.meta = model.config;
  for (const auto* p : model.parameters()) blob.tensors.emplace_back(p->name, p->value);
  io::write_blob(path, blob);
}

namespace {

void load_into(const io::Blob& blob, const std::vector<ad::Parameter*>& params) {
  for (auto* p : params) {
    const Matrix& m = blob.tensor(p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols()) {
      throw ProtocolError("checkpoint tensor '" + p->name + "' has the wrong shape");
    }
    p->value = m;
    p->zero_grad();
  }
}

}  // namespace

Seq2SeqModel load_model(const std::filesystem::path& path) {
  io::Blob blob = io::read_blob(path, "seq2seq");
  Seq2SeqModel m = Seq2SeqModel::create(blob.meta.get<Seq2SeqConfig>());
  load_into(blob, m.parameters());
  return m;
}

void save_adapters(const std::filesystem::path& path, const AdapterSet& adapters) {
  io::Blob blob;
  blob.kind = "adapters";
  blob.meta = json{{"lora", adapters.config}, {"domain", adapters.domain}, {"sites", adapters.a.size()}};
  for (std::size_t i = 0; i < adapters.a.size(); ++i) {
    blob.tensors.emplace_back(adapters.a[i].name, adapters.a[i].value);
    blob.tensors.emplace_back(adapters.b[i].name, adapters.b[i].value);
  }
  io::write_blob(path, blob);
}

AdapterSet load_adapters(const std::filesystem::path& path, const Seq2SeqModel& model) {
  io::Blob blob = io::read_blob(path, "adapters");
  AdapterSet s = AdapterSet::create(model, blob.meta.at("lora").get<LoraConfig>(), blob.meta.at("domain").get<int>());
  if (blob.meta.at("sites").get<std::size_t>() != s.a.size()) throw ProtocolError("adapter checkpoint does not fit the model");
  load_into(blob, s.parameters());
  return s;
}

}  // namespace gmc::genrec
