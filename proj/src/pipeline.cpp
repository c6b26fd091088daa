// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmc/pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "gmc/embed.hpp"
#include "gmc/serialize.hpp"

namespace gmc::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

// ---- configuration -------------------------------------------------------------

namespace {

std::string expansion_name(corpus::TrainExpansion e) {
  return e == corpus::TrainExpansion::kAllPrefixes ? "all_prefixes" : "final_only";
}

corpus::TrainExpansion parse_expansion(const std::string& s) {
  if (s == "all_prefixes") return corpus::TrainExpansion::kAllPrefixes;
  if (s == "final_only") return corpus::TrainExpansion::kFinalOnly;
  throw ConfigError("unknown train expansion '" + s + "'");
}

std::string finetune_name(FinetuneMode m) {
  switch (m) {
    case FinetuneMode::kNone: return "none";
    case FinetuneMode::kLora: return "lora";
    case FinetuneMode::kFull: return "full";
  }
  return "lora";
}

FinetuneMode parse_finetune(const std::string& s) {
  if (s == "none") return FinetuneMode::kNone;
  if (s == "lora") return FinetuneMode::kLora;
  if (s == "full") return FinetuneMode::kFull;
  throw ConfigError("unknown finetune mode '" + s + "' (none, lora, full)");
}

std::string score_mode_name(decode::ScoreMode m) {
  return m == decode::ScoreMode::kModel ? "model" : "masked_renormalized";
}

decode::ScoreMode parse_score_mode(const std::string& s) {
  if (s == "model") return decode::ScoreMode::kModel;
  if (s == "masked_renormalized") return decode::ScoreMode::kMaskedRenormalized;
  throw ConfigError("unknown score mode '" + s + "'");
}

std::string distance_name(eval::Distance d) { return d == eval::Distance::kEuclidean ? "euclidean" : "cosine"; }

eval::Distance parse_distance(const std::string& s) {
  if (s == "euclidean") return eval::Distance::kEuclidean;
  if (s == "cosine") return eval::Distance::kCosine;
  throw ConfigError("unknown distance '" + s + "'");
}

json synthetic_json(const corpus::SyntheticSpec& s) {
  json domains = json::array();
  for (const auto& d : s.domains) {
    domains.push_back(json{{"name", d.name},
                           {"n_items", d.n_items},
                           {"n_users", d.n_users},
                           {"n_topics", d.n_topics},
                           {"pattern_strength", d.pattern_strength},
                           {"min_length", d.min_length},
                           {"max_length", d.max_length}});
  }
  return json{{"domains", domains}, {"n_attributes", s.n_attributes}, {"max_len", s.max_len}};
}

corpus::SyntheticSpec synthetic_from(const json& j, const corpus::SyntheticSpec& d) {
  corpus::SyntheticSpec s = d;
  s.n_attributes = j.value("n_attributes", d.n_attributes);
  s.max_len = j.value("max_len", d.max_len);
  if (j.contains("domains")) {
    s.domains.clear();
    for (const auto& e : j.at("domains")) {
      corpus::SyntheticDomainSpec x;
      x.name = e.at("name").get<std::string>();
      x.n_items = e.value("n_items", x.n_items);
      x.n_users = e.value("n_users", x.n_users);
      x.n_topics = e.value("n_topics", x.n_topics);
      x.pattern_strength = e.value("pattern_strength", x.pattern_strength);
      x.min_length = e.value("min_length", x.min_length);
      x.max_length = e.value("max_length", x.max_length);
      s.domains.push_back(x);
    }
  }
  return s;
}

// Merges `patch` into `base` key by key so partial config files keep defaults.
void merge(json& base, const json& patch) {
  if (!patch.is_object() || !base.is_object()) {
    base = patch;
    return;
  }
  for (auto it = patch.begin(); it != patch.end(); ++it) {
    if (base.contains(it.key())) {
      merge(base[it.key()], it.value());
    } else {
      base[it.key()] = it.value();
    }
  }
}

}  // namespace

RunConfig::RunConfig() {
  for (const char* n : {"books", "games", "tools"}) {
    corpus::SyntheticDomainSpec d;
    d.name = n;
    data.synthetic.domains.push_back(d);
  }
  model.vocab_size = 0;  // filled from the vocabulary
  train.batch_size = 1024;
  train.learning_rate = 2e-3;
  finetune.batch_size = 512;
  finetune.learning_rate = 5e-4;
  finetune.patience = 5;
}

void RunConfig::validate() const {
  if (data.source != "synthetic" && data.source != "files") throw ConfigError("data.source must be synthetic or files");
  if (data.source == "synthetic" && data.synthetic.domains.size() < 2) throw ConfigError("synthetic data needs >= 2 domains");
  if (data.source == "files" && data.files.empty()) throw ConfigError("data.files lists no domains");
  if (data.k_core < 1 || data.max_len < 3) throw ConfigError("data.k_core >= 1 and data.max_len >= 3 required");
  if (embed.provider != "hash" && embed.provider != "remote") throw ConfigError("embed.provider must be hash or remote");
  if (embed.dim < 1) throw ConfigError("embed.dim must be positive");
  if (quantizer.input_dim != embed.dim) throw ConfigError("quantizer.input_dim must equal embed.dim");
  quantizer.validate();
  const int need = (data.max_len - 1) * (quantizer.levels + (tokenize.item_separator ? 2 : 1));
  if (model.max_input_tokens < need) {
    throw ConfigError("model.max_input_tokens must be >= " + std::to_string(need) + " for max_len " +
                      std::to_string(data.max_len));
  }
  if (model.max_target_tokens < quantizer.levels + 2) throw ConfigError("model.max_target_tokens must be >= levels + 2");
  if (decode.beam_size < 1) throw ConfigError("decode.beam_size must be >= 1");
  if (eval.cutoffs.empty()) throw ConfigError("eval.cutoffs is empty");
  for (int k : eval.cutoffs) {
    if (k < 1) throw ConfigError("eval.cutoffs must be >= 1");
  }
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (lora.rank < 1 || !(lora.alpha > 0)) throw ConfigError("lora.rank >= 1 and lora.alpha > 0 required");
}

void to_json(json& j, const RunConfig& c) {
  json files = json::array();
  for (const auto& f : c.data.files) {
    files.push_back(json{{"name", f.name}, {"metadata", f.metadata.string()}, {"interactions", f.interactions.string()}});
  }
  j = json{{"name", c.name},
           {"seed", c.seed},
           {"output_dir", c.output_dir.string()},
           {"workers", c.workers},
           {"data",
            {{"source", c.data.source},
             {"synthetic", synthetic_json(c.data.synthetic)},
             {"files", files},
             {"k_core", c.data.k_core},
             {"max_len", c.data.max_len},
             {"train_expansion", expansion_name(c.data.expansion)},
             {"text_separator", c.data.text_separator}}},
           {"embed",
            {{"provider", c.embed.provider},
             {"dim", c.embed.dim},
             {"text_noise", c.embed.text_noise},
             {"standardize", c.embed.standardize},
             {"cache_file", c.embed.cache_file},
             {"batch_limit", c.embed.batch_limit},
             {"max_attempts", c.embed.max_attempts},
             {"parallelism", c.embed.parallelism}}},
           {"quantizer", c.quantizer},
           {"identity", {{"disamb_cap", c.disamb_cap}}},
           {"tokenize", {{"item_separator", c.tokenize.item_separator}}},
           {"model", c.model},
           {"train", c.train},
           {"lora", c.lora},
           {"finetune", c.finetune},
           {"decode", {{"beam_size", c.decode.beam_size}, {"score_mode", score_mode_name(c.decode.score_mode)}}},
           {"eval",
            {{"cutoffs", c.eval.cutoffs},
             {"overlap_k", c.eval.overlap_k},
             {"distance", distance_name(c.eval.distance)},
             {"top_codes", c.eval.top_codes},
             {"validation_users", c.eval.validation_users}}},
           {"ablation",
            {{"shared_codebook", c.ablation.shared_codebook},
             {"unified_recommender", c.ablation.unified_recommender},
             {"dcl", c.ablation.dcl},
             {"finetune", finetune_name(c.ablation.finetune)}}}};
}

void from_json(const json& patch, RunConfig& c) {
  json j = RunConfig();
  merge(j, patch);
  c = RunConfig();
  c.name = j.at("name").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.output_dir = j.at("output_dir").get<std::string>();
  c.workers = j.at("workers").get<int>();
  const json& d = j.at("data");
  c.data.source = d.at("source").get<std::string>();
  c.data.synthetic = synthetic_from(d.at("synthetic"), c.data.synthetic);
  c.data.files.clear();
  for (const auto& f : d.at("files")) {
    c.data.files.push_back(FileDomain{f.at("name").get<std::string>(), f.at("metadata").get<std::string>(),
                                      f.at("interactions").get<std::string>()});
  }
  c.data.k_core = d.at("k_core").get<int>();
  c.data.max_len = d.at("max_len").get<int>();
  c.data.expansion = parse_expansion(d.at("train_expansion").get<std::string>());
  c.data.text_separator = d.at("text_separator").get<std::string>();
  const json& e = j.at("embed");
  c.embed.provider = e.at("provider").get<std::string>();
  c.embed.dim = e.at("dim").get<int>();
  c.embed.text_noise = e.at("text_noise").get<double>();
  c.embed.standardize = e.at("standardize").get<bool>();
  c.embed.cache_file = e.at("cache_file").get<std::string>();
  c.embed.batch_limit = e.at("batch_limit").get<int>();
  c.embed.max_attempts = e.at("max_attempts").get<int>();
  c.embed.parallelism = e.at("parallelism").get<int>();
  c.quantizer = j.at("quantizer").get<tokenizer::QuantizerConfig>();
  c.disamb_cap = j.at("identity").at("disamb_cap").get<int>();
  c.tokenize.item_separator = j.at("tokenize").at("item_separator").get<bool>();
  c.model = j.at("model").get<genrec::Seq2SeqConfig>();
  c.train = j.at("train").get<genrec::TrainOptions>();
  c.lora = j.at("lora").get<genrec::LoraConfig>();
  c.finetune = j.at("finetune").get<genrec::TrainOptions>();
  c.decode.beam_size = j.at("decode").at("beam_size").get<int>();
  c.decode.score_mode = parse_score_mode(j.at("decode").at("score_mode").get<std::string>());
  const json& ev = j.at("eval");
  c.eval.cutoffs = ev.at("cutoffs").get<std::vector<int>>();
  c.eval.overlap_k = ev.at("overlap_k").get<std::vector<int>>();
  c.eval.distance = parse_distance(ev.at("distance").get<std::string>());
  c.eval.top_codes = ev.at("top_codes").get<int>();
  c.eval.validation_users = ev.at("validation_users").get<int>();
  const json& a = j.at("ablation");
  c.ablation.shared_codebook = a.at("shared_codebook").get<bool>();
  c.ablation.unified_recommender = a.at("unified_recommender").get<bool>();
  c.ablation.dcl = a.at("dcl").get<bool>();
  c.ablation.finetune = parse_finetune(a.at("finetune").get<std::string>());
}

std::string RunConfig::hash() const {
  json j = *this;
  j.erase("name");
  j.erase("output_dir");
  j.erase("workers");
  return sha256_hex(j.dump());
}

RunConfig load_config(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path.string() + ": " + e.what());
  }
  try {
    return j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("invalid configuration in " + path.string() + ": " + e.what());
  }
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json j = config;
  json* node = &j;
  for (const auto& part : split(key, '.')) {
    if (!node->is_object() || !node->contains(part)) throw ConfigError("unknown configuration key '" + key + "'");
    node = &(*node)[part];
  }
  *node = value;
  try {
    config = j.get<RunConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("invalid value for '" + key + "': " + e.what());
  }
}

// ---- stages -------------------------------------------------------------------------

const std::vector<Stage>& all_stages() {
  static const std::vector<Stage> stages{Stage::kCorpus, Stage::kEmbed,  Stage::kTokenize,
                                         Stage::kAssign, Stage::kTrain,  Stage::kFinetune,
                                         Stage::kDecode, Stage::kEvaluate, Stage::kAnalyze};
  return stages;
}

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kCorpus: return "corpus";
    case Stage::kEmbed: return "embed";
    case Stage::kTokenize: return "tokenize";
    case Stage::kAssign: return "assign";
    case Stage::kTrain: return "train";
    case Stage::kFinetune: return "finetune";
    case Stage::kDecode: return "decode";
    case Stage::kEvaluate: return "evaluate";
    case Stage::kAnalyze: return "analyze";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  for (Stage s : all_stages()) {
    if (stage_name(s) == name) return s;
  }
  if (name == "ingest" || name == "synth") return Stage::kCorpus;
  throw ConfigError("unknown stage '" + name + "'");
}

namespace {

std::vector<Stage> upstream_of(Stage s) {
  switch (s) {
    case Stage::kCorpus: return {};
    case Stage::kEmbed: return {Stage::kCorpus};
    case Stage::kTokenize: return {Stage::kEmbed};
    case Stage::kAssign: return {Stage::kTokenize};
    case Stage::kTrain: return {Stage::kAssign};
    case Stage::kFinetune: return {Stage::kTrain};
    case Stage::kDecode: return {Stage::kFinetune};
    case Stage::kEvaluate: return {Stage::kDecode};
    case Stage::kAnalyze: return {Stage::kAssign};
  }
  return {};
}

// Configuration sections that affect each stage's own output.
json stage_inputs(Stage s, const RunConfig& c) {
  json full = c;
  switch (s) {
    case Stage::kCorpus: return json{{"seed", c.seed}, {"data", full["data"]}};
    case Stage::kEmbed: return full["embed"];
    case Stage::kTokenize:
      return json{{"seed", c.seed},
                  {"quantizer", full["quantizer"]},
                  {"shared_codebook", c.ablation.shared_codebook},
                  {"dcl", c.ablation.dcl}};
    case Stage::kAssign: return full["identity"];
    case Stage::kTrain:
      return json{{"seed", c.seed},
                  {"tokenize", full["tokenize"]},
                  {"model", full["model"]},
                  {"train", full["train"]},
                  {"unified", c.ablation.unified_recommender},
                  {"decode", full["decode"]},
                  {"validation_users", c.eval.validation_users}};
    case Stage::kFinetune:
      return json{{"seed", c.seed}, {"lora", full["lora"]}, {"finetune", full["finetune"]}, {"mode", full["ablation"]["finetune"]}};
    case Stage::kDecode: return full["decode"];
    case Stage::kEvaluate: return json{{"cutoffs", c.eval.cutoffs}};
    case Stage::kAnalyze:
      return json{{"overlap_k", c.eval.overlap_k}, {"distance", distance_name(c.eval.distance)}, {"top_codes", c.eval.top_codes},
                  {"embed", full["embed"]}};
  }
  return json{};
}

std::uint64_t stage_seed(const RunConfig& c, const std::string& label, std::uint64_t component) {
  return derive_seed(c.seed, label + "/" + std::to_string(component));
}

// ---- loaded artifacts ----

struct Data {
  corpus::Corpus corpus;
  corpus::SplitDataset split;
};

Data load_data(const fs::path& dir, const RunConfig& c) {
  Data d{corpus::load_corpus(dir / "corpus"), {}};
  d.split = corpus::leave_one_out_split(d.corpus.sequences, c.data.expansion);
  return d;
}

std::vector<std::string> item_texts(const corpus::Catalog& catalog, const RunConfig& c) {
  std::vector<std::string> texts;
  for (const auto& item : catalog.items()) texts.push_back(corpus::item_text(item, corpus::TextTemplate{c.data.text_separator}));
  return texts;
}

void write_codes(const fs::path& path, const std::vector<std::vector<int>>& codes, int codebook_size) {
  std::ostringstream os;
  os << "# gmc-codes v1 codebook_size=" << codebook_size << "\n";
  for (const auto& row : codes) {
    for (std::size_t l = 0; l < row.size(); ++l) os << (l ? "\t" : "") << row[l];
    os << "\n";
  }
  write_file_atomic(path, os.str());
}

std::pair<std::vector<std::vector<int>>, int> read_codes(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  std::getline(in, line);
  int n = 0;
  if (std::sscanf(line.c_str(), "# gmc-codes v1 codebook_size=%d", &n) != 1) throw ProtocolError("bad codes file header");
  std::vector<std::vector<int>> codes;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<int> row;
    for (const auto& f : split(line, '\t')) row.push_back(std::stoi(f));
    codes.push_back(std::move(row));
  }
  return {codes, n};
}

struct Identity {
  identity::Assignment assignment;
  identity::TokenVocabulary vocab;
};

Identity load_identity(const fs::path& dir, const corpus::Catalog& catalog, int cap) {
  Identity id;
  id.assignment = identity::read_identifiers(dir / "identifiers.tsv", catalog);
  id.vocab = identity::TokenVocabulary::for_assignment(id.assignment, cap);
  return id;
}

std::vector<std::vector<genrec::Example>> examples_by_domain(const std::vector<corpus::Pair>& pairs, const Identity& id,
                                                             const RunConfig& c, int domains) {
  auto all = genrec::make_examples(pairs, id.assignment, id.vocab, c.model.max_input_tokens, c.tokenize);
  std::vector<std::vector<genrec::Example>> out(static_cast<std::size_t>(domains));
  for (auto& ex : all) out[static_cast<std::size_t>(ex.domain)].push_back(std::move(ex));
  return out;
}

template <typename Fn>
void parallel_for(std::size_t n, int workers, Fn&& fn) {
  if (workers <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(workers), n);
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(w);
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += w) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : threads) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Item rankings for a set of examples under one model.
std::vector<std::vector<decode::Recommendation>> decode_examples(const genrec::InferenceSession& session,
                                                                 const identity::PrefixTree& tree,
                                                                 const std::vector<genrec::Example>& examples,
                                                                 const decode::DecodeOptions& options, int workers) {
  std::vector<std::vector<decode::Recommendation>> out(examples.size());
  parallel_for(examples.size(), workers, [&](std::size_t i) {
    out[i] = decode::constrained_beam_search(session, examples[i].input, tree, options);
  });
  return out;
}

double mean_ndcg(const genrec::InferenceSession& session, const identity::PrefixTree& tree,
                 const std::vector<genrec::Example>& examples, const decode::DecodeOptions& options, int workers,
                 int k) {
  if (examples.empty()) return 0.0;
  auto ranked = decode_examples(session, tree, examples, options, workers);
  double sum = 0.0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    std::vector<int> items;
    for (const auto& r : ranked[i]) items.push_back(r.item);
    sum += eval::ndcg_at_k(items, examples[i].target_item, k);
  }
  return sum;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

constexpr const char* kDoneMarker = "COMPLETE";

}  // namespace

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)) { config_.validate(); }

std::string Pipeline::stage_hash(Stage stage) const {
  json j{{"stage", stage_name(stage)}, {"inputs", stage_inputs(stage, config_)}};
  json up = json::array();
  for (Stage u : upstream_of(stage)) up.push_back(stage_hash(u));
  j["upstream"] = up;
  return sha256_hex(j.dump()).substr(0, 16);
}

fs::path Pipeline::stage_dir(Stage stage) const { return config_.output_dir / stage_name(stage) / stage_hash(stage); }

bool Pipeline::complete(Stage stage) const { return fs::exists(stage_dir(stage) / kDoneMarker); }

void Pipeline::require(Stage upstream) const {
  if (!complete(upstream)) {
    throw DependencyError("stage '" + stage_name(upstream) + "' has not been run for this configuration (expected " +
                          stage_dir(upstream).string() + ")");
  }
}

void Pipeline::write_manifest(const StageRecord& record) const {
  const fs::path path = config_.output_dir / "manifest.json";
  json m = json::object();
  if (fs::exists(path)) {
    try {
      m = json::parse(read_file(path));
    } catch (const json::exception&) {
      m = json::object();
    }
  }
  if (m.value("config_hash", "") != config_.hash()) m = json::object();
  m["config_hash"] = config_.hash();
  m["name"] = config_.name;
  m["stages"][stage_name(record.stage)] = json{{"hash", record.hash},
                                                {"dir", fs::relative(record.dir, config_.output_dir).string()},
                                                {"seconds", record.seconds},
                                                {"skipped", record.skipped}};
  write_file_atomic(path, m.dump(2) + "\n");
}

StageRecord Pipeline::run(Stage stage) {
  StageRecord rec;
  rec.stage = stage;
  rec.hash = stage_hash(stage);
  rec.dir = stage_dir(stage);
  if (complete(stage)) {
    rec.skipped = true;
    write_manifest(rec);
    return rec;
  }
  for (Stage u : upstream_of(stage)) require(u);
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path tmp = rec.dir.parent_path() / (rec.hash + ".partial");
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  json prov = config_;
  prov["config_hash"] = config_.hash();
  prov["stage"] = stage_name(stage);
  prov["stage_hash"] = rec.hash;
  write_file_atomic(tmp / "config.json", prov.dump(2) + "\n");
  switch (stage) {
    case Stage::kCorpus: run_corpus(tmp); break;
    case Stage::kEmbed: run_embed(tmp); break;
    case Stage::kTokenize: run_tokenize(tmp); break;
    case Stage::kAssign: run_assign(tmp); break;
    case Stage::kTrain: run_train(tmp); break;
    case Stage::kFinetune: run_finetune(tmp); break;
    case Stage::kDecode: run_decode(tmp); break;
    case Stage::kEvaluate: run_evaluate(tmp); break;
    case Stage::kAnalyze: run_analyze(tmp); break;
  }
  write_file_atomic(tmp / kDoneMarker, rec.hash + "\n");
  fs::remove_all(rec.dir);
  fs::rename(tmp, rec.dir);
  rec.seconds = seconds_since(t0);
  write_manifest(rec);
  return rec;
}

std::vector<StageRecord> Pipeline::run_through(Stage last) {
  std::vector<StageRecord> out;
  for (Stage s : all_stages()) {
    if (s == Stage::kAnalyze && last != Stage::kAnalyze) continue;
    out.push_back(run(s));
    if (s == last) break;
  }
  return out;
}

// ---- corpus ----

void Pipeline::run_corpus(const fs::path& dir) {
  corpus::Corpus c;
  if (config_.data.source == "synthetic") {
    corpus::SyntheticSpec spec = config_.data.synthetic;
    spec.max_len = config_.data.max_len;
    c = corpus::synthesize_domains(spec, derive_seed(config_.seed, "synthetic")).corpus;
  } else {
    std::vector<std::string> names;
    for (const auto& f : config_.data.files) names.push_back(f.name);
    c.catalog = corpus::Catalog(names);
    std::vector<std::vector<corpus::Item>> metadata;
    std::vector<corpus::Interaction> interactions;
    for (int t = 0; t < static_cast<int>(config_.data.files.size()); ++t) {
      const auto& f = config_.data.files[static_cast<std::size_t>(t)];
      metadata.push_back(corpus::read_metadata(f.metadata, t));
      std::set<std::string> known;
      for (const auto& item : metadata.back()) known.insert(item.item_id);
      for (auto& x : corpus::read_interactions(f.interactions, t)) {
        if (known.count(x.item)) interactions.push_back(std::move(x));
      }
    }
    auto filtered = corpus::k_core_filter(interactions, config_.data.k_core);
    if (filtered.empty) throw DataError("k-core filtering removed every interaction");
    std::set<std::pair<int, std::string>> used;
    for (const auto& x : filtered.interactions) used.insert({x.domain, x.item});
    for (const auto& items : metadata) {
      for (const auto& item : items) {
        if (used.count({item.domain, item.item_id})) c.catalog.add(item);
      }
    }
    c.sequences = corpus::build_sequences(filtered.interactions, c.catalog, config_.data.max_len);
  }
  corpus::save_corpus(c, dir / "corpus");
  auto split = corpus::leave_one_out_split(c.sequences, config_.data.expansion);
  corpus::write_split_manifest(dir / "split.jsonl", c.catalog, split);
  json stats{{"items", c.catalog.size()},
             {"sequences", c.sequences.size()},
             {"train_pairs", split.train.size()},
             {"valid_pairs", split.valid.size()},
             {"test_pairs", split.test.size()}};
  write_file_atomic(dir / "stats.json", stats.dump(2) + "\n");
}

// ---- embed ----

void Pipeline::run_embed(const fs::path& dir) {
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  auto texts = item_texts(data.corpus.catalog, config_);
  ad::Matrix x;
  std::string provider;
  if (config_.embed.provider == "hash") {
    embed::HashEmbedderConfig hc{config_.embed.dim, config_.embed.text_noise};
    x = embed::hash_embed_matrix(texts, hc);
    provider = embed::hash_provider_id(hc);
  } else {
    auto rc = embed::RemoteEndpointConfig::from_env(config_.embed.dim);
    rc.batch_limit = config_.embed.batch_limit;
    rc.max_attempts = config_.embed.max_attempts;
    rc.parallelism = config_.embed.parallelism;
    std::optional<embed::EmbeddingCache> cache;
    if (config_.embed.cache_file.empty()) {
      cache.emplace();
    } else {
      cache.emplace(config_.embed.cache_file);
    }
    embed::RemoteEmbedder client(rc, &*cache);
    auto vecs = client.embed(texts);
    x.resize(static_cast<Eigen::Index>(vecs.size()), config_.embed.dim);
    for (std::size_t i = 0; i < vecs.size(); ++i) {
      for (int k = 0; k < config_.embed.dim; ++k) x(static_cast<Eigen::Index>(i), k) = vecs[i].vector[static_cast<std::size_t>(k)];
    }
    provider = rc.provider_id;
  }
  if (config_.embed.standardize) embed::standardize(x);
  io::write_matrix(dir / "embeddings.bin", x);
  write_file_atomic(dir / "provider.json", json{{"provider_id", provider}, {"dim", config_.embed.dim}}.dump() + "\n");
}

// ---- tokenize ----

void Pipeline::run_tokenize(const fs::path& dir) {
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  const auto& catalog = data.corpus.catalog;
  ad::Matrix x = io::read_matrix(stage_dir(Stage::kEmbed) / "embeddings.bin");
  std::vector<int> domains;
  for (const auto& item : catalog.items()) domains.push_back(item.domain);
  tokenizer::QuantizerConfig qc = config_.quantizer;
  std::vector<std::vector<int>> codes(static_cast<std::size_t>(catalog.size()));
  int codebook_size = qc.codebook_size;
  if (config_.ablation.shared_codebook) {
    qc.dcl_enabled = config_.ablation.dcl;
    qc.seed = stage_seed(config_, "quantizer", config_.quantizer.seed);
    auto trained = tokenizer::train_quantizer(x, domains, qc);
    tokenizer::save_quantizer(dir / "quantizer.bin", trained.state);
    write_file_atomic(dir / "quantizer_log.jsonl", tokenizer::training_log_jsonl(trained.epochs));
    codes = tokenizer::quantize_items(x, trained.state);
  } else {
    // One quantizer per domain; codes live in disjoint per-domain ranges.
    codebook_size = qc.codebook_size * catalog.domain_count();
    qc.dcl_enabled = false;
    for (int t = 0; t < catalog.domain_count(); ++t) {
      auto items = catalog.domain_items(t);
      ad::Matrix xt(static_cast<Eigen::Index>(items.size()), x.cols());
      for (std::size_t i = 0; i < items.size(); ++i) xt.row(static_cast<Eigen::Index>(i)) = x.row(items[i]);
      std::vector<int> dt(items.size(), t);
      qc.seed = stage_seed(config_, "quantizer/domain" + std::to_string(t), config_.quantizer.seed);
      auto trained = tokenizer::train_quantizer(xt, dt, qc);
      tokenizer::save_quantizer(dir / ("quantizer-" + std::to_string(t) + ".bin"), trained.state);
      write_file_atomic(dir / ("quantizer_log-" + std::to_string(t) + ".jsonl"), tokenizer::training_log_jsonl(trained.epochs));
      auto local = tokenizer::quantize_items(xt, trained.state);
      for (std::size_t i = 0; i < items.size(); ++i) {
        for (int& c : local[i]) c += t * qc.codebook_size;
        codes[static_cast<std::size_t>(items[i])] = local[i];
      }
    }
  }
  write_codes(dir / "codes.tsv", codes, codebook_size);
}

// ---- assign ----

void Pipeline::run_assign(const fs::path& dir) {
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  auto [codes, n] = read_codes(stage_dir(Stage::kTokenize) / "codes.tsv");
  auto a = identity::assign_identifiers(data.corpus.catalog, codes, n);
  auto vocab = identity::TokenVocabulary::for_assignment(a, config_.disamb_cap);
  identity::write_identifiers(dir / "identifiers.tsv", data.corpus.catalog, a);
  identity::write_vocabulary(dir / "vocabulary.tsv", vocab);
  json stats{{"collision_rate", a.collision_rate()},
             {"colliding_items", a.colliding_items},
             {"max_group", a.max_group},
             {"vocab_size", vocab.size()}};
  write_file_atomic(dir / "stats.json", stats.dump(2) + "\n");
}

// ---- train ----

namespace {

struct Context {
  Data data;
  Identity id;
  genrec::Seq2SeqConfig model;
  std::vector<std::vector<genrec::Example>> train, valid, test;
  std::vector<identity::PrefixTree> trees;
};

Context load_context(const Pipeline& p) {
  const RunConfig& c = p.config();
  Context ctx{load_data(p.stage_dir(Stage::kCorpus), c), {}, c.model, {}, {}, {}, {}};
  ctx.id = load_identity(p.stage_dir(Stage::kAssign), ctx.data.corpus.catalog, c.disamb_cap);
  ctx.model.vocab_size = ctx.id.vocab.size();
  const int domains = ctx.data.corpus.catalog.domain_count();
  ctx.train = examples_by_domain(ctx.data.split.train, ctx.id, c, domains);
  ctx.valid = examples_by_domain(ctx.data.split.valid, ctx.id, c, domains);
  ctx.test = examples_by_domain(ctx.data.split.test, ctx.id, c, domains);
  if (c.eval.validation_users > 0) {
    for (auto& v : ctx.valid) {
      if (static_cast<int>(v.size()) > c.eval.validation_users) v.resize(static_cast<std::size_t>(c.eval.validation_users));
    }
  }
  for (int t = 0; t < domains; ++t) {
    ctx.trees.push_back(identity::build_prefix_tree(ctx.data.corpus.catalog, ctx.id.assignment, ctx.id.vocab, t));
  }
  return ctx;
}

// Mean validation NDCG@10 over the given domains' users.
genrec::Validator make_validator(const Context& ctx, const RunConfig& c, std::vector<int> domains) {
  return [&ctx, &c, domains](const genrec::Seq2SeqModel& m, const genrec::AdapterSet* a) {
    genrec::InferenceSession session(m, a);
    double sum = 0.0;
    std::size_t n = 0;
    for (int t : domains) {
      const auto& ex = ctx.valid[static_cast<std::size_t>(t)];
      sum += mean_ndcg(session, ctx.trees[static_cast<std::size_t>(t)], ex, decode::DecodeOptions{c.decode.beam_size, c.decode.score_mode},
                       c.workers, 10);
      n += ex.size();
    }
    return n == 0 ? 0.0 : sum / static_cast<double>(n);
  };
}

std::vector<genrec::Example> pooled(const std::vector<std::vector<genrec::Example>>& by_domain) {
  std::vector<genrec::Example> out;
  for (const auto& v : by_domain) out.insert(out.end(), v.begin(), v.end());
  return out;
}

std::string model_file(int domain) { return domain < 0 ? "backbone.bin" : "backbone-" + std::to_string(domain) + ".bin"; }

}  // namespace

void Pipeline::run_train(const fs::path& dir) {
  Context ctx = load_context(*this);
  const int domains = ctx.data.corpus.catalog.domain_count();
  std::vector<int> all(static_cast<std::size_t>(domains));
  for (int t = 0; t < domains; ++t) all[static_cast<std::size_t>(t)] = t;
  json summary = json::object();
  if (config_.ablation.unified_recommender) {
    genrec::Seq2SeqConfig mc = ctx.model;
    mc.seed = stage_seed(config_, "model", config_.model.seed);
    genrec::Seq2SeqModel m = genrec::Seq2SeqModel::create(mc);
    genrec::TrainOptions opts = config_.train;
    opts.seed = stage_seed(config_, "train", config_.train.seed);
    auto examples = pooled(ctx.train);
    auto log = genrec::train_unified(m, examples, opts, make_validator(ctx, config_, all));
    genrec::save_model(dir / model_file(-1), m);
    write_file_atomic(dir / "train_log.jsonl", log.jsonl());
    summary["unified"] = json{{"best_epoch", log.best_epoch}, {"best_valid_ndcg10", log.best_score},
                              {"parameters", m.parameter_count()}, {"train_pairs", examples.size()}};
  } else {
    for (int t = 0; t < domains; ++t) {
      genrec::Seq2SeqConfig mc = ctx.model;
      mc.seed = stage_seed(config_, "model/domain" + std::to_string(t), config_.model.seed);
      genrec::Seq2SeqModel m = genrec::Seq2SeqModel::create(mc);
      genrec::TrainOptions opts = config_.train;
      opts.seed = stage_seed(config_, "train/domain" + std::to_string(t), config_.train.seed);
      auto log = genrec::train_unified(m, ctx.train[static_cast<std::size_t>(t)], opts, make_validator(ctx, config_, {t}));
      genrec::save_model(dir / model_file(t), m);
      write_file_atomic(dir / ("train_log-" + std::to_string(t) + ".jsonl"), log.jsonl());
      summary[ctx.data.corpus.catalog.domain_name(t)] = json{{"best_epoch", log.best_epoch}, {"best_valid_ndcg10", log.best_score}};
    }
  }
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
}

// ---- finetune ----

namespace {

struct DomainModel {
  genrec::Seq2SeqModel model;
  std::optional<genrec::AdapterSet> adapters;
};

genrec::Seq2SeqModel load_backbone(const Pipeline& p, int domain) {
  const fs::path dir = p.stage_dir(Stage::kTrain);
  if (p.config().ablation.unified_recommender) return genrec::load_model(dir / model_file(-1));
  return genrec::load_model(dir / model_file(domain));
}

DomainModel load_final_model(const Pipeline& p, int domain) {
  DomainModel dm{load_backbone(p, domain), std::nullopt};
  const fs::path dir = p.stage_dir(Stage::kFinetune);
  switch (p.config().ablation.finetune) {
    case FinetuneMode::kNone: break;
    case FinetuneMode::kLora: dm.adapters = genrec::load_adapters(dir / ("adapters-" + std::to_string(domain) + ".bin"), dm.model); break;
    case FinetuneMode::kFull: dm.model = genrec::load_model(dir / ("full-" + std::to_string(domain) + ".bin")); break;
  }
  return dm;
}

}  // namespace

void Pipeline::run_finetune(const fs::path& dir) {
  json summary = json::object();
  summary["mode"] = finetune_name(config_.ablation.finetune);
  if (config_.ablation.finetune == FinetuneMode::kNone) {
    write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
    return;
  }
  Context ctx = load_context(*this);
  const int domains = ctx.data.corpus.catalog.domain_count();
  for (int t = 0; t < domains; ++t) {
    const std::string name = ctx.data.corpus.catalog.domain_name(t);
    genrec::Seq2SeqModel backbone = load_backbone(*this, t);
    const std::string before = backbone.checksum();
    genrec::TrainOptions opts = config_.finetune;
    opts.seed = stage_seed(config_, "finetune/domain" + std::to_string(t), config_.finetune.seed);
    auto validator = make_validator(ctx, config_, {t});
    const auto& examples = ctx.train[static_cast<std::size_t>(t)];
    json rec;
    if (config_.ablation.finetune == FinetuneMode::kLora) {
      genrec::LoraConfig lc = config_.lora;
      lc.seed = stage_seed(config_, "lora", config_.lora.seed);
      auto r = genrec::finetune_domain(backbone, t, examples, lc, opts, validator);
      if (backbone.checksum() != before) throw InternalError("backbone changed during adapter training");
      genrec::save_adapters(dir / ("adapters-" + std::to_string(t) + ".bin"), r.adapters);
      write_file_atomic(dir / ("finetune_log-" + std::to_string(t) + ".jsonl"), r.log.jsonl());
      rec = json{{"initial_valid_ndcg10", r.log.initial_score},
                 {"best_valid_ndcg10", r.log.best_score},
                 {"best_epoch", r.log.best_epoch},
                 {"adapter_parameters", r.adapters.parameter_count()},
                 {"backbone_parameters", backbone.parameter_count()},
                 {"adapter_ratio", static_cast<double>(r.adapters.parameter_count()) / static_cast<double>(backbone.parameter_count())},
                 {"backbone_checksum", before}};
    } else {
      auto r = genrec::full_finetune_domain(backbone, examples, opts, validator);
      genrec::save_model(dir / ("full-" + std::to_string(t) + ".bin"), r.model);
      write_file_atomic(dir / ("finetune_log-" + std::to_string(t) + ".jsonl"), r.log.jsonl());
      rec = json{{"initial_valid_ndcg10", r.log.initial_score},
                 {"best_valid_ndcg10", r.log.best_score},
                 {"best_epoch", r.log.best_epoch},
                 {"parameters", r.model.parameter_count()}};
    }
    summary["domains"][name] = rec;
  }
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
}

// ---- decode ----

void Pipeline::run_decode(const fs::path& dir) {
  Context ctx = load_context(*this);
  const auto& catalog = ctx.data.corpus.catalog;
  decode::DecodeOptions opts{config_.decode.beam_size, config_.decode.score_mode};
  for (int t = 0; t < catalog.domain_count(); ++t) {
    DomainModel dm = load_final_model(*this, t);
    genrec::InferenceSession session(dm.model, dm.adapters ? &*dm.adapters : nullptr);
    const auto& tests = ctx.test[static_cast<std::size_t>(t)];
    auto ranked = decode_examples(session, ctx.trees[static_cast<std::size_t>(t)], tests, opts, config_.workers);
    std::string out;
    for (std::size_t i = 0; i < tests.size(); ++i) {
      json items = json::array();
      for (const auto& r : ranked[i]) {
        if (catalog[r.item].domain != t) throw InternalError("decoded an item outside the target domain");
        items.push_back(json::array({catalog[r.item].item_id, r.score}));
      }
      out += json{{"domain", catalog.domain_name(t)}, {"target", catalog[tests[i].target_item].item_id}, {"ranked", items}}.dump();
      out.push_back('\n');
    }
    write_file_atomic(dir / ("rankings-" + std::to_string(t) + ".jsonl"), out);
  }
}

// ---- evaluate ----

void Pipeline::run_evaluate(const fs::path& dir) {
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  const auto& catalog = data.corpus.catalog;
  std::vector<eval::DomainMetrics> per_domain;
  for (int t = 0; t < catalog.domain_count(); ++t) {
    std::istringstream in(read_file(stage_dir(Stage::kDecode) / ("rankings-" + std::to_string(t) + ".jsonl")));
    std::string line;
    std::vector<std::vector<int>> rankings;
    std::vector<int> targets;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      json j = json::parse(line);
      auto target = catalog.find(t, j.at("target").get<std::string>());
      if (!target) throw DataError("unknown target item in rankings");
      targets.push_back(*target);
      std::vector<int> items;
      for (const auto& e : j.at("ranked")) {
        auto idx = catalog.find(t, e.at(0).get<std::string>());
        if (!idx) throw DataError("unknown ranked item in rankings");
        items.push_back(*idx);
      }
      rankings.push_back(std::move(items));
    }
    per_domain.push_back(eval::evaluate_domain(catalog.domain_name(t), rankings, targets, config_.eval.cutoffs));
  }
  auto report = eval::make_report(config_.hash(), config_.name, config_.eval.cutoffs, per_domain);
  write_file_atomic(dir / "metrics.jsonl", report.jsonl());
  write_file_atomic(dir / "metrics.txt", report.table());
}

eval::MetricReport Pipeline::metrics() const {
  require(Stage::kEvaluate);
  std::istringstream in(read_file(stage_dir(Stage::kEvaluate) / "metrics.jsonl"));
  std::string line;
  std::vector<eval::DomainMetrics> domains;
  std::string hash;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    eval::DomainMetrics d;
    d.domain = j.at("domain").get<std::string>();
    d.users = j.at("users").get<long>();
    hash = j.at("config_hash").get<std::string>();
    for (auto it = j.begin(); it != j.end(); ++it) {
      if (it.key().find('@') != std::string::npos) d.values[it.key()] = it.value().get<double>();
    }
    if (d.domain != "aggregate") domains.push_back(std::move(d));
  }
  return eval::make_report(hash, config_.name, config_.eval.cutoffs, domains);
}

// ---- analyze ----

void Pipeline::run_analyze(const fs::path& dir) {
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  const auto& catalog = data.corpus.catalog;
  Identity id = load_identity(stage_dir(Stage::kAssign), catalog, config_.disamb_cap);
  ad::Matrix x = io::read_matrix(stage_dir(Stage::kEmbed) / "embeddings.bin");
  json purity = json::array();
  for (int l = 0; l < id.assignment.levels; ++l) {
    auto dist = eval::code_domain_distribution(catalog, id.assignment, l);
    purity.push_back(dist.purity);
    write_file_atomic(dir / ("code_distribution-l" + std::to_string(l + 1) + ".csv"), dist.csv(catalog, config_.eval.top_codes));
  }
  std::string strategy = config_.ablation.shared_codebook ? (config_.ablation.dcl ? "shared+dcl" : "shared") : "per-domain";
  auto overlap = eval::neighbor_code_overlap(catalog, x, id.assignment, config_.eval.overlap_k, strategy, config_.eval.distance);
  write_file_atomic(dir / "purity.json", json{{"config_hash", config_.hash()}, {"purity", purity}}.dump() + "\n");
  write_file_atomic(dir / "overlap.jsonl", overlap.jsonl());
  write_file_atomic(dir / "overlap.csv", overlap.csv());
}

AnalysisResult Pipeline::analysis() const {
  require(Stage::kAnalyze);
  AnalysisResult r;
  json p = json::parse(read_file(stage_dir(Stage::kAnalyze) / "purity.json"));
  r.purity = p.at("purity").get<std::vector<double>>();
  std::istringstream in(read_file(stage_dir(Stage::kAnalyze) / "overlap.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    r.overlap.strategy = j.at("strategy").get<std::string>();
    r.overlap.neighbor_counts.push_back(j.at("k").get<int>());
    r.overlap.mean.push_back(j.at("mean").get<double>());
    std::vector<double> row;
    r.overlap.domains.clear();
    for (auto it = j.at("domains").begin(); it != j.at("domains").end(); ++it) {
      r.overlap.domains.push_back(it.key());
      row.push_back(it.value().get<double>());
    }
    r.overlap.overlap.push_back(row);
  }
  return r;
}

// ---- batch file decoding ----

void Pipeline::decode_file(const fs::path& input, const fs::path& output) const {
  require(Stage::kFinetune);
  Data data = load_data(stage_dir(Stage::kCorpus), config_);
  const auto& catalog = data.corpus.catalog;
  Identity id = load_identity(stage_dir(Stage::kAssign), catalog, config_.disamb_cap);
  std::map<std::string, int> domain_index;
  for (int t = 0; t < catalog.domain_count(); ++t) domain_index[catalog.domain_name(t)] = t;
  std::map<int, std::pair<DomainModel, identity::PrefixTree>> cache;
  decode::DecodeOptions opts{config_.decode.beam_size, config_.decode.score_mode};
  std::istringstream in(read_file(input));
  std::string line, out;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty() || line[0] == '#') continue;
    auto fields = split(line, '\t');
    if (fields.size() != 2) throw DataError("line " + std::to_string(line_no) + ": expected domain<TAB>history");
    auto dom = domain_index.find(trim(fields[0]));
    if (dom == domain_index.end()) throw DataError("line " + std::to_string(line_no) + ": unknown domain " + fields[0]);
    const int t = dom->second;
    std::vector<int> history;
    for (const auto& tok : split(trim(fields[1]), ' ')) {
      if (tok.empty()) continue;
      auto idx = catalog.find(t, tok);
      if (!idx) throw DataError("line " + std::to_string(line_no) + ": unknown item " + tok);
      history.push_back(*idx);
    }
    if (history.empty()) throw DataError("line " + std::to_string(line_no) + ": empty history");
    auto it = cache.find(t);
    if (it == cache.end()) {
      it = cache.emplace(t, std::make_pair(load_final_model(*this, t),
                                           identity::build_prefix_tree(catalog, id.assignment, id.vocab, t))).first;
    }
    const DomainModel& dm = it->second.first;
    genrec::InferenceSession session(dm.model, dm.adapters ? &*dm.adapters : nullptr);
    auto tokens = genrec::history_tokens(history, id.assignment, id.vocab, config_.model.max_input_tokens, config_.tokenize);
    auto ranked = decode::constrained_beam_search(session, tokens, it->second.second, opts);
    json items = json::array();
    for (const auto& r : ranked) items.push_back(json{{"item_id", catalog[r.item].item_id}, {"score", r.score}});
    out += json{{"domain", catalog.domain_name(t)}, {"ranked", items}}.dump();
    out.push_back('\n');
  }
  write_file_atomic(output, out);
}

// ---- ablations ----

std::vector<std::string> ablation_presets() {
  return {"default", "wo-shared-codebook", "wo-unified", "wo-dcl", "wo-finetune", "full-finetune"};
}

std::string canonical_preset(const std::string& name) {
  std::string s;
  for (char ch : name) s.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
  for (std::size_t pos; (pos = s.find("w/o")) != std::string::npos;) s.replace(pos, 3, "wo");
  for (char& ch : s) {
    if (ch == ' ' || ch == '_') ch = '-';
  }
  static const std::map<std::string, std::string> aliases{
      {"wo-sharable-codebook", "wo-shared-codebook"}, {"wo-shared-codebooks", "wo-shared-codebook"},
      {"wo-unified-recommender", "wo-unified"},      {"wo-l-dcl", "wo-dcl"},
      {"wo-fine-tune", "wo-finetune"},               {"finetune-all-parameters", "full-finetune"},
      {"full", "full-finetune"}};
  if (auto it = aliases.find(s); it != aliases.end()) s = it->second;
  for (const auto& p : ablation_presets()) {
    if (p == s) return s;
  }
  throw ConfigError("unknown ablation preset '" + name + "'");
}

RunConfig apply_preset(const RunConfig& base, const std::string& preset) {
  const std::string p = canonical_preset(preset);
  RunConfig c = base;
  c.name = p;
  if (p == "wo-shared-codebook") {
    c.ablation.shared_codebook = false;
  } else if (p == "wo-unified") {
    c.ablation.unified_recommender = false;
    c.ablation.finetune = FinetuneMode::kNone;
  } else if (p == "wo-dcl") {
    c.ablation.dcl = false;
  } else if (p == "wo-finetune") {
    c.ablation.finetune = FinetuneMode::kNone;
  } else if (p == "full-finetune") {
    c.ablation.finetune = FinetuneMode::kFull;
  }
  return c;
}

AblationReport run_ablation(const RunConfig& base, const std::string& preset) {
  RunConfig b = base;
  b.name = "default";
  Pipeline pb(b);
  pb.run_through(Stage::kEvaluate);
  Pipeline pv(apply_preset(base, preset));
  pv.run_through(Stage::kEvaluate);
  return AblationReport{pb.metrics(), pv.metrics()};
}

std::string AblationReport::table() const {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-12s %14s %20s %10s\n", "metric", base.variant.c_str(), variant.variant.c_str(),
                "gain");
  os << buf;
  for (const auto& [name, v] : base.aggregate.values) {
    const double w = variant.aggregate.values.at(name);
    if (w != 0.0) {
      std::snprintf(buf, sizeof(buf), "%-12s %14.4f %20.4f %+9.1f%%\n", name.c_str(), v, w, 100.0 * (v - w) / w);
    } else {
      std::snprintf(buf, sizeof(buf), "%-12s %14.4f %20.4f %10s\n", name.c_str(), v, w, "n/a");
    }
    os << buf;
  }
  return os.str();
}

std::string AblationReport::jsonl() const {
  std::string out = base.jsonl() + variant.jsonl();
  json rel = json::object();
  for (const auto& [name, v] : base.aggregate.values) {
    const double w = variant.aggregate.values.at(name);
    rel[name] = w != 0.0 ? (v - w) / w : 0.0;
  }
  out += json{{"comparison", base.variant + " vs " + variant.variant}, {"relative_improvement_of_default", rel}}.dump() + "\n";
  return out;
}

}  // namespace gmc::pipeline
