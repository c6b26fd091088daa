// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <filesystem>

#include <json.hpp>

#include "gmc/pipeline.hpp"

namespace gmc::pipeline {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

RunConfig tiny(const fs::path& out) {
  RunConfig c;
  c.output_dir = out;
  c.data.synthetic.domains.clear();
  for (const char* n : {"alpha", "beta"}) c.data.synthetic.domains.push_back(corpus::SyntheticDomainSpec{n, 30, 40, 3, 0.8, 3, 6});
  c.data.max_len = 8;
  c.embed.dim = 16;
  c.quantizer.input_dim = 16;
  c.quantizer.latent_dim = 8;
  c.quantizer.hidden = {32};
  c.quantizer.levels = 2;
  c.quantizer.codebook_size = 8;
  c.quantizer.epochs = 20;
  c.quantizer.batch_size = 64;
  c.quantizer.kmeans_iterations = 5;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.d_ff = 32;
  c.model.encoder_layers = 1;
  c.model.decoder_layers = 1;
  c.model.max_input_tokens = 24;
  c.model.max_target_tokens = 4;
  c.train.epochs = 2;
  c.train.batch_size = 64;
  c.finetune.epochs = 1;
  c.finetune.batch_size = 64;
  c.lora.rank = 2;
  c.lora.alpha = 4.0;
  c.decode.beam_size = 10;
  c.eval.overlap_k = {5};
  c.eval.validation_users = 10;
  return c;
}

class PipelineTest : public ::testing::Test {
 protected:
  void SetUp() override {
    root_ = fs::temp_directory_path() / ("gmc_pipeline_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(root_);
  }
  void TearDown() override { fs::remove_all(root_); }
  fs::path root_;
};

TEST(Config, JsonRoundTripAndPartialFiles) {
  RunConfig c = tiny("x");
  c.ablation.finetune = FinetuneMode::kFull;
  c.eval.distance = eval::Distance::kCosine;
  json j = c;
  RunConfig back = j.get<RunConfig>();
  EXPECT_EQ(json(back), j);
  EXPECT_EQ(back.hash(), c.hash());
  // A partial document keeps every other default.
  RunConfig partial = json{{"train", {{"epochs", 3}}}}.get<RunConfig>();
  RunConfig defaults;
  EXPECT_EQ(partial.train.epochs, 3);
  EXPECT_EQ(partial.train.batch_size, defaults.train.batch_size);
  EXPECT_EQ(partial.quantizer.levels, defaults.quantizer.levels);
  EXPECT_EQ(partial.data.synthetic.domains.size(), 3u);
}

TEST(Config, HashIgnoresPresentationFields) {
  RunConfig a = tiny("one");
  RunConfig b = tiny("two");
  b.name = "renamed";
  b.workers = 4;
  EXPECT_EQ(a.hash(), b.hash());
  b.seed = 2;
  EXPECT_NE(a.hash(), b.hash());
}

TEST(Config, Overrides) {
  RunConfig c;
  apply_override(c, "train.epochs=7");
  apply_override(c, "decode.score_mode=masked_renormalized");
  apply_override(c, "eval.cutoffs=[1,3]");
  apply_override(c, "name=exp");
  EXPECT_EQ(c.train.epochs, 7);
  EXPECT_EQ(c.decode.score_mode, decode::ScoreMode::kMaskedRenormalized);
  EXPECT_EQ(c.eval.cutoffs, (std::vector<int>{1, 3}));
  EXPECT_EQ(c.name, "exp");
  EXPECT_THROW(apply_override(c, "train.nope=1"), ConfigError);
  EXPECT_THROW(apply_override(c, "train.epochs=abc"), ConfigError);
  EXPECT_THROW(apply_override(c, "noequals"), ConfigError);
  EXPECT_THROW(apply_override(c, "ablation.finetune=sometimes"), ConfigError);
}

TEST(Config, Validation) {
  RunConfig c;
  EXPECT_NO_THROW(c.validate());
  RunConfig bad = c;
  bad.quantizer.input_dim = 32;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.model.max_input_tokens = 10;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.data.source = "web";
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = c;
  bad.decode.beam_size = 0;
  EXPECT_THROW(Pipeline{bad}, ConfigError);
}

TEST(Stages, HashesFollowDependencies) {
  Pipeline a(tiny("o"));
  RunConfig c = tiny("o");
  c.decode.beam_size = 5;
  Pipeline b(c);
  for (Stage s : {Stage::kCorpus, Stage::kEmbed, Stage::kTokenize, Stage::kAssign, Stage::kAnalyze}) {
    EXPECT_EQ(a.stage_hash(s), b.stage_hash(s)) << stage_name(s);
  }
  // Validation uses beam search, so training depends on the beam too.
  for (Stage s : {Stage::kTrain, Stage::kFinetune, Stage::kDecode, Stage::kEvaluate}) {
    EXPECT_NE(a.stage_hash(s), b.stage_hash(s)) << stage_name(s);
  }
  RunConfig d = tiny("o");
  d.seed = 99;
  Pipeline e(d);
  for (Stage s : all_stages()) {
    EXPECT_NE(a.stage_hash(s), e.stage_hash(s)) << stage_name(s);
  }
  RunConfig f = tiny("o");
  f.eval.overlap_k = {3};
  Pipeline g(f);
  EXPECT_EQ(a.stage_hash(Stage::kEvaluate), g.stage_hash(Stage::kEvaluate));
  EXPECT_NE(a.stage_hash(Stage::kAnalyze), g.stage_hash(Stage::kAnalyze));
  EXPECT_EQ(parse_stage("ingest"), Stage::kCorpus);
  EXPECT_EQ(parse_stage("finetune"), Stage::kFinetune);
  EXPECT_THROW(parse_stage("bake"), ConfigError);
}

TEST_F(PipelineTest, MissingUpstreamIsDependencyError) {
  Pipeline p(tiny(root_));
  EXPECT_THROW(p.run(Stage::kTrain), DependencyError);
  EXPECT_THROW(p.run(Stage::kEmbed), DependencyError);
  EXPECT_THROW(p.metrics(), DependencyError);
  try {
    p.run(Stage::kTokenize);
  } catch (const Error& e) {
    EXPECT_EQ(exit_code_for(e.kind()), kExitDependency);
  }
}

TEST_F(PipelineTest, EndToEndIdempotentAndReproducible) {
  Pipeline p(tiny(root_ / "a"));
  auto first = p.run_through(Stage::kEvaluate);
  ASSERT_EQ(first.size(), 8u);
  for (const auto& r : first) {
    EXPECT_FALSE(r.skipped);
    EXPECT_TRUE(fs::exists(r.dir / "config.json"));
  }
  const std::string metrics = read_file(p.stage_dir(Stage::kEvaluate) / "metrics.jsonl");
  auto second = p.run_through(Stage::kEvaluate);
  for (const auto& r : second) EXPECT_TRUE(r.skipped) << stage_name(r.stage);
  EXPECT_EQ(read_file(p.stage_dir(Stage::kEvaluate) / "metrics.jsonl"), metrics);

  // Provenance: every report line carries the config hash.
  std::istringstream in(metrics);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(json::parse(line).at("config_hash"), p.config().hash());
    ++lines;
  }
  EXPECT_EQ(lines, 3);
  auto m = p.metrics();
  EXPECT_EQ(m.domains.size(), 2u);
  EXPECT_EQ(m.domains[0].users, 40);

  // A second output directory reproduces the report byte for byte.
  Pipeline q(tiny(root_ / "b"));
  q.run_through(Stage::kEvaluate);
  EXPECT_EQ(read_file(q.stage_dir(Stage::kEvaluate) / "metrics.jsonl"), metrics);

  // Ranked lists hold only in-domain items, best first.
  std::istringstream rk(read_file(p.stage_dir(Stage::kDecode) / "rankings-1.jsonl"));
  while (std::getline(rk, line)) {
    auto j = json::parse(line);
    EXPECT_EQ(j.at("domain"), "beta");
    const auto& ranked = j.at("ranked");
    EXPECT_EQ(ranked.size(), 10u);
    for (std::size_t i = 1; i < ranked.size(); ++i) EXPECT_GE(ranked[i - 1][1].get<double>(), ranked[i][1].get<double>());
    for (const auto& e : ranked) EXPECT_EQ(e[0].get<std::string>().substr(0, 3), "bet");
  }

  // Finetune summary: frozen backbone and reported adapter ratio.
  auto fsum = json::parse(read_file(p.stage_dir(Stage::kFinetune) / "summary.json"));
  EXPECT_EQ(fsum.at("mode"), "lora");
  for (const auto& [name, d] : fsum.at("domains").items()) {
    EXPECT_GT(d.at("adapter_ratio").get<double>(), 0.0);
    EXPECT_GE(d.at("best_valid_ndcg10").get<double>(), d.at("initial_valid_ndcg10").get<double>());
  }
  auto manifest = json::parse(read_file(root_ / "a" / "manifest.json"));
  EXPECT_EQ(manifest.at("config_hash"), p.config().hash());
  EXPECT_TRUE(manifest.at("stages").contains("evaluate"));
}

TEST_F(PipelineTest, SeedChangeInvalidatesEverything) {
  RunConfig c = tiny(root_);
  c.train.epochs = 1;
  Pipeline p(c);
  p.run_through(Stage::kAssign);
  c.seed = 5;
  Pipeline q(c);
  EXPECT_FALSE(q.complete(Stage::kCorpus));
  EXPECT_THROW(q.run(Stage::kAssign), DependencyError);
  auto recs = q.run_through(Stage::kAssign);
  for (const auto& r : recs) EXPECT_FALSE(r.skipped) << stage_name(r.stage);
}

TEST_F(PipelineTest, AnalysisAndPerDomainCodebooks) {
  RunConfig c = tiny(root_);
  Pipeline p(c);
  p.run_through(Stage::kAssign);
  p.run(Stage::kAnalyze);
  auto a = p.analysis();
  ASSERT_EQ(a.purity.size(), 2u);
  EXPECT_EQ(a.overlap.strategy, "shared+dcl");
  EXPECT_EQ(a.overlap.neighbor_counts, (std::vector<int>{5}));
  EXPECT_TRUE(fs::exists(p.stage_dir(Stage::kAnalyze) / "code_distribution-l1.csv"));

  RunConfig d = apply_preset(c, "w/o sharable codebook");
  Pipeline q(d);
  q.run_through(Stage::kAssign);
  q.run(Stage::kAnalyze);
  auto b = q.analysis();
  EXPECT_EQ(b.overlap.strategy, "per-domain");
  // Disjoint per-domain code ranges make every level domain-pure.
  for (double v : b.purity) EXPECT_EQ(v, 1.0);
  EXPECT_EQ(p.stage_dir(Stage::kEmbed), q.stage_dir(Stage::kEmbed));
}

TEST_F(PipelineTest, DecodeFile) {
  RunConfig c = tiny(root_);
  c.ablation.finetune = FinetuneMode::kNone;
  Pipeline p(c);
  p.run_through(Stage::kFinetune);
  write_file_atomic(root_ / "in.tsv", "# comment\nalpha\talp-0 alp-4\nbeta\tbet-3\n");
  p.decode_file(root_ / "in.tsv", root_ / "out.jsonl");
  std::istringstream in(read_file(root_ / "out.jsonl"));
  std::string line;
  std::vector<json> rows;
  while (std::getline(in, line)) rows.push_back(json::parse(line));
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].at("domain"), "alpha");
  EXPECT_EQ(rows[0].at("ranked").size(), 10u);
  write_file_atomic(root_ / "bad.tsv", "alpha\tbet-3\n");
  EXPECT_THROW(p.decode_file(root_ / "bad.tsv", root_ / "o.jsonl"), DataError);
  write_file_atomic(root_ / "bad2.tsv", "gamma\talp-1\n");
  EXPECT_THROW(p.decode_file(root_ / "bad2.tsv", root_ / "o.jsonl"), DataError);
}

TEST_F(PipelineTest, FileSourceIngest) {
  fs::create_directories(root_ / "data");
  std::string meta_a, meta_b, xa, xb;
  for (int i = 0; i < 6; ++i) {
    meta_a += json{{"item_id", "a" + std::to_string(i)}, {"title", "pen " + std::to_string(i)}, {"brand", "acme"}, {"categories", {"office"}}}.dump() + "\n";
    meta_b += json{{"item_id", "b" + std::to_string(i)}, {"title", "guitar " + std::to_string(i)}}.dump() + "\n";
  }
  for (int u = 0; u < 8; ++u) {
    for (int i = 0; i < 6; ++i) {
      xa += "u" + std::to_string(u) + ",a" + std::to_string((u + i) % 6) + "," + std::to_string(i) + "\n";
      xb += "u" + std::to_string(u) + ",b" + std::to_string((u + 2 * i) % 6) + "," + std::to_string(i) + "\n";
    }
  }
  xa += "u0,ghost,99\n";  // no metadata: dropped
  write_file_atomic(root_ / "data/a.jsonl", meta_a);
  write_file_atomic(root_ / "data/b.jsonl", meta_b);
  write_file_atomic(root_ / "data/a.csv", "user_id,item_id,timestamp\n" + xa);
  write_file_atomic(root_ / "data/b.csv", xb);
  RunConfig c = tiny(root_ / "out");
  c.data.source = "files";
  c.data.files = {FileDomain{"office", root_ / "data/a.jsonl", root_ / "data/a.csv"},
                  FileDomain{"music", root_ / "data/b.jsonl", root_ / "data/b.csv"}};
  Pipeline p(c);
  p.run(Stage::kCorpus);
  auto stats = json::parse(read_file(p.stage_dir(Stage::kCorpus) / "stats.json"));
  EXPECT_EQ(stats.at("items"), 12);
  EXPECT_EQ(stats.at("sequences"), 16);
  EXPECT_EQ(stats.at("test_pairs"), 16);
  c.data.k_core = 50;
  Pipeline q(c);
  EXPECT_THROW(q.run(Stage::kCorpus), DataError);
}

TEST(Presets, NamesAndEffects) {
  EXPECT_EQ(canonical_preset("w/o DCL"), "wo-dcl");
  EXPECT_EQ(canonical_preset("W/O unified recommender"), "wo-unified");
  EXPECT_EQ(canonical_preset("wo_shared_codebook"), "wo-shared-codebook");
  EXPECT_THROW(canonical_preset("w/o everything"), ConfigError);
  RunConfig base;
  EXPECT_FALSE(apply_preset(base, "wo-shared-codebook").ablation.shared_codebook);
  EXPECT_FALSE(apply_preset(base, "wo-dcl").ablation.dcl);
  EXPECT_EQ(apply_preset(base, "wo-finetune").ablation.finetune, FinetuneMode::kNone);
  EXPECT_EQ(apply_preset(base, "full-finetune").ablation.finetune, FinetuneMode::kFull);
  RunConfig u = apply_preset(base, "wo-unified");
  EXPECT_FALSE(u.ablation.unified_recommender);
  EXPECT_EQ(apply_preset(base, "default").hash(), base.hash());
  // A variant differs from the default only in its ablation switches.
  json a = base, b = apply_preset(base, "wo-dcl");
  a.erase("ablation");
  b.erase("ablation");
  a.erase("name");
  b.erase("name");
  EXPECT_EQ(a, b);
}

TEST_F(PipelineTest, DefaultVersusDefaultHasZeroDifference) {
  RunConfig c = tiny(root_);
  c.ablation.finetune = FinetuneMode::kNone;
  auto r = run_ablation(c, "default");
  EXPECT_EQ(r.base.aggregate.values, r.variant.aggregate.values);
  std::istringstream in(r.jsonl());
  std::string line, last;
  while (std::getline(in, line)) last = line;
  for (const auto& [k, v] : json::parse(last).at("relative_improvement_of_default").items()) EXPECT_EQ(v.get<double>(), 0.0);
  EXPECT_NE(r.table().find("+0.0%"), std::string::npos);
}

TEST_F(PipelineTest, UnifiedAblationTrainsOneBackbonePerDomain) {
  RunConfig c = apply_preset(tiny(root_), "wo-unified");
  c.train.epochs = 1;
  Pipeline p(c);
  p.run_through(Stage::kEvaluate);
  EXPECT_TRUE(fs::exists(p.stage_dir(Stage::kTrain) / "backbone-0.bin"));
  EXPECT_TRUE(fs::exists(p.stage_dir(Stage::kTrain) / "backbone-1.bin"));
  EXPECT_FALSE(fs::exists(p.stage_dir(Stage::kTrain) / "backbone.bin"));
  EXPECT_EQ(p.metrics().variant, "wo-unified");
}

TEST_F(PipelineTest, FullFinetuneWritesPerDomainModels) {
  RunConfig c = apply_preset(tiny(root_), "full-finetune");
  Pipeline p(c);
  p.run_through(Stage::kFinetune);
  EXPECT_TRUE(fs::exists(p.stage_dir(Stage::kFinetune) / "full-0.bin"));
  EXPECT_TRUE(fs::exists(p.stage_dir(Stage::kFinetune) / "full-1.bin"));
}

}  // namespace
}  // namespace gmc::pipeline
