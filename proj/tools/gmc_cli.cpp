// Copyright 2026 The GMC Authors
// SPDX-License-Identifier: Apache-2.0

// gmc: command line driver for the recommendation pipeline.

#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gmc/pipeline.hpp"

namespace {

using gmc::pipeline::Pipeline;
using gmc::pipeline::RunConfig;
using gmc::pipeline::Stage;

struct Common {
  std::string config;
  std::string out;
  std::string seed;
  int workers = 0;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON run configuration (missing keys take defaults)");
  app->add_option("--seed", c.seed, "Run seed");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--workers", c.workers, "Parallel workers for decoding");
  app->add_option("--set", c.overrides, "Override one key, e.g. --set train.epochs=20")->take_all();
}

RunConfig resolve(const Common& c) {
  RunConfig config = c.config.empty() ? RunConfig() : gmc::pipeline::load_config(c.config);
  for (const auto& o : c.overrides) gmc::pipeline::apply_override(config, o);
  if (!c.seed.empty()) gmc::pipeline::apply_override(config, "seed=" + c.seed);
  if (!c.out.empty()) config.output_dir = c.out;
  if (c.workers > 0) config.workers = c.workers;
  config.validate();
  return config;
}

void print_record(const gmc::pipeline::StageRecord& r) {
  std::printf("%-9s %s  %s  %.1fs\n", gmc::pipeline::stage_name(r.stage).c_str(), r.skipped ? "cached" : "done  ",
              r.dir.string().c_str(), r.seconds);
}

void print_analysis(const Pipeline& p) {
  auto a = p.analysis();
  for (std::size_t l = 0; l < a.purity.size(); ++l) std::printf("purity level %zu: %.4f\n", l + 1, a.purity[l]);
  std::cout << a.overlap.csv();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gmc: generative multi-domain recommendation with semantic item identifiers"};
  app.require_subcommand(1);
  Common common;

  struct StageCommand {
    const char* name;
    const char* help;
    Stage stage;
  };
  const std::vector<StageCommand> stage_commands{
      {"ingest", "Load per-domain metadata and interaction files into a corpus", Stage::kCorpus},
      {"synth", "Generate the synthetic planted-pattern corpus", Stage::kCorpus},
      {"embed", "Embed item texts", Stage::kEmbed},
      {"tokenize", "Train the residual quantizer and encode items", Stage::kTokenize},
      {"assign", "Assign unique identifiers and build the vocabulary", Stage::kAssign},
      {"train", "Train the unified sequence-to-sequence recommender", Stage::kTrain},
      {"finetune", "Fine-tune per-domain adapters", Stage::kFinetune},
      {"evaluate", "Compute ranking metrics on the test split", Stage::kEvaluate},
      {"analyze", "Code purity and neighbor code overlap", Stage::kAnalyze},
  };
  std::vector<std::pair<CLI::App*, StageCommand>> stage_apps;
  for (const auto& sc : stage_commands) {
    CLI::App* sub = app.add_subcommand(sc.name, sc.help);
    add_common(sub, common);
    stage_apps.emplace_back(sub, sc);
  }

  CLI::App* decode = app.add_subcommand("decode", "Rank test users, or histories from --input");
  add_common(decode, common);
  std::string input, output;
  decode->add_option("--input", input, "Lines of 'domain<TAB>item_id item_id ...'");
  decode->add_option("--output", output, "JSON lines output for --input");

  CLI::App* run = app.add_subcommand("run", "Run every stage through evaluation and analysis");
  add_common(run, common);

  CLI::App* ablate = app.add_subcommand("ablate", "Run the default and one ablation variant side by side");
  add_common(ablate, common);
  std::string preset;
  ablate->add_option("--preset", preset, "default, wo-shared-codebook, wo-unified, wo-dcl, wo-finetune, full-finetune")
      ->required();

  CLI::App* report = app.add_subcommand("report", "Print metrics and analysis of a completed run");
  add_common(report, common);

  CLI::App* show = app.add_subcommand("config", "Print the effective configuration");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? gmc::kExitOk : gmc::kExitConfig;
  }

  try {
    for (const auto& [sub, sc] : stage_apps) {
      if (!sub->parsed()) continue;
      RunConfig config = resolve(common);
      if (std::string(sc.name) == "ingest" && config.data.source != "files") {
        throw gmc::ConfigError("ingest needs data.source=files with data.files entries");
      }
      if (std::string(sc.name) == "synth" && config.data.source != "synthetic") {
        throw gmc::ConfigError("synth needs data.source=synthetic");
      }
      Pipeline p(config);
      print_record(p.run(sc.stage));
      if (sc.stage == Stage::kEvaluate) std::cout << p.metrics().table();
      if (sc.stage == Stage::kAnalyze) print_analysis(p);
      return gmc::kExitOk;
    }
    if (decode->parsed()) {
      Pipeline p(resolve(common));
      if (input.empty() != output.empty()) throw gmc::ConfigError("--input and --output go together");
      if (!input.empty()) {
        p.decode_file(input, output);
      } else {
        print_record(p.run(Stage::kDecode));
      }
      return gmc::kExitOk;
    }
    if (run->parsed()) {
      Pipeline p(resolve(common));
      for (const auto& r : p.run_through(Stage::kEvaluate)) print_record(r);
      print_record(p.run(Stage::kAnalyze));
      std::cout << p.metrics().table();
      print_analysis(p);
      return gmc::kExitOk;
    }
    if (ablate->parsed()) {
      auto r = gmc::pipeline::run_ablation(resolve(common), preset);
      std::cout << r.table();
      return gmc::kExitOk;
    }
    if (report->parsed()) {
      Pipeline p(resolve(common));
      std::cout << p.metrics().table();
      if (p.complete(Stage::kAnalyze)) print_analysis(p);
      return gmc::kExitOk;
    }
    if (show->parsed()) {
      RunConfig config = resolve(common);
      nlohmann::json j = config;
      std::cout << j.dump(2) << "\n" << "config hash: " << config.hash() << "\n";
      return gmc::kExitOk;
    }
  } catch (const gmc::Error& e) {
    std::fprintf(stderr, "gmc: error: %s\n", e.what());
    return gmc::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "gmc: error: %s\n", e.what());
    return gmc::kExitRuntime;
  }
  return gmc::kExitOk;
}
