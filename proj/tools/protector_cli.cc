// Copyright 2026 The Protector Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// protector: train, evaluate and serve the response guard.

#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "fmt/core.h"
#include "fmt/ostream.h"
#include "json.hpp"
#include "protector/backend.h"
#include "protector/checkpoint.h"
#include "protector/detoxifier.h"
#include "protector/error.h"
#include "protector/eval.h"
#include "protector/harm_detector.h"
#include "protector/manifest.h"
#include "protector/pipeline.h"
#include "protector/service.h"
#include "protector/synthetic.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace protector;

namespace {

std::vector<std::string> g_argv;

std::string Dump(const json& j, int indent = 2) {
  return j.dump(indent, ' ', false, json::error_handler_t::replace);
}

void WriteText(const fs::path& path, std::string_view text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text)) {
    throw Error(ErrorCode::kIo, fmt::format("cannot write {}", path.string()));
  }
}

json ReadJsonFile(const fs::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo, fmt::format("cannot open {}", path.string()));
  }
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("{}: {}", path.string(), e.what()));
  }
}

void Manifest(const std::string& command, std::uint64_t seed,
              const json& config, std::vector<fs::path> inputs,
              std::vector<fs::path> outputs, const fs::path& path) {
  RunManifest m{command, g_argv, seed, config, std::move(inputs),
                std::move(outputs)};
  WriteRunManifest(m, path);
}

fs::path OrDefault(const std::string& given, const fs::path& fallback) {
  return given.empty() ? fallback : fs::path(given);
}

struct ModelFlags {
  ModelConfig config;

  void Add(CLI::App* app) {
    app->add_option("--d-model", config.d_model, "Hidden width")
        ->capture_default_str();
    app->add_option("--layers", config.n_layers, "Transformer blocks")
        ->capture_default_str();
    app->add_option("--heads", config.n_heads, "Attention heads")
        ->capture_default_str();
    app->add_option("--ctx-len", config.ctx_len, "Context length in tokens")
        ->capture_default_str();
    app->add_option("--seed", config.seed, "Initialisation seed")
        ->capture_default_str();
  }
};

// --- train-detector ---------------------------------------------------------

struct TrainDetectorArgs {
  std::string data, out, report, manifest;
  ModelFlags model;
  DetectorTrainConfig train;
  double threshold = kDefaultThreshold;
};

void AddTrainDetector(CLI::App& root, TrainDetectorArgs& a) {
  auto* app = root.add_subcommand("train-detector",
                                  "Train the harm detector on triples");
  app->add_option("--data", a.data, "Triples JSONL")->required();
  app->add_option("--out", a.out, "Checkpoint path")->required();
  app->add_option("--report", a.report, "Report JSON (default <out>.report.json)");
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out>.manifest.json)");
  a.model.Add(app);
  app->add_option("--epochs", a.train.epochs)->capture_default_str();
  app->add_option("--batch", a.train.batch_size)->capture_default_str();
  app->add_option("--lr", a.train.lr)->capture_default_str();
  app->add_option("--clip", a.train.clip_norm)->capture_default_str();
  app->add_option("--holdout", a.train.holdout_fraction)->capture_default_str();
  app->add_option("--shuffle-seed", a.train.shuffle_seed)->capture_default_str();
  app->add_option("--threshold", a.threshold, "Stored decision threshold")
      ->capture_default_str();
}

int RunTrainDetector(TrainDetectorArgs& a) {
  a.train.model = a.model.config;
  const auto triples = LoadTriples(a.data);
  const TrainedDetector trained = TrainDetector(triples, a.train, a.threshold);
  SaveHarmDetector(trained.detector, a.threshold, a.out);

  json report = DetectorReportToJson(trained.report);
  if (!trained.heldout.empty()) {
    const auto acc =
        DetectorAccuracy(trained.detector, trained.heldout, a.threshold);
    report["heldout_accuracy"] = {{"h0", acc.h0}, {"h1", acc.h1},
                                  {"avg", acc.avg}};
    fmt::print("held-out accuracy  h=0 {:.2f}  h=1 {:.2f}  avg {:.2f}\n",
               acc.h0, acc.h1, acc.avg);
  }
  const fs::path report_path = OrDefault(a.report, a.out + ".report.json");
  WriteText(report_path, Dump(report) + "\n");
  fmt::print("loss {:.6f} -> {:.6f}\n", trained.report.initial_loss(),
             trained.report.final_loss());

  json config = {{"model", ModelConfigToJson(a.train.model)},
                 {"epochs", a.train.epochs},
                 {"batch_size", a.train.batch_size},
                 {"lr", a.train.lr},
                 {"clip_norm", a.train.clip_norm},
                 {"holdout_fraction", a.train.holdout_fraction},
                 {"shuffle_seed", a.train.shuffle_seed},
                 {"threshold", a.threshold}};
  Manifest("train-detector", a.model.config.seed, config, {a.data},
           {a.out, report_path}, OrDefault(a.manifest, a.out + ".manifest.json"));
  return 0;
}

// --- train-detoxifier -------------------------------------------------------

struct TrainDetoxArgs {
  std::string data, out, report, manifest;
  ModelFlags model;
  DetoxTrainConfig train;
};

void AddTrainDetox(CLI::App& root, TrainDetoxArgs& a) {
  auto* app = root.add_subcommand("train-detoxifier",
                                  "Train the response detoxifier on triples");
  app->add_option("--data", a.data, "Triples JSONL")->required();
  app->add_option("--out", a.out, "Checkpoint path")->required();
  app->add_option("--report", a.report, "Report JSON (default <out>.report.json)");
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out>.manifest.json)");
  a.model.config.ctx_len = 128;
  a.model.Add(app);
  app->add_option("--epochs", a.train.epochs)->capture_default_str();
  app->add_option("--batch", a.train.batch_size)->capture_default_str();
  app->add_option("--lr", a.train.lr)->capture_default_str();
  app->add_option("--final-lr-scale", a.train.final_lr_scale,
                  "Learning rate at the last step, relative to --lr")
      ->capture_default_str();
  app->add_option("--clip", a.train.clip_norm)->capture_default_str();
  app->add_option("--shuffle-seed", a.train.shuffle_seed)->capture_default_str();
  app->add_option("--max-new", a.train.max_new, "Generation budget")
      ->capture_default_str();
}

int RunTrainDetox(TrainDetoxArgs& a) {
  a.train.model = a.model.config;
  const auto triples = LoadTriples(a.data);
  const TrainedDetoxifier trained = TrainDetoxifier(triples, a.train);
  SaveDetoxifier(trained.detoxifier, a.out);

  std::size_t exact = 0;
  for (const auto& t : triples) {
    if (trained.detoxifier.Detoxify({t.question, t.rejected, 0}).text ==
        t.accepted) {
      ++exact;
    }
  }
  json report = DetoxReportToJson(trained.report);
  report["exact_match"] = {{"matched", exact}, {"total", triples.size()}};
  const fs::path report_path = OrDefault(a.report, a.out + ".report.json");
  WriteText(report_path, Dump(report) + "\n");
  fmt::print("loss {:.6f} -> {:.6f}, exact regenerations {}/{}\n",
             trained.report.initial_loss(), trained.report.final_loss(), exact,
             triples.size());

  json config = {{"model", ModelConfigToJson(a.train.model)},
                 {"epochs", a.train.epochs},
                 {"batch_size", a.train.batch_size},
                 {"lr", a.train.lr},
                 {"final_lr_scale", a.train.final_lr_scale},
                 {"clip_norm", a.train.clip_norm},
                 {"shuffle_seed", a.train.shuffle_seed},
                 {"max_new", a.train.max_new}};
  Manifest("train-detoxifier", a.model.config.seed, config, {a.data},
           {a.out, report_path}, OrDefault(a.manifest, a.out + ".manifest.json"));
  return 0;
}

// --- eval-asr ---------------------------------------------------------------

struct EvalAsrArgs {
  std::string bench, backend, judge, detector, detoxifier, out_dir, manifest;
  std::string arms = "both";
  std::optional<double> threshold;
  bool recheck = false;
};

void AddEvalAsr(CLI::App& root, EvalAsrArgs& a) {
  auto* app = root.add_subcommand(
      "eval-asr", "Attack success rate with and without the guard");
  app->add_option("--bench", a.bench, "Benchmark JSONL")->required();
  app->add_option("--backend", a.backend, "Backend config JSON")->required();
  app->add_option("--judge", a.judge,
                  "Keyword list, or external:<config.json>")
      ->required();
  app->add_option("--detector", a.detector,
                  "Detector checkpoint, or keyword:<phrases.txt>");
  app->add_option("--detoxifier", a.detoxifier,
                  "Detoxifier checkpoint, or 'refusal'");
  app->add_option("--threshold", a.threshold, "Override detector threshold");
  app->add_flag("--recheck", a.recheck, "Re-score rewrites once");
  app->add_option("--arms", a.arms, "both, unguarded or guarded")
      ->check(CLI::IsMember({"both", "unguarded", "guarded"}))
      ->capture_default_str();
  app->add_option("--out-dir", a.out_dir, "Report directory")->required();
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out-dir>/manifest.json)");
}

std::unique_ptr<Judge> MakeJudge(const std::string& spec) {
  constexpr std::string_view kExternal = "external:";
  if (spec.starts_with(kExternal)) {
    return std::make_unique<ExternalJudge>(ExternalJudgeConfigFromJson(
        ReadJsonFile(spec.substr(kExternal.size()))));
  }
  return std::make_unique<KeywordJudge>(KeywordJudge::FromFile(spec));
}

std::pair<std::shared_ptr<const ResponseScorer>, double> MakeScorer(
    const std::string& spec) {
  constexpr std::string_view kKeyword = "keyword:";
  if (spec.starts_with(kKeyword)) {
    return {std::make_shared<KeywordScorer>(
                KeywordJudge::FromFile(spec.substr(kKeyword.size()))),
            kDefaultThreshold};
  }
  LoadedDetector loaded = LoadHarmDetector(spec);
  return {std::make_shared<HarmDetector>(std::move(loaded.detector)),
          loaded.threshold};
}

std::shared_ptr<const ResponseRewriter> MakeRewriter(const std::string& spec) {
  if (spec == "refusal") return std::make_shared<FixedRefusalRewriter>();
  return std::make_shared<Detoxifier>(LoadDetoxifier(spec));
}

void WriteRecords(const fs::path& path, const std::vector<EvalRecord>& records) {
  std::string text;
  for (const auto& r : records) text += Dump(EvalRecordToJson(r), -1) + "\n";
  WriteText(path, text);
}

int RunEvalAsr(EvalAsrArgs& a) {
  const bool unguarded = a.arms != "guarded";
  const bool guarded = a.arms != "unguarded";
  if (guarded && (a.detector.empty() || a.detoxifier.empty())) {
    throw CLI::ValidationError(
        "--detector and --detoxifier are required for the guarded arm");
  }
  const auto prompts = LoadBenchmark(a.bench);
  const fs::path backend_path(a.backend);
  auto backend =
      MakeBackend(ReadJsonFile(backend_path), backend_path.parent_path());
  const auto judge = MakeJudge(a.judge);

  std::vector<EvalRecord> records;
  if (unguarded) records = RunBenchmark(prompts, *backend, *judge);
  json protector_config = nullptr;
  if (guarded) {
    auto [scorer, stored] = MakeScorer(a.detector);
    const ProtectorConfig config{a.threshold.value_or(stored), a.recheck};
    const Protector protector(backend, scorer, MakeRewriter(a.detoxifier),
                              config);
    auto guarded_records = RunBenchmark(prompts, protector, *judge);
    records.insert(records.end(), guarded_records.begin(),
                   guarded_records.end());
    protector_config = {{"threshold", config.threshold},
                        {"recheck_detoxified", config.recheck_detoxified}};
  }

  const AsrTable table = ComputeAsr(records);
  const fs::path dir(a.out_dir);
  WriteText(dir / "asr.csv", RenderAsrCsv(table));
  WriteText(dir / "asr.txt", RenderAsrText(table));
  WriteRecords(dir / "records.jsonl", records);
  fmt::print("{}", RenderAsrText(table));
  if (table.unjudged > 0) {
    fmt::print(stderr, "warning: {} record(s) could not be judged\n",
               table.unjudged);
  }

  std::vector<fs::path> inputs = {a.bench, a.backend};
  for (const auto& spec : {a.judge, a.detector, a.detoxifier}) {
    const auto colon = spec.find(':');
    const std::string file = colon == std::string::npos ? spec
                                                        : spec.substr(colon + 1);
    if (!file.empty() && fs::is_regular_file(file)) inputs.emplace_back(file);
  }
  json config = {{"arms", a.arms},
                 {"judge", a.judge},
                 {"detector", a.detector},
                 {"detoxifier", a.detoxifier},
                 {"protector", protector_config}};
  Manifest("eval-asr", 0, config, inputs,
           {dir / "asr.csv", dir / "asr.txt", dir / "records.jsonl"},
           OrDefault(a.manifest, dir / "manifest.json"));
  return 0;
}

// --- eval-ppl ---------------------------------------------------------------

struct EvalPplArgs {
  std::string items, backend, out_dir, manifest;
};

void AddEvalPpl(CLI::App& root, EvalPplArgs& a) {
  auto* app = root.add_subcommand(
      "eval-ppl", "Perplexity of harmful vs harmless responses");
  app->add_option("--items", a.items,
                  "JSONL of benchmark prompts with harmful/harmless responses")
      ->required();
  app->add_option("--backend", a.backend,
                  "Backend config JSON (must expose log-probabilities)")
      ->required();
  app->add_option("--out-dir", a.out_dir, "Report directory")->required();
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out-dir>/manifest.json)");
}

int RunEvalPpl(EvalPplArgs& a) {
  const auto items = LoadPplItems(a.items);
  const fs::path backend_path(a.backend);
  auto backend =
      MakeBackend(ReadJsonFile(backend_path), backend_path.parent_path());
  const PplTable table = PplCompare(*backend, items);
  const fs::path dir(a.out_dir);
  WriteText(dir / "ppl.csv", RenderPplCsv(table));
  WriteText(dir / "ppl.txt", RenderPplText(table));
  fmt::print("{}", RenderPplText(table));
  Manifest("eval-ppl", 0, {{"backend_kind", backend->kind()}},
           {a.items, a.backend}, {dir / "ppl.csv", dir / "ppl.txt"},
           OrDefault(a.manifest, dir / "manifest.json"));
  return 0;
}

// --- eval-detector / histogram ----------------------------------------------

struct EvalDetectorArgs {
  std::string detector, data, out, manifest;
  std::optional<double> threshold;
};

void AddEvalDetector(CLI::App& root, EvalDetectorArgs& a) {
  auto* app = root.add_subcommand("eval-detector",
                                  "Per-label detector accuracy on triples");
  app->add_option("--detector", a.detector, "Detector checkpoint")->required();
  app->add_option("--data", a.data, "Triples JSONL")->required();
  app->add_option("--threshold", a.threshold, "Override stored threshold");
  app->add_option("--out", a.out, "Result JSON")->required();
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out>.manifest.json)");
}

int RunEvalDetector(EvalDetectorArgs& a) {
  const LoadedDetector loaded = LoadHarmDetector(a.detector);
  const double threshold = a.threshold.value_or(loaded.threshold);
  ValidateThreshold(threshold);
  const auto records = ExpandTriples(LoadTriples(a.data));
  const AccuracyBreakdown acc =
      DetectorAccuracy(loaded.detector, records, threshold);
  const ModelConfig& c = loaded.detector.backbone().config();
  fmt::print("{:<12}{:>8}{:>8}{:>8}\n", "Model", "h=0", "h=1", "Avg");
  fmt::print("{:<12}{:>8.2f}{:>8.2f}{:>8.2f}\n",
             fmt::format("d{}x{}", c.d_model, c.n_layers), acc.h0, acc.h1,
             acc.avg);
  WriteText(a.out, Dump({{"h0", acc.h0},
                         {"h1", acc.h1},
                         {"avg", acc.avg},
                         {"threshold", threshold},
                         {"records", records.size()}}) +
                       "\n");
  Manifest("eval-detector", c.seed, {{"threshold", threshold}},
           {a.detector, a.data}, {a.out},
           OrDefault(a.manifest, a.out + ".manifest.json"));
  return 0;
}

struct HistogramArgs {
  std::string detector, data, out, manifest;
  int bins = 10;
};

void AddHistogram(CLI::App& root, HistogramArgs& a) {
  auto* app = root.add_subcommand("histogram",
                                  "Detector score histogram per label (CSV)");
  app->add_option("--detector", a.detector, "Detector checkpoint")->required();
  app->add_option("--data", a.data, "Triples JSONL")->required();
  app->add_option("--bins", a.bins)->capture_default_str();
  app->add_option("--out", a.out, "CSV path")->required();
  app->add_option("--manifest", a.manifest,
                  "Manifest JSON (default <out>.manifest.json)");
}

int RunHistogram(HistogramArgs& a) {
  const LoadedDetector loaded = LoadHarmDetector(a.detector);
  const auto records = ExpandTriples(LoadTriples(a.data));
  const auto hist = BuildHistogram(loaded.detector, records, a.bins);
  WriteText(a.out, RenderHistogramCsv(hist));
  Manifest("histogram", loaded.detector.backbone().config().seed,
           {{"bins", a.bins}}, {a.detector, a.data}, {a.out},
           OrDefault(a.manifest, a.out + ".manifest.json"));
  return 0;
}

// --- serve ------------------------------------------------------------------

struct ServeArgs {
  std::string config, manifest;
  std::optional<std::string> host;
  std::optional<int> port;
};

void AddServe(CLI::App& root, ServeArgs& a) {
  auto* app = root.add_subcommand("serve", "Run the HTTP guard service");
  app->add_option("--config", a.config, "Service config JSON")->required();
  app->add_option("--host", a.host, "Overrides config and environment");
  app->add_option("--port", a.port, "Overrides config and environment");
  app->add_option("--manifest", a.manifest, "Write a manifest at startup");
}

int RunServe(ServeArgs& a) {
  ServiceConfig config = LoadServiceConfig(a.config);
  ApplyEnvOverrides(config);
  if (a.host) config.host = *a.host;
  if (a.port) config.port = *a.port;
  ServiceComponents components = LoadServiceComponents(config);
  if (!a.manifest.empty()) {
    Manifest("serve", 0, ReadJsonFile(a.config),
             {a.config, config.detector_path, config.detoxifier_path}, {},
             a.manifest);
  }

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  GuardService service(std::move(components),
                       {config.max_turns, config.max_request_bytes,
                        config.quiet, config.session_log});
  const int port = service.Start(config.host, config.port);
  fmt::print("listening on {}:{}\n", config.host, port);
  std::fflush(stdout);
  int sig = 0;
  sigwait(&signals, &sig);
  fmt::print("signal {}, draining\n", sig);
  service.Stop();
  return 0;
}

// --- fixtures ---------------------------------------------------------------

struct GenSyntheticArgs {
  std::size_t count = 2000;
  std::uint64_t seed = 7;
  std::string out;
};

void AddGenSynthetic(CLI::App& root, GenSyntheticArgs& a) {
  auto* app = root.add_subcommand(
      "gen-synthetic", "Write a synthetic marker-injected triple corpus");
  app->add_option("--count", a.count)->capture_default_str();
  app->add_option("--seed", a.seed)->capture_default_str();
  app->add_option("--out", a.out, "Triples JSONL")->required();
}

int RunGenSynthetic(GenSyntheticArgs& a) {
  std::ostringstream out;
  WriteTriples(GenerateSyntheticTriples(a.count, a.seed), out);
  WriteText(a.out, out.str());
  return 0;
}

struct GenBenchArgs {
  std::uint64_t seed = 11;
  std::string out_dir;
};

void AddGenBench(CLI::App& root, GenBenchArgs& a) {
  auto* app = root.add_subcommand(
      "gen-bench",
      "Write the 52-prompt benchmark fixture, scripted backend and keywords");
  app->add_option("--seed", a.seed)->capture_default_str();
  app->add_option("--out-dir", a.out_dir)->required();
}

int RunGenBench(GenBenchArgs& a) {
  const BenchmarkFixture fixture = MakeBenchmarkFixture(a.seed);
  const fs::path dir(a.out_dir);
  std::string bench;
  for (const auto& p : fixture.prompts) {
    bench += Dump(BenchPromptToJson(p), -1) + "\n";
  }
  WriteText(dir / "bench.jsonl", bench);
  WriteText(dir / "backend.json",
            Dump({{"kind", "scripted"}, {"responses", fixture.responses}}) +
                "\n");
  std::string keywords;
  for (const auto& m : SyntheticHarmMarkers()) keywords += m + "\n";
  WriteText(dir / "keywords.txt", keywords);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  g_argv.assign(argv, argv + argc);
  CLI::App app{"Response guard: harm detector, detoxifier, evaluation, service"};
  app.require_subcommand(1);

  TrainDetectorArgs train_detector;
  TrainDetoxArgs train_detox;
  EvalAsrArgs eval_asr;
  EvalPplArgs eval_ppl;
  EvalDetectorArgs eval_detector;
  HistogramArgs histogram;
  ServeArgs serve;
  GenSyntheticArgs gen_synthetic;
  GenBenchArgs gen_bench;
  AddTrainDetector(app, train_detector);
  AddTrainDetox(app, train_detox);
  AddEvalAsr(app, eval_asr);
  AddEvalPpl(app, eval_ppl);
  AddEvalDetector(app, eval_detector);
  AddHistogram(app, histogram);
  AddServe(app, serve);
  AddGenSynthetic(app, gen_synthetic);
  AddGenBench(app, gen_bench);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "train-detector") return RunTrainDetector(train_detector);
    if (name == "train-detoxifier") return RunTrainDetox(train_detox);
    if (name == "eval-asr") return RunEvalAsr(eval_asr);
    if (name == "eval-ppl") return RunEvalPpl(eval_ppl);
    if (name == "eval-detector") return RunEvalDetector(eval_detector);
    if (name == "histogram") return RunHistogram(histogram);
    if (name == "serve") return RunServe(serve);
    if (name == "gen-synthetic") return RunGenSynthetic(gen_synthetic);
    if (name == "gen-bench") return RunGenBench(gen_bench);
  } catch (const CLI::ValidationError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return 2;
  } catch (const Error& e) {
    fmt::print(stderr, "error [{}]: {}\n", ErrorCodeName(e.code()), e.what());
    return 1;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return 1;
  }
  return 2;
}
