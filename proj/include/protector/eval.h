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

#ifndef PROTECTOR_EVAL_H_
#define PROTECTOR_EVAL_H_

#include <array>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protector/backend.h"
#include "protector/harm_detector.h"
#include "protector/pipeline.h"

namespace protector {

enum class Modality { kTextOnly = 0, kSd = 1, kOcr = 2, kSdOcr = 3 };
inline constexpr std::size_t kModalityCount = 4;
inline constexpr std::array<Modality, kModalityCount> kModalities = {
    Modality::kTextOnly, Modality::kSd, Modality::kOcr, Modality::kSdOcr};

std::string_view ModalityName(Modality m);         // text_only, sd, ...
std::string_view ModalityDisplayName(Modality m);  // Text-only, SD, ...
Modality ParseModality(std::string_view name);

// The thirteen benchmark scenarios, in report order.
inline constexpr std::array<std::string_view, 13> kScenarios = {
    "Illegal Activity",   "Hate Speech",      "Malware Generation",
    "Physical Harm",      "Economic Harm",    "Fraud",
    "Pornography",        "Political Lobbying", "Privacy Violence",
    "Legal Opinion",      "Financial Advice", "Health Consultation",
    "Gov Decision"};

// Maps "illegal_activity", "Illegal-Activity", ... onto the canonical name;
// free-form scenarios pass through unchanged.
std::string CanonicalScenario(std::string_view scenario);

struct BenchPrompt {
  std::string id;
  std::string scenario;
  Modality modality = Modality::kTextOnly;
  std::string text_prompt;
  std::optional<std::string> image_ref;

  bool operator==(const BenchPrompt&) const = default;
};

BenchPrompt ParseBenchLine(std::string_view line, std::size_t line_number);
std::vector<BenchPrompt> ReadBenchmark(std::istream& in);
std::vector<BenchPrompt> LoadBenchmark(const std::filesystem::path& path);
nlohmann::json BenchPromptToJson(const BenchPrompt& prompt);

UserInput ToUserInput(const BenchPrompt& prompt);

// Decides whether a response is harmful.
class Judge {
 public:
  virtual ~Judge() = default;
  virtual std::string_view kind() const = 0;
  virtual bool IsHarmful(std::string_view response) const = 0;
};

// Case-insensitive phrase match.
class KeywordJudge : public Judge {
 public:
  explicit KeywordJudge(std::vector<std::string> phrases);
  // One phrase per line; blank lines ignored.
  static std::vector<std::string> ReadPhrases(std::istream& in);
  static KeywordJudge FromFile(const std::filesystem::path& path);

  std::string_view kind() const override { return "keyword"; }
  bool IsHarmful(std::string_view response) const override;
  const std::vector<std::string>& phrases() const { return phrases_; }

 private:
  std::vector<std::string> phrases_;  // lower-cased
};

// Oracle detector: 0 when any judge phrase occurs, 1 otherwise.
class KeywordScorer : public ResponseScorer {
 public:
  explicit KeywordScorer(KeywordJudge judge) : judge_(std::move(judge)) {}
  double Score(std::string_view response) const override {
    return judge_.IsHarmful(response) ? 0.0 : 1.0;
  }

 private:
  KeywordJudge judge_;
};

struct ExternalJudgeConfig {
  std::string base_url;
  std::string path = "/judge";
  // "{{response}}" is replaced by the response text.
  nlohmann::json body_template = {{"response", "{{response}}"}};
  // Dotted path to a string answer starting with yes or no.
  std::string answer_path = "answer";
  double timeout_seconds = 30.0;
};

ExternalJudgeConfig ExternalJudgeConfigFromJson(const nlohmann::json& j);

// Delegates to an HTTP service. Throws kJudge when unreachable or when the
// answer is neither yes nor no.
class ExternalJudge : public Judge {
 public:
  explicit ExternalJudge(ExternalJudgeConfig config);
  std::string_view kind() const override { return "external"; }
  bool IsHarmful(std::string_view response) const override;

 private:
  ExternalJudgeConfig config_;
};

struct EvalRecord {
  BenchPrompt prompt;
  std::string response;
  std::optional<bool> judged_harmful;  // empty when judging failed
  bool guarded = false;
  std::optional<SafetyVerdict> verdict;  // guarded arm only
  std::string error;                     // backend or judge failure

  bool operator==(const EvalRecord& other) const;
};

nlohmann::json EvalRecordToJson(const EvalRecord& record);

// Raw backend, one fresh single-turn conversation per prompt.
std::vector<EvalRecord> RunBenchmark(std::span<const BenchPrompt> prompts,
                                     Backend& backend, const Judge& judge);
// Full guarded pipeline, one fresh conversation per prompt.
std::vector<EvalRecord> RunBenchmark(std::span<const BenchPrompt> prompts,
                                     const Protector& protector,
                                     const Judge& judge);

struct AsrCell {
  int harmful = 0;
  int total = 0;
};

// Attack-success-rate matrix: scenario x modality x {unguarded, guarded}.
struct AsrTable {
  using Row = std::array<std::array<std::optional<double>, 2>, kModalityCount>;

  std::vector<std::string> scenarios;
  std::vector<Row> values;  // percentages; empty cell = no records
  int unjudged = 0;         // records excluded because judging failed

  std::optional<double> Value(std::size_t scenario, Modality m,
                              bool guarded) const;
  // Unweighted mean over scenarios with a value in this column.
  std::optional<double> Average(Modality m, bool guarded) const;
};

AsrTable ComputeAsr(std::span<const EvalRecord> records);

// Scenario order: canonical scenarios first, then others by first
// appearance.
std::vector<std::string> OrderScenarios(std::vector<std::string> seen);

std::string RenderAsrCsv(const AsrTable& table);
std::string RenderAsrText(const AsrTable& table);

struct PplItem {
  BenchPrompt prompt;
  std::string harmful;
  std::string harmless;
};

std::vector<PplItem> ReadPplItems(std::istream& in);
std::vector<PplItem> LoadPplItems(const std::filesystem::path& path);

struct PplTable {
  // [modality][0 = harmful, 1 = harmless]
  using Row = std::array<std::array<std::optional<double>, 2>, kModalityCount>;

  std::vector<std::string> scenarios;
  std::vector<Row> values;

  std::optional<double> Average(Modality m, bool harmless) const;
  bool HasModality(Modality m) const;
};

// Mean response perplexity per scenario/modality, conditioning each response
// on the single-turn serialized input the backend would have received.
// Throws kCapability when the backend has no log-probabilities.
PplTable PplCompare(Backend& backend, std::span<const PplItem> items);

std::string RenderPplCsv(const PplTable& table);
std::string RenderPplText(const PplTable& table);

struct ScoreHistogram {
  int n_bins = 0;
  std::vector<int> h0;
  std::vector<int> h1;
};

// Equal-width bins over [0, 1]; a score of exactly 1 lands in the last bin.
ScoreHistogram BuildHistogram(const ResponseScorer& scorer,
                              std::span<const LabeledResponse> records,
                              int n_bins);
int HistogramBin(double score, int n_bins);
// bin_low,bin_high,count_h0,count_h1
std::string RenderHistogramCsv(const ScoreHistogram& histogram);

}  // namespace protector

#endif  // PROTECTOR_EVAL_H_
