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

#include "protector/eval.h"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>

#include "fmt/core.h"
#include "httplib.h"
#include "protector/error.h"

namespace protector {
namespace {

std::string Lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  return out;
}

std::string Fixed2(const std::optional<double>& v) {
  return v ? fmt::format("{:.2f}", *v) : std::string();
}

std::optional<double> MeanOf(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  double sum = 0.0;
  for (double x : xs) sum += x;
  return sum / static_cast<double>(xs.size());
}

std::size_t ScenarioColumnWidth(const std::vector<std::string>& scenarios) {
  std::size_t width = std::string_view("Scenarios").size();
  for (const auto& s : scenarios) width = std::max(width, s.size());
  return std::max<std::size_t>(width, 20);
}

// Two-column groups per modality, one shared layout for ASR and ppl tables.
struct TextGrid {
  std::vector<Modality> modalities;
  std::string left_label;
  std::string right_label;
  std::size_t name_width = 20;

  static constexpr std::size_t kCell = 9;
  static constexpr std::size_t kGroup = 2 * kCell + 3;

  std::string Header() const {
    std::string line1 = fmt::format("{:<{}}", "Scenarios", name_width);
    std::string line2(name_width, ' ');
    std::string rule(name_width, '-');
    for (Modality m : modalities) {
      line1 += fmt::format("| {:<{}}", ModalityDisplayName(m), kGroup - 1);
      line2 += fmt::format("| {:>{}} {:>{}} ", left_label, kCell, right_label,
                           kCell);
      rule += "+" + std::string(kGroup, '-');
    }
    return Trim(line1) + "\n" + Trim(line2) + "\n" + rule + "\n";
  }

  std::string Row(std::string_view name,
                  const std::vector<std::optional<double>>& cells) const {
    std::string line = fmt::format("{:<{}}", name, name_width);
    for (std::size_t i = 0; i + 1 < cells.size(); i += 2) {
      line += fmt::format("| {:>{}} {:>{}} ", Cell(cells[i]), kCell,
                          Cell(cells[i + 1]), kCell);
    }
    return Trim(line) + "\n";
  }

  std::string Rule() const {
    std::string rule(name_width, '-');
    for (std::size_t i = 0; i < modalities.size(); ++i) {
      rule += "+" + std::string(kGroup, '-');
    }
    return rule + "\n";
  }

  static std::string Cell(const std::optional<double>& v) {
    return v ? fmt::format("{:.2f}", *v) : "-";
  }

  static std::string Trim(std::string s) {
    while (!s.empty() && s.back() == ' ') s.pop_back();
    return s;
  }
};

}  // namespace

std::string_view ModalityName(Modality m) {
  switch (m) {
    case Modality::kTextOnly: return "text_only";
    case Modality::kSd: return "sd";
    case Modality::kOcr: return "ocr";
    case Modality::kSdOcr: return "sd_ocr";
  }
  return "text_only";
}

std::string_view ModalityDisplayName(Modality m) {
  switch (m) {
    case Modality::kTextOnly: return "Text-only";
    case Modality::kSd: return "SD";
    case Modality::kOcr: return "OCR";
    case Modality::kSdOcr: return "SD+OCR";
  }
  return "Text-only";
}

Modality ParseModality(std::string_view name) {
  for (Modality m : kModalities) {
    if (name == ModalityName(m)) return m;
  }
  throw Error(ErrorCode::kParse, fmt::format("unknown modality '{}'", name));
}

std::string CanonicalScenario(std::string_view scenario) {
  std::string key = Lower(scenario);
  std::replace(key.begin(), key.end(), '_', ' ');
  std::replace(key.begin(), key.end(), '-', ' ');
  for (std::string_view canonical : kScenarios) {
    if (Lower(canonical) == key) return std::string(canonical);
  }
  return std::string(scenario);
}

BenchPrompt ParseBenchLine(std::string_view line, std::size_t line_number) {
  try {
    const auto j = nlohmann::json::parse(line);
    BenchPrompt p;
    p.id = j.at("id").get<std::string>();
    p.scenario = CanonicalScenario(j.at("scenario").get<std::string>());
    p.modality = ParseModality(j.at("modality").get<std::string>());
    p.text_prompt = j.at("text_prompt").get<std::string>();
    if (auto it = j.find("image_ref"); it != j.end() && !it->is_null()) {
      p.image_ref = it->get<std::string>();
    }
    if (p.modality != Modality::kTextOnly && !p.image_ref) {
      throw Error(ErrorCode::kParse,
                  fmt::format("line {}: modality {} requires image_ref",
                              line_number, ModalityName(p.modality)));
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: {}", line_number, e.what()));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kParse &&
        std::string_view(e.what()).starts_with("line ")) {
      throw;
    }
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: {}", line_number, e.what()));
  }
}

std::vector<BenchPrompt> ReadBenchmark(std::istream& in) {
  std::vector<BenchPrompt> prompts;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    prompts.push_back(ParseBenchLine(line, n));
  }
  return prompts;
}

std::vector<BenchPrompt> LoadBenchmark(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open benchmark {}", path.string()));
  }
  return ReadBenchmark(in);
}

nlohmann::json BenchPromptToJson(const BenchPrompt& p) {
  nlohmann::json j = {{"id", p.id},
                      {"scenario", p.scenario},
                      {"modality", ModalityName(p.modality)},
                      {"text_prompt", p.text_prompt}};
  if (p.image_ref) j["image_ref"] = *p.image_ref;
  return j;
}

UserInput ToUserInput(const BenchPrompt& prompt) {
  UserInput input{prompt.text_prompt, {}};
  if (prompt.image_ref) input.image_refs.push_back(*prompt.image_ref);
  return input;
}

KeywordJudge::KeywordJudge(std::vector<std::string> phrases) {
  for (const auto& p : phrases) {
    if (!p.empty()) phrases_.push_back(Lower(p));
  }
}

std::vector<std::string> KeywordJudge::ReadPhrases(std::istream& in) {
  std::vector<std::string> phrases;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    phrases.push_back(line);
  }
  return phrases;
}

KeywordJudge KeywordJudge::FromFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open keyword list {}", path.string()));
  }
  return KeywordJudge(ReadPhrases(in));
}

bool KeywordJudge::IsHarmful(std::string_view response) const {
  const std::string lower = Lower(response);
  return std::any_of(phrases_.begin(), phrases_.end(), [&](const auto& p) {
    return lower.find(p) != std::string::npos;
  });
}

ExternalJudgeConfig ExternalJudgeConfigFromJson(const nlohmann::json& j) {
  ExternalJudgeConfig config;
  try {
    config.base_url = j.at("base_url").get<std::string>();
    config.path = j.value("path", config.path);
    if (j.contains("body_template")) config.body_template = j["body_template"];
    config.answer_path = j.value("answer_path", config.answer_path);
    config.timeout_seconds = j.value("timeout_seconds", config.timeout_seconds);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("external judge config: {}", e.what()));
  }
  return config;
}

ExternalJudge::ExternalJudge(ExternalJudgeConfig config)
    : config_(std::move(config)) {}

namespace {

nlohmann::json FillResponse(const nlohmann::json& node,
                            std::string_view response) {
  if (node.is_string() && node.get_ref<const std::string&>() == "{{response}}") {
    return std::string(response);
  }
  if (node.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = node.begin(); it != node.end(); ++it) {
      out[it.key()] = FillResponse(it.value(), response);
    }
    return out;
  }
  if (node.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& c : node) out.push_back(FillResponse(c, response));
    return out;
  }
  return node;
}

}  // namespace

bool ExternalJudge::IsHarmful(std::string_view response) const {
  httplib::Client client(config_.base_url);
  const auto sec = static_cast<time_t>(config_.timeout_seconds);
  client.set_connection_timeout(sec, 0);
  client.set_read_timeout(sec, 0);
  const std::string body =
      FillResponse(config_.body_template, response)
          .dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  auto res = client.Post(config_.path, body, "application/json");
  if (!res) {
    throw Error(ErrorCode::kJudge,
                fmt::format("judge unreachable: {}",
                            httplib::to_string(res.error())));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error(ErrorCode::kJudge,
                fmt::format("judge returned status {}", res->status));
  }
  std::string answer;
  try {
    const auto doc = nlohmann::json::parse(res->body);
    answer = Lower(SelectPath(doc, config_.answer_path).get<std::string>());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kJudge,
                fmt::format("judge answer unreadable: {}", e.what()));
  }
  const auto start = answer.find_first_not_of(" \t\r\n\"'");
  answer = start == std::string::npos ? "" : answer.substr(start);
  if (answer.starts_with("yes")) return true;
  if (answer.starts_with("no")) return false;
  throw Error(ErrorCode::kJudge,
              fmt::format("judge answered '{}', expected yes/no", answer));
}

bool EvalRecord::operator==(const EvalRecord& other) const {
  return prompt == other.prompt && response == other.response &&
         judged_harmful == other.judged_harmful && guarded == other.guarded &&
         verdict == other.verdict && error == other.error;
}

nlohmann::json EvalRecordToJson(const EvalRecord& r) {
  nlohmann::json j = BenchPromptToJson(r.prompt);
  j["response"] = r.response;
  j["guarded"] = r.guarded;
  j["judged_harmful"] =
      r.judged_harmful ? nlohmann::json(*r.judged_harmful) : nlohmann::json();
  if (r.verdict) {
    j["verdict"] = {{"score", r.verdict->score},
                    {"threshold", r.verdict->threshold},
                    {"is_harmful", r.verdict->is_harmful},
                    {"source", VerdictSourceName(r.verdict->source)}};
  }
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

namespace {

void JudgeInto(EvalRecord& record, const Judge& judge) {
  try {
    record.judged_harmful = judge.IsHarmful(record.response);
  } catch (const std::exception& e) {
    record.judged_harmful.reset();
    record.error = fmt::format("judge: {}", e.what());
  }
}

}  // namespace

std::vector<EvalRecord> RunBenchmark(std::span<const BenchPrompt> prompts,
                                     Backend& backend, const Judge& judge) {
  std::vector<EvalRecord> records;
  records.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    EvalRecord record;
    record.prompt = prompt;
    record.guarded = false;
    const UserInput input = ToUserInput(prompt);
    UpstreamRequest request;
    request.conversation_id = prompt.id;
    request.turn = 0;
    request.serialized_input =
        ConcatHistory({}, {Role::kUser, input.text, input.image_refs});
    request.user_text = input.text;
    request.image_refs = input.image_refs;
    try {
      record.response = backend.Generate(request).text;
      JudgeInto(record, judge);
    } catch (const std::exception& e) {
      record.error = fmt::format("backend: {}", e.what());
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::vector<EvalRecord> RunBenchmark(std::span<const BenchPrompt> prompts,
                                     const Protector& protector,
                                     const Judge& judge) {
  std::vector<EvalRecord> records;
  records.reserve(prompts.size());
  for (const auto& prompt : prompts) {
    EvalRecord record;
    record.prompt = prompt;
    record.guarded = true;
    try {
      const auto outcome =
          protector.RunTurn({}, ToUserInput(prompt), prompt.id);
      record.response = outcome.result.final_text;
      record.verdict = outcome.result.verdict;
      JudgeInto(record, judge);
    } catch (const std::exception& e) {
      record.error = fmt::format("pipeline: {}", e.what());
    }
    records.push_back(std::move(record));
  }
  return records;
}

std::optional<double> AsrTable::Value(std::size_t scenario, Modality m,
                                      bool guarded) const {
  return values.at(scenario)[static_cast<std::size_t>(m)][guarded ? 1 : 0];
}

std::optional<double> AsrTable::Average(Modality m, bool guarded) const {
  std::vector<double> xs;
  for (std::size_t s = 0; s < values.size(); ++s) {
    if (auto v = Value(s, m, guarded)) xs.push_back(*v);
  }
  return MeanOf(xs);
}

std::vector<std::string> OrderScenarios(std::vector<std::string> seen) {
  std::vector<std::string> ordered;
  for (std::string_view canonical : kScenarios) {
    if (std::find(seen.begin(), seen.end(), canonical) != seen.end()) {
      ordered.emplace_back(canonical);
    }
  }
  for (const auto& s : seen) {
    if (std::find(ordered.begin(), ordered.end(), s) == ordered.end()) {
      ordered.push_back(s);
    }
  }
  return ordered;
}

AsrTable ComputeAsr(std::span<const EvalRecord> records) {
  std::vector<std::string> seen;
  for (const auto& r : records) {
    if (std::find(seen.begin(), seen.end(), r.prompt.scenario) == seen.end()) {
      seen.push_back(r.prompt.scenario);
    }
  }
  AsrTable table;
  table.scenarios = OrderScenarios(std::move(seen));
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < table.scenarios.size(); ++i) {
    row_of[table.scenarios[i]] = i;
  }
  using Counts = std::array<std::array<AsrCell, 2>, kModalityCount>;
  std::vector<Counts> counts(table.scenarios.size());
  for (const auto& r : records) {
    if (!r.judged_harmful) {
      ++table.unjudged;
      continue;
    }
    AsrCell& cell = counts[row_of[r.prompt.scenario]]
                          [static_cast<std::size_t>(r.prompt.modality)]
                          [r.guarded ? 1 : 0];
    ++cell.total;
    if (*r.judged_harmful) ++cell.harmful;
  }
  table.values.resize(counts.size());
  for (std::size_t s = 0; s < counts.size(); ++s) {
    for (std::size_t m = 0; m < kModalityCount; ++m) {
      for (std::size_t arm = 0; arm < 2; ++arm) {
        const AsrCell& c = counts[s][m][arm];
        if (c.total > 0) {
          table.values[s][m][arm] =
              100.0 * static_cast<double>(c.harmful) /
              static_cast<double>(c.total);
        }
      }
    }
  }
  return table;
}

std::string RenderAsrCsv(const AsrTable& table) {
  std::string out = "scenario";
  for (Modality m : kModalities) {
    out += fmt::format(",{0}_unguarded,{0}_guarded", ModalityName(m));
  }
  out += '\n';
  auto row = [&](std::string_view name, auto&& value) {
    out += name;
    for (Modality m : kModalities) {
      out += "," + Fixed2(value(m, false)) + "," + Fixed2(value(m, true));
    }
    out += '\n';
  };
  for (std::size_t s = 0; s < table.scenarios.size(); ++s) {
    row(table.scenarios[s],
        [&](Modality m, bool g) { return table.Value(s, m, g); });
  }
  row("Average", [&](Modality m, bool g) { return table.Average(m, g); });
  return out;
}

std::string RenderAsrText(const AsrTable& table) {
  TextGrid grid{{kModalities.begin(), kModalities.end()},
                "w/o Guard",
                "w/ Guard",
                ScenarioColumnWidth(table.scenarios)};
  std::string out = grid.Header();
  auto cells = [&](auto&& value) {
    std::vector<std::optional<double>> v;
    for (Modality m : kModalities) {
      v.push_back(value(m, false));
      v.push_back(value(m, true));
    }
    return v;
  };
  for (std::size_t s = 0; s < table.scenarios.size(); ++s) {
    out += grid.Row(table.scenarios[s], cells([&](Modality m, bool g) {
                      return table.Value(s, m, g);
                    }));
  }
  out += grid.Rule();
  out += grid.Row("Average", cells([&](Modality m, bool g) {
                    return table.Average(m, g);
                  }));
  if (table.unjudged > 0) {
    out += fmt::format("unjudged records excluded: {}\n", table.unjudged);
  }
  return out;
}

std::vector<PplItem> ReadPplItems(std::istream& in) {
  std::vector<PplItem> items;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    PplItem item;
    item.prompt = ParseBenchLine(line, n);
    try {
      const auto j = nlohmann::json::parse(line);
      item.harmful = j.at("harmful").get<std::string>();
      item.harmless = j.at("harmless").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse, fmt::format("line {}: {}", n, e.what()));
    }
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<PplItem> LoadPplItems(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open ppl items {}", path.string()));
  }
  return ReadPplItems(in);
}

std::optional<double> PplTable::Average(Modality m, bool harmless) const {
  std::vector<double> xs;
  for (const auto& row : values) {
    if (auto v = row[static_cast<std::size_t>(m)][harmless ? 1 : 0]) {
      xs.push_back(*v);
    }
  }
  return MeanOf(xs);
}

bool PplTable::HasModality(Modality m) const {
  return std::any_of(values.begin(), values.end(), [&](const Row& row) {
    const auto& cell = row[static_cast<std::size_t>(m)];
    return cell[0].has_value() || cell[1].has_value();
  });
}

PplTable PplCompare(Backend& backend, std::span<const PplItem> items) {
  std::vector<std::string> seen;
  for (const auto& item : items) {
    if (std::find(seen.begin(), seen.end(), item.prompt.scenario) ==
        seen.end()) {
      seen.push_back(item.prompt.scenario);
    }
  }
  PplTable table;
  table.scenarios = OrderScenarios(std::move(seen));
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < table.scenarios.size(); ++i) {
    row_of[table.scenarios[i]] = i;
  }
  // sums[row][modality][kind] = (sum of ppl, count)
  using Acc = std::array<std::array<std::pair<double, int>, 2>, kModalityCount>;
  std::vector<Acc> sums(table.scenarios.size());
  for (const auto& item : items) {
    const UserInput input = ToUserInput(item.prompt);
    UpstreamRequest request;
    request.conversation_id = item.prompt.id;
    request.serialized_input =
        ConcatHistory({}, {Role::kUser, input.text, input.image_refs});
    request.user_text = input.text;
    request.image_refs = input.image_refs;
    auto& acc = sums[row_of[item.prompt.scenario]]
                    [static_cast<std::size_t>(item.prompt.modality)];
    const std::string* responses[2] = {&item.harmful, &item.harmless};
    for (std::size_t kind = 0; kind < 2; ++kind) {
      const auto logprobs =
          backend.ContinuationLogprobs(request, *responses[kind]);
      acc[kind].first += Perplexity(logprobs);
      acc[kind].second += 1;
    }
  }
  table.values.resize(sums.size());
  for (std::size_t s = 0; s < sums.size(); ++s) {
    for (std::size_t m = 0; m < kModalityCount; ++m) {
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& [sum, count] = sums[s][m][k];
        if (count > 0) table.values[s][m][k] = sum / count;
      }
    }
  }
  return table;
}

std::string RenderPplCsv(const PplTable& table) {
  std::vector<Modality> present;
  for (Modality m : kModalities) {
    if (table.HasModality(m)) present.push_back(m);
  }
  std::string out = "scenario";
  for (Modality m : present) {
    out += fmt::format(",{0}_harmful,{0}_harmless", ModalityName(m));
  }
  out += '\n';
  for (std::size_t s = 0; s < table.scenarios.size(); ++s) {
    out += table.scenarios[s];
    for (Modality m : present) {
      const auto& cell = table.values[s][static_cast<std::size_t>(m)];
      out += "," + Fixed2(cell[0]) + "," + Fixed2(cell[1]);
    }
    out += '\n';
  }
  out += "Average";
  for (Modality m : present) {
    out += "," + Fixed2(table.Average(m, false)) + "," +
           Fixed2(table.Average(m, true));
  }
  out += '\n';
  return out;
}

std::string RenderPplText(const PplTable& table) {
  TextGrid grid;
  for (Modality m : kModalities) {
    if (table.HasModality(m)) grid.modalities.push_back(m);
  }
  grid.left_label = "Harmful";
  grid.right_label = "Harmless";
  grid.name_width = ScenarioColumnWidth(table.scenarios);
  std::string out = grid.Header();
  for (std::size_t s = 0; s < table.scenarios.size(); ++s) {
    std::vector<std::optional<double>> cells;
    for (Modality m : grid.modalities) {
      const auto& cell = table.values[s][static_cast<std::size_t>(m)];
      cells.push_back(cell[0]);
      cells.push_back(cell[1]);
    }
    out += grid.Row(table.scenarios[s], cells);
  }
  out += grid.Rule();
  std::vector<std::optional<double>> avg;
  for (Modality m : grid.modalities) {
    avg.push_back(table.Average(m, false));
    avg.push_back(table.Average(m, true));
  }
  out += grid.Row("Average", avg);
  return out;
}

int HistogramBin(double score, int n_bins) {
  const int bin = static_cast<int>(std::floor(score * n_bins));
  return std::clamp(bin, 0, n_bins - 1);
}

ScoreHistogram BuildHistogram(const ResponseScorer& scorer,
                              std::span<const LabeledResponse> records,
                              int n_bins) {
  if (n_bins < 2) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("histogram needs >= 2 bins, got {}", n_bins));
  }
  ScoreHistogram hist{n_bins, std::vector<int>(static_cast<std::size_t>(n_bins)),
                      std::vector<int>(static_cast<std::size_t>(n_bins))};
  for (const auto& r : records) {
    const auto bin = static_cast<std::size_t>(
        HistogramBin(scorer.Score(r.answer), n_bins));
    ++(r.label == 0 ? hist.h0 : hist.h1)[bin];
  }
  return hist;
}

std::string RenderHistogramCsv(const ScoreHistogram& histogram) {
  std::string out = "bin_low,bin_high,count_h0,count_h1\n";
  for (int b = 0; b < histogram.n_bins; ++b) {
    const double lo = static_cast<double>(b) / histogram.n_bins;
    const double hi = static_cast<double>(b + 1) / histogram.n_bins;
    out += fmt::format("{:.6g},{:.6g},{},{}\n", lo, hi,
                       histogram.h0[static_cast<std::size_t>(b)],
                       histogram.h1[static_cast<std::size_t>(b)]);
  }
  return out;
}

}  // namespace protector
