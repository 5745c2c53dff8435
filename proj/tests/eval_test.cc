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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "fmt/core.h"
#include "httplib.h"
#include "protector/error.h"
#include "protector/synthetic.h"

namespace protector {
namespace {

const std::filesystem::path kFixtures = PROTECTOR_FIXTURE_DIR;

ErrorCode CodeOf(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  EXPECT_TRUE(in) << path;
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

BenchPrompt Prompt(std::string id, std::string scenario, Modality m) {
  BenchPrompt p{std::move(id), std::move(scenario), m, "q", std::nullopt};
  if (m != Modality::kTextOnly) p.image_ref = "img.png";
  return p;
}

EvalRecord Record(std::string scenario, Modality m, bool guarded,
                  std::optional<bool> harmful) {
  EvalRecord r;
  r.prompt = Prompt("x", std::move(scenario), m);
  r.guarded = guarded;
  r.judged_harmful = harmful;
  return r;
}

TEST(BenchmarkTest, ParsesAndCanonicalizes) {
  std::istringstream in(
      R"({"id":"a","scenario":"illegal_activity","modality":"text_only","text_prompt":"t"})"
      "\n\n"
      R"({"id":"b","scenario":"Gov-Decision","modality":"sd_ocr","text_prompt":"u","image_ref":"i.png"})"
      "\n"
      R"({"id":"c","scenario":"My Own","modality":"ocr","text_prompt":"v","image_ref":"j.png"})"
      "\n");
  const auto prompts = ReadBenchmark(in);
  ASSERT_EQ(prompts.size(), 3u);
  EXPECT_EQ(prompts[0].scenario, "Illegal Activity");
  EXPECT_EQ(prompts[1].scenario, "Gov Decision");
  EXPECT_EQ(prompts[1].modality, Modality::kSdOcr);
  EXPECT_EQ(prompts[2].scenario, "My Own");
  EXPECT_EQ(ToUserInput(prompts[1]).image_refs,
            std::vector<std::string>{"i.png"});
  EXPECT_EQ(ParseBenchLine(BenchPromptToJson(prompts[2]).dump(), 1),
            prompts[2]);
}

TEST(BenchmarkTest, Errors) {
  try {
    ParseBenchLine(R"({"id":"a","scenario":"s","modality":"sd","text_prompt":"t"})", 7);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_EQ(std::string(e.what()), "line 7: modality sd requires image_ref");
  }
  EXPECT_EQ(CodeOf([] {
              ParseBenchLine(R"({"id":"a","scenario":"s","modality":"video","text_prompt":"t"})", 1);
            }),
            ErrorCode::kParse);
  EXPECT_EQ(CodeOf([] { ParseBenchLine("{", 1); }), ErrorCode::kParse);
  EXPECT_EQ(CodeOf([] { LoadBenchmark("/nonexistent/bench.jsonl"); }),
            ErrorCode::kIo);
}

TEST(KeywordJudgeTest, Basics) {
  KeywordJudge judge({"Step 1: acquire", ""});
  EXPECT_TRUE(judge.IsHarmful("ok so STEP 1: ACQUIRE the thing"));
  EXPECT_FALSE(judge.IsHarmful(""));
  EXPECT_FALSE(judge.IsHarmful("step 1 acquire"));
  EXPECT_EQ(judge.phrases(), std::vector<std::string>{"step 1: acquire"});
  std::istringstream in("alpha\r\n\n  \nBeta Gamma\n");
  EXPECT_EQ(KeywordJudge::ReadPhrases(in),
            (std::vector<std::string>{"alpha", "Beta Gamma"}));
}

// Naive scan oracle: every start position, byte-wise case fold.
bool NaiveContains(const std::string& hay, const std::string& needle) {
  auto fold = [](char c) {
    return (c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c;
  };
  if (needle.size() > hay.size()) return false;
  for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i) {
    bool match = true;
    for (std::size_t k = 0; k < needle.size() && match; ++k) {
      match = fold(hay[i + k]) == fold(needle[k]);
    }
    if (match) return true;
  }
  return false;
}

TEST(KeywordJudgeTest, AgreesWithNaiveScan) {
  const std::vector<std::string> phrases = {"ab", "Cab", "zz top", "q"};
  KeywordJudge judge(phrases);
  std::mt19937_64 rng(42);
  const std::string alphabet = "abcABCzZ qQtop";
  int flagged = 0;
  for (int i = 0; i < 1000; ++i) {
    std::string r(rng() % 24, ' ');
    for (char& c : r) c = alphabet[rng() % alphabet.size()];
    bool expected = false;
    for (const auto& p : phrases) expected = expected || NaiveContains(r, p);
    ASSERT_EQ(judge.IsHarmful(r), expected) << r;
    flagged += expected;
  }
  EXPECT_GT(flagged, 100);
  EXPECT_LT(flagged, 900);
}

TEST(AsrTest, TwoOfFourIsFifty) {
  std::vector<EvalRecord> records = {
      Record("Fraud", Modality::kOcr, false, true),
      Record("Fraud", Modality::kOcr, false, false),
      Record("Fraud", Modality::kOcr, false, true),
      Record("Fraud", Modality::kOcr, false, false),
  };
  const AsrTable t = ComputeAsr(records);
  ASSERT_EQ(t.scenarios, std::vector<std::string>{"Fraud"});
  EXPECT_EQ(t.Value(0, Modality::kOcr, false), 50.0);
  EXPECT_FALSE(t.Value(0, Modality::kOcr, true).has_value());
  EXPECT_FALSE(t.Value(0, Modality::kSd, false).has_value());
  EXPECT_NE(RenderAsrCsv(t).find("Fraud,,,,,50.00,,,"), std::string::npos);
}

TEST(AsrTest, UnjudgedAreExcludedAndCounted) {
  std::vector<EvalRecord> records = {
      Record("Fraud", Modality::kSd, true, true),
      Record("Fraud", Modality::kSd, true, std::nullopt),
      Record("Fraud", Modality::kSd, true, std::nullopt),
  };
  const AsrTable t = ComputeAsr(records);
  EXPECT_EQ(t.unjudged, 2);
  EXPECT_EQ(t.Value(0, Modality::kSd, true), 100.0);
  EXPECT_NE(RenderAsrText(t).find("unjudged records excluded: 2\n"),
            std::string::npos);
}

TEST(AsrTest, MatchesCountingOracleOnRandomRecords) {
  std::mt19937_64 rng(9);
  const std::vector<std::string> scenarios = {"Fraud", "Zeta", "Hate Speech",
                                              "Alpha"};
  std::vector<EvalRecord> records;
  std::map<std::tuple<std::string, int, bool>, std::pair<int, int>> oracle;
  for (int i = 0; i < 3000; ++i) {
    const auto& s = scenarios[rng() % scenarios.size()];
    const auto m = static_cast<Modality>(rng() % 4);
    const bool g = rng() % 2;
    const bool h = rng() % 3 == 0;
    records.push_back(Record(s, m, g, h));
    auto& c = oracle[{s, static_cast<int>(m), g}];
    c.first += h;
    c.second += 1;
  }
  const AsrTable t = ComputeAsr(records);
  ASSERT_EQ(t.scenarios.size(), 4u);
  // Canonical first in report order, then free-form by first appearance.
  EXPECT_EQ(t.scenarios[0], "Hate Speech");
  EXPECT_EQ(t.scenarios[1], "Fraud");
  const auto zeta = std::find_if(records.begin(), records.end(), [](auto& r) {
    return r.prompt.scenario == "Zeta";
  });
  const auto alpha = std::find_if(records.begin(), records.end(), [](auto& r) {
    return r.prompt.scenario == "Alpha";
  });
  EXPECT_EQ(t.scenarios[2], zeta < alpha ? "Zeta" : "Alpha");
  for (std::size_t s = 0; s < t.scenarios.size(); ++s) {
    for (Modality m : kModalities) {
      for (bool g : {false, true}) {
        const auto& [h, n] = oracle[{t.scenarios[s], static_cast<int>(m), g}];
        ASSERT_EQ(t.Value(s, m, g), 100.0 * h / n);
      }
    }
  }
  // Cell values do not depend on record order.
  std::shuffle(records.begin(), records.end(), rng);
  const AsrTable shuffled = ComputeAsr(records);
  for (std::size_t s = 0; s < t.scenarios.size(); ++s) {
    const auto at = std::find(shuffled.scenarios.begin(),
                              shuffled.scenarios.end(), t.scenarios[s]) -
                    shuffled.scenarios.begin();
    EXPECT_EQ(shuffled.values[static_cast<std::size_t>(at)], t.values[s]);
  }
}

TEST(AsrTest, AverageIsUnweightedScenarioMean) {
  std::vector<EvalRecord> records = {
      Record("Fraud", Modality::kTextOnly, false, true),
      Record("Hate Speech", Modality::kTextOnly, false, false),
      Record("Hate Speech", Modality::kTextOnly, false, false),
      Record("Hate Speech", Modality::kTextOnly, false, false),
  };
  EXPECT_EQ(ComputeAsr(records).Average(Modality::kTextOnly, false), 50.0);
}

// Static fixtures built from published reference magnitudes; these are
// rendering inputs, not measurements from this code.
nlohmann::json ReferenceValues() {
  return nlohmann::json::parse(ReadFile(kFixtures / "render" / "reference_values.json"));
}

TEST(RenderTest, AsrLayoutMatchesGolden) {
  const auto ref = ReferenceValues();
  AsrTable t;
  t.scenarios = ref["scenarios"].get<std::vector<std::string>>();
  for (const auto& row : ref["asr"]) {
    AsrTable::Row r;
    for (std::size_t m = 0; m < kModalityCount; ++m) {
      r[m][0] = row[2 * m].get<double>();
      r[m][1] = row[2 * m + 1].get<double>();
    }
    t.values.push_back(r);
  }
  EXPECT_EQ(RenderAsrCsv(t), ReadFile(kFixtures / "render" / "asr_reference.csv"));
  EXPECT_EQ(RenderAsrText(t), ReadFile(kFixtures / "render" / "asr_reference.txt"));
  EXPECT_EQ(fmt::format("{:.2f}", *t.Average(Modality::kOcr, false)), "71.52");
  EXPECT_EQ(fmt::format("{:.2f}", *t.Average(Modality::kOcr, true)), "19.92");
}

TEST(RenderTest, PplLayoutMatchesGolden) {
  const auto ref = ReferenceValues();
  PplTable t;
  t.scenarios = ref["scenarios"].get<std::vector<std::string>>();
  for (const auto& row : ref["ppl"]) {
    PplTable::Row r;
    r[0][0] = row[0].get<double>();
    r[0][1] = row[1].get<double>();
    r[3][0] = row[2].get<double>();
    r[3][1] = row[3].get<double>();
    t.values.push_back(r);
  }
  EXPECT_EQ(RenderPplCsv(t), ReadFile(kFixtures / "render" / "ppl_reference.csv"));
  EXPECT_EQ(RenderPplText(t), ReadFile(kFixtures / "render" / "ppl_reference.txt"));
  EXPECT_EQ(fmt::format("{:.2f}", *t.Average(Modality::kTextOnly, false)), "1.96");
  EXPECT_EQ(fmt::format("{:.2f}", *t.Average(Modality::kTextOnly, true)), "1.24");
  EXPECT_FALSE(t.HasModality(Modality::kSd));
}

TEST(RenderTest, LongScenarioNamesWidenTheColumn) {
  const std::string name(30, 'n');
  const AsrTable t = ComputeAsr(std::vector<EvalRecord>{
      Record(name, Modality::kSd, false, true)});
  const std::string text = RenderAsrText(t);
  EXPECT_NE(text.find(name + "|         -         - |    100.00         - |"), std::string::npos) << text;
  EXPECT_NE(text.find("Average" + std::string(23, ' ') + "|"), std::string::npos);
}

// Emits a constant log-probability per byte of the response.
class ConstantLogprobBackend : public Backend {
 public:
  explicit ConstantLogprobBackend(double lp) : lp_(lp) {}
  std::string_view kind() const override { return "constant"; }
  BackendReply Generate(const UpstreamRequest&) override { return {"", {}}; }
  std::vector<double> ContinuationLogprobs(const UpstreamRequest& request,
                                           std::string_view response) override {
    seen.push_back(request.serialized_input);
    return std::vector<double>(response.size(), lp_);
  }
  std::vector<std::string> seen;

 private:
  double lp_;
};

std::vector<PplItem> PplItems() {
  std::vector<PplItem> items;
  for (Modality m : {Modality::kTextOnly, Modality::kSdOcr}) {
    for (const char* s : {"Fraud", "Hate Speech"}) {
      items.push_back({Prompt("i", s, m), "step 1: acquire it", "no"});
    }
  }
  return items;
}

TEST(PplTest, ConstantMinusOneGivesE) {
  ConstantLogprobBackend backend(-1.0);
  const auto items = PplItems();
  const PplTable t = PplCompare(backend, items);
  ASSERT_EQ(t.scenarios.size(), 2u);
  for (std::size_t s = 0; s < 2; ++s) {
    for (std::size_t m : {0u, 3u}) {
      for (std::size_t k : {0u, 1u}) {
        EXPECT_NEAR(*t.values[s][m][k], std::exp(1.0), 1e-9);
      }
    }
    EXPECT_FALSE(t.values[s][1][0].has_value());
  }
  EXPECT_EQ(backend.seen[4], "USER: <image:img.png>q\n");
  EXPECT_EQ(RenderPplCsv(t).substr(0, RenderPplCsv(t).find('\n')),
            "scenario,text_only_harmful,text_only_harmless,sd_ocr_harmful,"
            "sd_ocr_harmless");
}

TEST(PplTest, UniformGives263) {
  ConstantLogprobBackend backend(std::log(1.0 / 263.0));
  const auto items = PplItems();
  const PplTable t = PplCompare(backend, items);
  EXPECT_NEAR(*t.Average(Modality::kTextOnly, false), 263.0, 1e-6);
  EXPECT_NEAR(*t.Average(Modality::kSdOcr, true), 263.0, 1e-6);
}

TEST(PplTest, BackendWithoutLogprobsIsCapabilityError) {
  ScriptedBackend backend(std::map<std::string, std::string>{});
  const auto items = PplItems();
  EXPECT_EQ(CodeOf([&] { PplCompare(backend, items); }), ErrorCode::kCapability);
}

TEST(PplTest, ReadsItems) {
  std::istringstream in(
      R"({"id":"a","scenario":"fraud","modality":"text_only","text_prompt":"t","harmful":"h","harmless":"ok"})"
      "\n");
  const auto items = ReadPplItems(in);
  ASSERT_EQ(items.size(), 1u);
  EXPECT_EQ(items[0].prompt.scenario, "Fraud");
  EXPECT_EQ(items[0].harmless, "ok");
  std::istringstream bad(
      R"({"id":"a","scenario":"fraud","modality":"text_only","text_prompt":"t"})");
  EXPECT_EQ(CodeOf([&] { ReadPplItems(bad); }), ErrorCode::kParse);
}

class ConstantScorer : public ResponseScorer {
 public:
  explicit ConstantScorer(double s) : s_(s) {}
  double Score(std::string_view) const override { return s_; }

 private:
  double s_;
};

TEST(HistogramTest, Bins) {
  EXPECT_EQ(HistogramBin(0.0, 10), 0);
  EXPECT_EQ(HistogramBin(0.5, 10), 5);
  EXPECT_EQ(HistogramBin(0.0999, 10), 0);
  EXPECT_EQ(HistogramBin(1.0, 10), 9);
  EXPECT_EQ(HistogramBin(-0.1, 4), 0);
}

TEST(HistogramTest, AllHalfLandsInBinFive) {
  std::vector<LabeledResponse> set = {{"q", "a", 0}, {"q", "b", 1}, {"q", "c", 1}};
  const auto h = BuildHistogram(ConstantScorer(0.5), set, 10);
  EXPECT_EQ(h.h0[5], 1);
  EXPECT_EQ(h.h1[5], 2);
  EXPECT_EQ(std::accumulate(h.h0.begin(), h.h0.end(), 0), 1);
  EXPECT_EQ(std::accumulate(h.h1.begin(), h.h1.end(), 0), 2);
  const std::string csv = RenderHistogramCsv(h);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "bin_low,bin_high,count_h0,count_h1");
  EXPECT_NE(csv.find("\n0.5,0.6,1,2\n"), std::string::npos);
  EXPECT_NE(csv.find("\n0.9,1,0,0\n"), std::string::npos);
  EXPECT_EQ(CodeOf([&] { BuildHistogram(ConstantScorer(0.5), set, 1); }),
            ErrorCode::kInvalidArgument);
}

TEST(RunBenchmarkTest, FixtureArmsAndDeterminism) {
  const BenchmarkFixture fixture = MakeBenchmarkFixture(11);
  ASSERT_EQ(fixture.prompts.size(), 52u);
  ScriptedBackend backend(fixture.responses);
  KeywordJudge judge(SyntheticHarmMarkers());

  const auto unguarded = RunBenchmark(fixture.prompts, backend, judge);
  ASSERT_EQ(unguarded.size(), 52u);
  EXPECT_EQ(RunBenchmark(fixture.prompts, backend, judge), unguarded);

  auto shared = std::make_shared<ScriptedBackend>(fixture.responses);
  const Protector protector(shared,
                            std::make_shared<KeywordScorer>(judge),
                            std::make_shared<FixedRefusalRewriter>());
  const auto guarded = RunBenchmark(fixture.prompts, protector, judge);
  ASSERT_EQ(guarded.size(), 52u);

  std::vector<EvalRecord> all = unguarded;
  all.insert(all.end(), guarded.begin(), guarded.end());
  const AsrTable t = ComputeAsr(all);
  ASSERT_EQ(t.scenarios.size(), 13u);
  for (std::size_t s = 0; s < 13; ++s) {
    EXPECT_EQ(t.scenarios[s], kScenarios[s]);
    for (Modality m : kModalities) {
      EXPECT_EQ(t.Value(s, m, false), 100.0);
      EXPECT_EQ(t.Value(s, m, true), 0.0);
    }
  }
  for (const auto& r : guarded) {
    ASSERT_TRUE(r.verdict.has_value());
    EXPECT_EQ(r.verdict->source, VerdictSource::kFixedRefusal);
    EXPECT_EQ(EvalRecordToJson(r)["verdict"]["source"], "fixed-refusal");
  }
}

TEST(RunBenchmarkTest, FailuresAreRecordedAndRunContinues) {
  std::vector<BenchPrompt> prompts = {Prompt("a", "Fraud", Modality::kTextOnly),
                                      Prompt("b", "Fraud", Modality::kTextOnly)};
  prompts[1].text_prompt = "known";
  ScriptedBackend backend(std::map<std::string, std::string>{{"known", "fine"}});
  const auto records = RunBenchmark(prompts, backend, KeywordJudge({"x"}));
  ASSERT_EQ(records.size(), 2u);
  EXPECT_FALSE(records[0].judged_harmful.has_value());
  EXPECT_NE(records[0].error.find("backend"), std::string::npos);
  EXPECT_EQ(records[1].judged_harmful, false);
  EXPECT_TRUE(records[1].error.empty());
  EXPECT_EQ(ComputeAsr(records).unjudged, 1);
}

class ExternalJudgeTest : public ::testing::Test {
 protected:
  void SetUp() override {
    server_.Post("/judge", [](const httplib::Request& req, httplib::Response& res) {
      const auto body = nlohmann::json::parse(req.body);
      const std::string r = body["response"];
      std::string answer = r.find("bad") != std::string::npos ? "Yes." : " no";
      if (r == "weird") answer = "maybe";
      res.set_content(nlohmann::json{{"answer", answer}}.dump(), "application/json");
    });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  void TearDown() override {
    server_.stop();
    thread_.join();
  }
  ExternalJudgeConfig Config() {
    return ExternalJudgeConfigFromJson(
        {{"base_url", "http://127.0.0.1:" + std::to_string(port_)},
         {"timeout_seconds", 5}});
  }
  httplib::Server server_;
  std::thread thread_;
  int port_ = 0;
};

TEST_F(ExternalJudgeTest, ParsesYesNo) {
  ExternalJudge judge(Config());
  EXPECT_TRUE(judge.IsHarmful("very bad"));
  EXPECT_FALSE(judge.IsHarmful("fine"));
  EXPECT_EQ(CodeOf([&] { judge.IsHarmful("weird"); }), ErrorCode::kJudge);
  auto c = Config();
  c.path = "/missing";
  EXPECT_EQ(CodeOf([&] { ExternalJudge(c).IsHarmful("x"); }), ErrorCode::kJudge);
  EXPECT_EQ(CodeOf([] { ExternalJudgeConfigFromJson({{"path", "/j"}}); }),
            ErrorCode::kConfig);
}

}  // namespace
}  // namespace protector
