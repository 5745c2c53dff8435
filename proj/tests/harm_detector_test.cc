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

#include "protector/harm_detector.h"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "protector/error.h"
#include "protector/eval.h"
#include "protector/synthetic.h"
#include "support/gradcheck.h"

namespace protector {
namespace {

ModelConfig Small(int d = 16, int ctx = 32) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ctx_len = ctx;
  c.seed = 7;
  return c;
}

class ConstantScorer : public ResponseScorer {
 public:
  explicit ConstantScorer(double s) : s_(s) {}
  double Score(std::string_view) const override { return s_; }

 private:
  double s_;
};

// Deterministic pseudo-score from the response bytes.
class HashScorer : public ResponseScorer {
 public:
  double Score(std::string_view r) const override {
    return static_cast<double>(std::hash<std::string_view>{}(r) % 1000) /
           1000.0;
  }
};

TEST(BceTest, ClosedForms) {
  const double half = 0.5;
  const int one = 1;
  EXPECT_NEAR(BceLoss(std::span<const double>(&half, 1),
                      std::span<const int>(&one, 1)),
              std::log(2.0), 1e-12);
  const double logit = std::log(3.0);
  EXPECT_NEAR(BceLossFromLogits(std::span<const double>(&logit, 1),
                                std::span<const int>(&one, 1)),
              -std::log(0.75), 1e-12);
  const std::vector<double> scores = {0.9, 0.1};
  const std::vector<int> labels = {1, 0};
  EXPECT_NEAR(BceLoss(scores, labels), -std::log(0.9), 1e-12);
}

TEST(BceTest, SaturatedLogitsStayFinite) {
  const std::vector<double> logits = {800.0, -800.0};
  const std::vector<int> wrong = {0, 1};
  const double loss = BceLossFromLogits(logits, wrong);
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 800.0, 1e-9);
}

TEST(ClassifyTest, BoundaryIsHarmless) {
  EXPECT_TRUE(Classify(0.49, 0.5).is_harmful);
  EXPECT_FALSE(Classify(0.5, 0.5).is_harmful);
  EXPECT_EQ(Classify(0.7, 0.5).source, VerdictSource::kOriginal);
  EXPECT_EQ(Classify(0.7, 0.5).threshold, 0.5);
}

TEST(ClassifyTest, RaisingThresholdNeverClearsAVerdict) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 2000; ++i) {
    const double s = u(rng);
    double a = u(rng) * 0.999;
    double b = u(rng) * 0.999;
    if (a > b) std::swap(a, b);
    if (Classify(s, a).is_harmful) EXPECT_TRUE(Classify(s, b).is_harmful);
  }
}

TEST(ClassifyTest, ThresholdRange) {
  EXPECT_NO_THROW(ValidateThreshold(0.0));
  EXPECT_NO_THROW(ValidateThreshold(0.999));
  for (double bad : {1.0, -0.1, 1.5, double(NAN)}) {
    try {
      ValidateThreshold(bad);
      FAIL() << bad;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig);
    }
  }
  EXPECT_FALSE(Classify(0.0001, 0.0).is_harmful);
}

TEST(VerdictSourceTest, Names) {
  for (auto s : {VerdictSource::kOriginal, VerdictSource::kDetoxified,
                 VerdictSource::kFixedRefusal}) {
    EXPECT_EQ(ParseVerdictSource(VerdictSourceName(s)), s);
  }
  EXPECT_EQ(VerdictSourceName(VerdictSource::kFixedRefusal), "fixed-refusal");
  EXPECT_THROW(ParseVerdictSource("maybe"), Error);
}

TEST(HarmDetectorTest, ScoreRangeAndEmpty) {
  const HarmDetector detector(Small());
  for (const char* r : {"a", "hello there", "step 1: acquire the thing"}) {
    const double s = detector.Score(r);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  EXPECT_EQ(detector.Score(""), 1.0);
}

TEST(HarmDetectorTest, LongResponsesKeepTheirTail) {
  const HarmDetector detector(Small(16, 8));
  const std::string tail = "87654321";
  EXPECT_EQ(detector.PrepareInput("0123456789" + tail), Encode(tail));
  EXPECT_EQ(detector.Score("0123456789" + tail), detector.Score(tail));
}

TEST(HarmDetectorTest, BceGradientsMatchCentralDifferences) {
  HarmDetector detector(Small(16, 16));
  testing::Randomize(detector.TrainableParams(), 21, 0.3);
  for (int label : {0, 1}) {
    const auto report = testing::CheckBceGradients(
        detector, "disable the alarm", label, 8, 5 + label);
    EXPECT_GE(report.checked, 200u);
    EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
    // 2 embeddings, 15 per block (key bias aside), final norm, scalar head.
    EXPECT_EQ(report.kinds.size(), 2u + 15u + 2u + 2u);
    EXPECT_LT(report.max_zero_grad, 1e-12);
  }
}

TEST(DetectorAccuracyTest, OracleAndConstant) {
  const auto records = ExpandTriples(GenerateSyntheticTriples(40, 3));
  const KeywordScorer oracle{KeywordJudge(SyntheticHarmMarkers())};
  const AccuracyBreakdown o = DetectorAccuracy(oracle, records, 0.5);
  EXPECT_EQ(o.h0, 100.0);
  EXPECT_EQ(o.h1, 100.0);
  EXPECT_EQ(o.avg, 100.0);

  const AccuracyBreakdown c = DetectorAccuracy(ConstantScorer(1.0), records, 0.5);
  EXPECT_EQ(c.h0, 0.0);
  EXPECT_EQ(c.h1, 100.0);
  EXPECT_EQ(c.avg, 50.0);
}

TEST(DetectorAccuracyTest, ZeroThresholdPassesEverything) {
  const auto records = ExpandTriples(GenerateSyntheticTriples(30, 4));
  const AccuracyBreakdown a =
      DetectorAccuracy(ConstantScorer(1e-9), records, 0.0);
  EXPECT_EQ(a.h0, 0.0);
  EXPECT_EQ(a.h1, 100.0);
}

TEST(DetectorAccuracyTest, MatchesConfusionCount) {
  const auto records = ExpandTriples(GenerateSyntheticTriples(300, 5));
  const HashScorer scorer;
  for (double tau : {0.1, 0.5, 0.77}) {
    int tp = 0, n0 = 0, tn = 0, n1 = 0;
    for (const auto& r : records) {
      const bool flagged = scorer.Score(r.answer) < tau;
      if (r.label == 0) {
        ++n0;
        tp += flagged;
      } else {
        ++n1;
        tn += !flagged;
      }
    }
    const AccuracyBreakdown a = DetectorAccuracy(scorer, records, tau);
    EXPECT_EQ(a.h0, 100.0 * tp / n0);
    EXPECT_EQ(a.h1, 100.0 * tn / n1);
    EXPECT_EQ(a.avg, 0.5 * (100.0 * tp / n0 + 100.0 * tn / n1));
  }
}

TEST(DetectorAccuracyTest, SingleLabelIsDegenerate) {
  std::vector<LabeledResponse> records = {{"q", "a", 1}, {"q", "b", 1}};
  try {
    DetectorAccuracy(ConstantScorer(0.5), records, 0.5);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateDataset);
  }
}

TEST(TrainDetectorTest, TwoTriplesOneEpochSeesFourRecords) {
  const std::vector<TrainingTriple> triples = {
      {"q1", "fine answer", "stolen card answer", {}},
      {"q2", "another fine one", "untraceable one", {}}};
  DetectorTrainConfig config;
  config.model = Small();
  config.epochs = 1;
  config.holdout_fraction = 0.0;
  const TrainedDetector t = TrainDetector(triples, config);
  ASSERT_EQ(t.report.epochs.size(), 1u);
  EXPECT_EQ(t.report.epochs[0].records_seen, 4u);
  EXPECT_EQ(t.report.epochs[0].h0_seen, 2u);
  EXPECT_EQ(t.report.epochs[0].h1_seen, 2u);
}

TEST(TrainDetectorTest, LossDecreasesAndReportHasTableShape) {
  DetectorTrainConfig config;
  config.model = Small(16, 64);
  config.epochs = 2;
  config.lr = 3e-3;
  const TrainedDetector t =
      TrainDetector(GenerateSyntheticTriples(150, 9), config);
  EXPECT_LT(t.report.final_loss(), t.report.initial_loss());
  EXPECT_EQ(t.report.train_triples, 120u);
  EXPECT_EQ(t.report.heldout_triples, 30u);
  ASSERT_TRUE(t.report.epochs.back().heldout.has_value());
  const nlohmann::json j = DetectorReportToJson(t.report);
  const auto& held = j["epochs"].back()["heldout"];
  EXPECT_TRUE(held.contains("h0_acc"));
  EXPECT_TRUE(held.contains("h1_acc"));
  EXPECT_TRUE(held.contains("avg_acc"));
}

TEST(TrainDetectorTest, SkipsEmptyAnswers) {
  std::vector<TrainingTriple> triples = GenerateSyntheticTriples(10, 2);
  triples[0].rejected = "";
  DetectorTrainConfig config;
  config.model = Small();
  config.epochs = 1;
  config.holdout_fraction = 0.0;
  const TrainedDetector t = TrainDetector(triples, config);
  EXPECT_EQ(t.report.skipped_empty, 1u);
  EXPECT_EQ(t.report.epochs[0].records_seen, 19u);
}

TEST(TrainDetectorTest, SameSeedSameWeights) {
  DetectorTrainConfig config;
  config.model = Small();
  config.epochs = 1;
  const auto triples = GenerateSyntheticTriples(20, 1);
  const TrainedDetector a = TrainDetector(triples, config);
  const TrainedDetector b = TrainDetector(triples, config);
  EXPECT_EQ(a.detector.Score("probe"), b.detector.Score("probe"));
  EXPECT_EQ(a.report.final_loss(), b.report.final_loss());
}

}  // namespace
}  // namespace protector
