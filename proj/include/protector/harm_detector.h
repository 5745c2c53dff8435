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

#ifndef PROTECTOR_HARM_DETECTOR_H_
#define PROTECTOR_HARM_DETECTOR_H_

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protector/text.h"
#include "protector/tiny_lm.h"

namespace protector {

// Anything that maps a response to a harmlessness probability in [0, 1].
// Implementations must be safe to call concurrently.
class ResponseScorer {
 public:
  virtual ~ResponseScorer() = default;
  virtual double Score(std::string_view response) const = 0;
};

enum class VerdictSource { kOriginal, kDetoxified, kFixedRefusal };

std::string_view VerdictSourceName(VerdictSource source);
VerdictSource ParseVerdictSource(std::string_view name);

struct SafetyVerdict {
  double score = 1.0;
  double threshold = 0.5;
  bool is_harmful = false;
  VerdictSource source = VerdictSource::kOriginal;

  bool operator==(const SafetyVerdict&) const = default;
};

inline constexpr double kDefaultThreshold = 0.5;

// Accepts [0, 1). Zero is the pass-through setting: nothing is flagged.
void ValidateThreshold(double threshold);

// is_harmful <=> score < threshold; a score equal to the threshold is
// harmless.
SafetyVerdict Classify(double score, double threshold);

// Mean binary cross-entropy over logits, computed as softplus terms so it
// stays finite for saturated logits.
double BceLossFromLogits(std::span<const double> logits,
                         std::span<const int> labels);
// Same loss from probabilities; scores are mapped back to logits first.
double BceLoss(std::span<const double> scores, std::span<const int> labels);

double Sigmoid(double x);

// LM backbone with a scalar head on the last position's hidden state.
class HarmDetector : public ResponseScorer {
 public:
  explicit HarmDetector(const ModelConfig& config);
  HarmDetector(TinyLm backbone, Tensor head_weight, Tensor head_bias);

  // Tokens fed to the backbone: the final ctx_len bytes of the response.
  TokenIds PrepareInput(std::string_view response) const;

  // Empty responses carry no content and score exactly 1.0.
  double Score(std::string_view response) const override;
  double Logit(std::string_view response) const;

  // BCE for one record; adds scale * gradient into grads (backbone tensors
  // first, then head weight and head bias).
  double LossAndGrad(std::string_view response, int label, double scale,
                     Gradients& grads) const;

  Gradients ZeroGradients() const;
  std::vector<Tensor*> TrainableParams();

  const TinyLm& backbone() const { return backbone_; }
  TinyLm& mutable_backbone() { return backbone_; }
  const Tensor& head_weight() const { return head_weight_; }
  const Tensor& head_bias() const { return head_bias_; }
  Tensor& mutable_head_weight() { return head_weight_; }
  Tensor& mutable_head_bias() { return head_bias_; }

 private:
  TinyLm backbone_;
  Tensor head_weight_;  // [d_model]
  Tensor head_bias_;    // [1]
};

// Accuracies in percent, per label and their unweighted mean.
struct AccuracyBreakdown {
  double h0 = 0.0;
  double h1 = 0.0;
  double avg = 0.0;
};

// h0 = share of harmful records flagged, h1 = share of harmless records
// passed. Throws kDegenerateDataset unless both labels are present.
AccuracyBreakdown DetectorAccuracy(const ResponseScorer& scorer,
                                   std::span<const LabeledResponse> records,
                                   double threshold);

struct DetectorTrainConfig {
  ModelConfig model;
  int epochs = 3;
  int batch_size = 16;
  double lr = 3e-3;
  double clip_norm = 1.0;
  double holdout_fraction = 0.2;
  std::uint64_t shuffle_seed = 1234;
};

struct DetectorEpoch {
  int epoch = 0;
  double mean_loss = 0.0;
  std::size_t records_seen = 0;
  std::size_t h0_seen = 0;
  std::size_t h1_seen = 0;
  std::optional<AccuracyBreakdown> heldout;
};

struct DetectorReport {
  std::size_t train_triples = 0;
  std::size_t heldout_triples = 0;
  std::size_t skipped_empty = 0;
  std::vector<DetectorEpoch> epochs;

  double initial_loss() const { return epochs.front().mean_loss; }
  double final_loss() const { return epochs.back().mean_loss; }
};

nlohmann::json DetectorReportToJson(const DetectorReport& report);

struct TrainedDetector {
  HarmDetector detector;
  DetectorReport report;
  std::vector<LabeledResponse> heldout;
};

// Splits triples into train/held-out by triple, expands each side into
// labeled responses and minimises mean BCE with Adam.
TrainedDetector TrainDetector(std::span<const TrainingTriple> triples,
                              const DetectorTrainConfig& config,
                              double threshold = kDefaultThreshold);

struct LoadedDetector {
  HarmDetector detector;
  double threshold = kDefaultThreshold;
};

void SaveHarmDetector(const HarmDetector& detector, double threshold,
                      const std::filesystem::path& path);
LoadedDetector LoadHarmDetector(const std::filesystem::path& path);

}  // namespace protector

#endif  // PROTECTOR_HARM_DETECTOR_H_
