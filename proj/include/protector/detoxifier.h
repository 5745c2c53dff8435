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

#ifndef PROTECTOR_DETOXIFIER_H_
#define PROTECTOR_DETOXIFIER_H_

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protector/text.h"
#include "protector/tiny_lm.h"

namespace protector {

inline constexpr char kFixedRefusal[] = "Sorry, I can not answer this question";
inline constexpr int kDetoxTemplateVersion = 1;
inline constexpr int kDefaultMaxNew = 256;
// Positions kept free for the answer when a prompt is truncated.
inline constexpr int kAnswerReserve = 8;

// Conditioning for a rewrite: the textual query and the response to fix.
// Images never reach the detoxifier; each one becomes an IMAGE token.
struct DetoxPrompt {
  std::string question;
  std::string rejected;
  int image_count = 0;
};

struct FormattedPrompt {
  TokenIds ids;
  bool truncated = false;
};

// Template v1:
//   BOS SEP_QUERY <IMAGE>* question SEP_REJECTED rejected SEP_ANSWER
// When longer than ctx_len - kAnswerReserve, the rejected answer's tail is
// dropped first, then the question's tail. Separators always survive.
FormattedPrompt FormatDetoxPrompt(const DetoxPrompt& prompt, int ctx_len);

struct DetoxResult {
  std::string text;
  bool fallback = false;

  bool operator==(const DetoxResult&) const = default;
};

class ResponseRewriter {
 public:
  virtual ~ResponseRewriter() = default;
  virtual DetoxResult Detoxify(const DetoxPrompt& prompt) const = 0;
};

// Always answers with kFixedRefusal.
class FixedRefusalRewriter : public ResponseRewriter {
 public:
  DetoxResult Detoxify(const DetoxPrompt& prompt) const override;
};

class Detoxifier : public ResponseRewriter {
 public:
  explicit Detoxifier(const ModelConfig& config, int max_new = kDefaultMaxNew);
  explicit Detoxifier(TinyLm backbone, int max_new = kDefaultMaxNew);

  // Greedy rewrite. Falls back to kFixedRefusal when the generation holds
  // no byte tokens, so the result is never empty.
  DetoxResult Detoxify(const DetoxPrompt& prompt) const override;
  DetoxResult Detoxify(const DetoxPrompt& prompt, int max_new) const;

  int max_new() const { return max_new_; }
  int template_version() const { return kDetoxTemplateVersion; }
  const TinyLm& backbone() const { return backbone_; }
  TinyLm& mutable_backbone() { return backbone_; }

 private:
  TinyLm backbone_;
  int max_new_;
};

// Teacher-forced example: input/target over prompt + accepted + EOS, with the
// mask covering exactly the accepted tokens and EOS. Throws kDegenerateMask
// for an empty accepted answer.
LmExample MakeDetoxExample(const TrainingTriple& triple, int ctx_len);

double DetoxLoss(const TinyLm& model, const TrainingTriple& triple);

struct DetoxTrainConfig {
  ModelConfig model;
  int epochs = 100;
  int batch_size = 8;
  double lr = 3e-3;
  // Linear decay from lr to lr * final_lr_scale over all steps; 1 keeps the
  // rate constant.
  double final_lr_scale = 1.0;
  double clip_norm = 1.0;
  std::uint64_t shuffle_seed = 1234;
  int max_new = kDefaultMaxNew;
};

struct DetoxEpoch {
  int epoch = 0;
  double mean_loss = 0.0;
  std::vector<std::size_t> order;  // triple indices in visit order
};

struct DetoxReport {
  std::vector<DetoxEpoch> epochs;

  double initial_loss() const { return epochs.front().mean_loss; }
  double final_loss() const { return epochs.back().mean_loss; }
};

nlohmann::json DetoxReportToJson(const DetoxReport& report);

struct TrainedDetoxifier {
  Detoxifier detoxifier;
  DetoxReport report;
};

// Throws kDivergence naming the epoch on a non-finite loss.
TrainedDetoxifier TrainDetoxifier(std::span<const TrainingTriple> triples,
                                  const DetoxTrainConfig& config);

void SaveDetoxifier(const Detoxifier& detoxifier,
                    const std::filesystem::path& path);
Detoxifier LoadDetoxifier(const std::filesystem::path& path);

}  // namespace protector

#endif  // PROTECTOR_DETOXIFIER_H_
