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

#include "protector/detoxifier.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fmt/core.h"
#include "protector/checkpoint.h"
#include "protector/error.h"

namespace protector {

FormattedPrompt FormatDetoxPrompt(const DetoxPrompt& prompt, int ctx_len) {
  const int limit = ctx_len - kAnswerReserve;
  const int fixed = 4 + prompt.image_count;
  if (prompt.image_count < 0 || fixed > limit) {
    throw Error(ErrorCode::kConfig,
                fmt::format("ctx_len {} cannot hold a detox prompt with {} "
                            "image(s)",
                            ctx_len, prompt.image_count));
  }
  TokenIds question = Encode(prompt.question);
  TokenIds rejected = Encode(prompt.rejected);
  const auto budget = static_cast<std::size_t>(limit - fixed);

  FormattedPrompt out;
  if (question.size() + rejected.size() > budget) {
    out.truncated = true;
    if (question.size() >= budget) {
      question.resize(budget);
      rejected.clear();
    } else {
      rejected.resize(budget - question.size());
    }
  }
  TokenIds& ids = out.ids;
  ids.reserve(static_cast<std::size_t>(fixed) + question.size() +
              rejected.size());
  ids.push_back(Vocab::kBos);
  ids.push_back(Vocab::kSepQuery);
  ids.insert(ids.end(), static_cast<std::size_t>(prompt.image_count),
             Vocab::kImage);
  ids.insert(ids.end(), question.begin(), question.end());
  ids.push_back(Vocab::kSepRejected);
  ids.insert(ids.end(), rejected.begin(), rejected.end());
  ids.push_back(Vocab::kSepAnswer);
  return out;
}

DetoxResult FixedRefusalRewriter::Detoxify(const DetoxPrompt&) const {
  return {kFixedRefusal, true};
}

Detoxifier::Detoxifier(const ModelConfig& config, int max_new)
    : Detoxifier(TinyLm(config), max_new) {}

Detoxifier::Detoxifier(TinyLm backbone, int max_new)
    : backbone_(std::move(backbone)), max_new_(max_new) {
  if (max_new_ < 0) {
    throw Error(ErrorCode::kConfig, "max_new must be non-negative");
  }
  // Rejects configs too small for the template.
  FormatDetoxPrompt({}, backbone_.config().ctx_len);
}

DetoxResult Detoxifier::Detoxify(const DetoxPrompt& prompt) const {
  return Detoxify(prompt, max_new_);
}

DetoxResult Detoxifier::Detoxify(const DetoxPrompt& prompt,
                                 int max_new) const {
  const FormattedPrompt formatted =
      FormatDetoxPrompt(prompt, backbone_.config().ctx_len);
  const TokenIds generated =
      GreedyDecode(backbone_, formatted.ids, max_new, Vocab::kEos);
  const bool has_bytes = std::any_of(generated.begin(), generated.end(),
                                     [](TokenId id) { return Vocab::IsByte(id); });
  if (!has_bytes) return {kFixedRefusal, true};
  return {Decode(generated), false};
}

LmExample MakeDetoxExample(const TrainingTriple& triple, int ctx_len) {
  if (triple.accepted.empty()) {
    throw Error(ErrorCode::kDegenerateMask,
                "detox example needs a non-empty accepted answer");
  }
  TokenIds seq = FormatDetoxPrompt({triple.question, triple.rejected, 0},
                                   ctx_len)
                     .ids;
  const std::size_t prompt_len = seq.size();
  const TokenIds answer = Encode(triple.accepted);
  seq.insert(seq.end(), answer.begin(), answer.end());
  seq.push_back(Vocab::kEos);
  const auto max_len = static_cast<std::size_t>(ctx_len) + 1;
  if (seq.size() > max_len) seq.resize(max_len);

  LmExample example;
  example.input.assign(seq.begin(), seq.end() - 1);
  example.target.assign(seq.begin() + 1, seq.end());
  example.mask.resize(example.input.size());
  for (std::size_t t = 0; t < example.mask.size(); ++t) {
    example.mask[t] = t + 1 >= prompt_len ? 1 : 0;
  }
  return example;
}

double DetoxLoss(const TinyLm& model, const TrainingTriple& triple) {
  return LmLoss(model, MakeDetoxExample(triple, model.config().ctx_len));
}

nlohmann::json DetoxReportToJson(const DetoxReport& report) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"mean_loss", e.mean_loss}});
  }
  return {{"epochs", std::move(epochs)}};
}

TrainedDetoxifier TrainDetoxifier(std::span<const TrainingTriple> triples,
                                  const DetoxTrainConfig& config) {
  if (triples.empty()) {
    throw Error(ErrorCode::kDegenerateDataset,
                "detoxifier training needs at least one triple");
  }
  if (config.epochs < 1 || config.batch_size < 1) {
    throw Error(ErrorCode::kConfig, "epochs and batch_size must be positive");
  }
  if (!(config.final_lr_scale >= 0.0 && config.final_lr_scale <= 1.0)) {
    throw Error(ErrorCode::kConfig, "final_lr_scale must lie in [0, 1]");
  }
  TrainedDetoxifier out{Detoxifier(config.model, config.max_new), {}};
  TinyLm& model = out.detoxifier.mutable_backbone();

  std::vector<LmExample> examples;
  examples.reserve(triples.size());
  for (const auto& t : triples) {
    examples.push_back(MakeDetoxExample(t, config.model.ctx_len));
  }

  std::mt19937_64 rng(config.shuffle_seed);
  const std::vector<Tensor*> params = ParamPointers(model.mutable_params());
  AdamState adam;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (order.size() + batch - 1) / batch;
  const double total_steps =
      static_cast<double>(steps_per_epoch) * config.epochs;
  std::size_t step = 0;

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(start + batch, order.size());
      Gradients grads = model.ZeroGradients();
      const double scale = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        batch_loss += LmLossAndGrad(model, examples[order[i]], scale, grads);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::kDivergence,
                    fmt::format("detoxifier loss diverged in epoch {}", epoch));
      }
      loss_sum += batch_loss;
      ClipGradNorm(grads, config.clip_norm);
      const double progress =
          total_steps > 1 ? static_cast<double>(step) / (total_steps - 1) : 0;
      AdamStep(params, grads, adam,
               config.lr * (1.0 - (1.0 - config.final_lr_scale) * progress));
      ++step;
    }
    out.report.epochs.push_back(
        {epoch, loss_sum / static_cast<double>(examples.size()), order});
  }
  return out;
}

void SaveDetoxifier(const Detoxifier& detoxifier,
                    const std::filesystem::path& path) {
  SaveCheckpoint({kKindDetoxifier, detoxifier.backbone().config(),
                  {{"template_version", detoxifier.template_version()},
                   {"max_new", detoxifier.max_new()}},
                  detoxifier.backbone().params()},
                 path);
}

Detoxifier LoadDetoxifier(const std::filesystem::path& path) {
  Checkpoint checkpoint = LoadCheckpoint(path);
  ExpectKind(checkpoint, kKindDetoxifier);
  const int version = checkpoint.extra.value("template_version", -1);
  if (version != kDetoxTemplateVersion) {
    throw Error(ErrorCode::kVersion,
                fmt::format("{}: detox template_version {} unsupported "
                            "(expected {})",
                            path.string(), version, kDetoxTemplateVersion));
  }
  const int max_new = checkpoint.extra.value("max_new", kDefaultMaxNew);
  return Detoxifier(TinyLm(checkpoint.config, std::move(checkpoint.tensors)),
                    max_new);
}

}  // namespace protector
