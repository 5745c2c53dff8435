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

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fmt/core.h"
#include "protector/checkpoint.h"
#include "protector/error.h"

namespace protector {
namespace {

constexpr char kHeadWeight[] = "head.weight";
constexpr char kHeadBias[] = "head.bias";

// log(1 + e^x) without overflow.
double Softplus(double x) {
  return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
}

double RecordLoss(double logit, int label) {
  return label == 1 ? Softplus(-logit) : Softplus(logit);
}

void CheckLabels(std::size_t n, std::span<const int> labels) {
  if (n == 0 || n != labels.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("bce: {} predictions vs {} labels", n,
                            labels.size()));
  }
  for (int h : labels) {
    if (h != 0 && h != 1) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("bce: label {} not in {{0, 1}}", h));
    }
  }
}

}  // namespace

std::string_view VerdictSourceName(VerdictSource source) {
  switch (source) {
    case VerdictSource::kOriginal: return "original";
    case VerdictSource::kDetoxified: return "detoxified";
    case VerdictSource::kFixedRefusal: return "fixed-refusal";
  }
  return "original";
}

VerdictSource ParseVerdictSource(std::string_view name) {
  if (name == "original") return VerdictSource::kOriginal;
  if (name == "detoxified") return VerdictSource::kDetoxified;
  if (name == "fixed-refusal") return VerdictSource::kFixedRefusal;
  throw Error(ErrorCode::kParse,
              fmt::format("unknown verdict source '{}'", name));
}

void ValidateThreshold(double threshold) {
  if (!(threshold >= 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kConfig,
                fmt::format("threshold {} outside [0, 1)", threshold));
  }
}

SafetyVerdict Classify(double score, double threshold) {
  ValidateThreshold(threshold);
  SafetyVerdict verdict;
  verdict.score = score;
  verdict.threshold = threshold;
  verdict.is_harmful = score < threshold;
  return verdict;
}

double Sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double BceLossFromLogits(std::span<const double> logits,
                         std::span<const int> labels) {
  CheckLabels(logits.size(), labels);
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += RecordLoss(logits[i], labels[i]);
  }
  return total / static_cast<double>(logits.size());
}

double BceLoss(std::span<const double> scores, std::span<const int> labels) {
  CheckLabels(scores.size(), labels);
  std::vector<double> logits;
  logits.reserve(scores.size());
  for (double s : scores) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("bce: score {} outside [0, 1]", s));
    }
    logits.push_back(std::log(s) - std::log1p(-s));
  }
  return BceLossFromLogits(logits, labels);
}

HarmDetector::HarmDetector(const ModelConfig& config)
    : backbone_(config),
      head_weight_({static_cast<std::size_t>(config.d_model)}),
      head_bias_({1}) {
  std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (double& w : head_weight_.values()) w = normal(rng);
}

HarmDetector::HarmDetector(TinyLm backbone, Tensor head_weight,
                           Tensor head_bias)
    : backbone_(std::move(backbone)),
      head_weight_(std::move(head_weight)),
      head_bias_(std::move(head_bias)) {
  const auto d = static_cast<std::size_t>(backbone_.config().d_model);
  if (head_weight_.shape() != std::vector<std::size_t>{d} ||
      head_bias_.shape() != std::vector<std::size_t>{1}) {
    throw Error(ErrorCode::kManifest,
                fmt::format("detector head shapes {} / {} do not match "
                            "d_model {}",
                            ShapeString(head_weight_.shape()),
                            ShapeString(head_bias_.shape()), d));
  }
}

TokenIds HarmDetector::PrepareInput(std::string_view response) const {
  TokenIds ids = Encode(response);
  const auto ctx = static_cast<std::size_t>(backbone_.config().ctx_len);
  if (ids.size() > ctx) {
    ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(ctx));
  }
  return ids;
}

double HarmDetector::Logit(std::string_view response) const {
  const TokenIds ids = PrepareInput(response);
  if (ids.empty()) return INFINITY;
  const Tensor hidden = backbone_.Hidden(ids);
  const double* last = hidden.row(ids.size() - 1);
  double z = head_bias_[0];
  for (std::size_t k = 0; k < head_weight_.size(); ++k) {
    z += last[k] * head_weight_[k];
  }
  return z;
}

double HarmDetector::Score(std::string_view response) const {
  if (response.empty()) return 1.0;
  return Sigmoid(Logit(response));
}

double HarmDetector::LossAndGrad(std::string_view response, int label,
                                 double scale, Gradients& grads) const {
  const TokenIds ids = PrepareInput(response);
  if (ids.empty()) {
    throw Error(ErrorCode::kInvalidArgument,
                "cannot train the detector on an empty response");
  }
  ForwardCache cache;
  backbone_.ForwardCached(ids, cache);
  const std::size_t last = ids.size() - 1;
  const double* h = cache.hidden.row(last);
  double z = head_bias_[0];
  for (std::size_t k = 0; k < head_weight_.size(); ++k) {
    z += h[k] * head_weight_[k];
  }
  const double loss = RecordLoss(z, label);
  const double dz = (Sigmoid(z) - static_cast<double>(label)) * scale;

  const std::size_t n = backbone_.params().size();
  Tensor& dw = grads[n];
  Tensor& db = grads[n + 1];
  Tensor d_hidden(cache.hidden.shape());
  double* dh = d_hidden.row(last);
  for (std::size_t k = 0; k < head_weight_.size(); ++k) {
    dw[k] += dz * h[k];
    dh[k] = dz * head_weight_[k];
  }
  db[0] += dz;
  backbone_.Backward(cache, d_hidden, grads);
  return loss;
}

Gradients HarmDetector::ZeroGradients() const {
  Gradients grads = backbone_.ZeroGradients();
  grads.emplace_back(head_weight_.shape());
  grads.emplace_back(head_bias_.shape());
  return grads;
}

std::vector<Tensor*> HarmDetector::TrainableParams() {
  std::vector<Tensor*> params = ParamPointers(backbone_.mutable_params());
  params.push_back(&head_weight_);
  params.push_back(&head_bias_);
  return params;
}

AccuracyBreakdown DetectorAccuracy(const ResponseScorer& scorer,
                                   std::span<const LabeledResponse> records,
                                   double threshold) {
  ValidateThreshold(threshold);
  std::size_t n0 = 0, n1 = 0, correct0 = 0, correct1 = 0;
  for (const auto& r : records) {
    const bool harmful = Classify(scorer.Score(r.answer), threshold).is_harmful;
    if (r.label == 0) {
      ++n0;
      if (harmful) ++correct0;
    } else {
      ++n1;
      if (!harmful) ++correct1;
    }
  }
  if (n0 == 0 || n1 == 0) {
    throw Error(ErrorCode::kDegenerateDataset,
                fmt::format("accuracy needs both labels (h=0: {}, h=1: {})",
                            n0, n1));
  }
  AccuracyBreakdown acc;
  acc.h0 = 100.0 * static_cast<double>(correct0) / static_cast<double>(n0);
  acc.h1 = 100.0 * static_cast<double>(correct1) / static_cast<double>(n1);
  acc.avg = 0.5 * (acc.h0 + acc.h1);
  return acc;
}

nlohmann::json DetectorReportToJson(const DetectorReport& report) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"mean_loss", e.mean_loss},
                        {"records_seen", e.records_seen},
                        {"h0_seen", e.h0_seen},
                        {"h1_seen", e.h1_seen}};
    if (e.heldout) {
      j["heldout"] = {{"h0_acc", e.heldout->h0},
                      {"h1_acc", e.heldout->h1},
                      {"avg_acc", e.heldout->avg}};
    }
    epochs.push_back(std::move(j));
  }
  return {{"train_triples", report.train_triples},
          {"heldout_triples", report.heldout_triples},
          {"skipped_empty", report.skipped_empty},
          {"epochs", std::move(epochs)}};
}

TrainedDetector TrainDetector(std::span<const TrainingTriple> triples,
                              const DetectorTrainConfig& config,
                              double threshold) {
  ValidateThreshold(threshold);
  if (triples.size() < 2) {
    throw Error(ErrorCode::kDegenerateDataset,
                fmt::format("detector training needs >= 2 triples, got {}",
                            triples.size()));
  }
  if (config.epochs < 1 || config.batch_size < 1) {
    throw Error(ErrorCode::kConfig, "epochs and batch_size must be positive");
  }
  if (!(config.holdout_fraction >= 0.0 && config.holdout_fraction < 1.0)) {
    throw Error(ErrorCode::kConfig, "holdout_fraction must lie in [0, 1)");
  }

  std::mt19937_64 rng(config.shuffle_seed);
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_heldout = static_cast<std::size_t>(
      std::floor(config.holdout_fraction * static_cast<double>(triples.size())));
  std::vector<TrainingTriple> train_set, heldout_set;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < order.size() - n_heldout ? train_set : heldout_set)
        .push_back(triples[order[i]]);
  }

  TrainedDetector out{HarmDetector(config.model), {}, {}};
  DetectorReport& report = out.report;
  report.train_triples = train_set.size();
  report.heldout_triples = heldout_set.size();

  std::vector<LabeledResponse> records;
  for (auto& r : ExpandTriples(train_set)) {
    if (r.answer.empty()) {
      ++report.skipped_empty;
      continue;
    }
    records.push_back(std::move(r));
  }
  const bool has0 = std::any_of(records.begin(), records.end(),
                                [](const auto& r) { return r.label == 0; });
  const bool has1 = std::any_of(records.begin(), records.end(),
                                [](const auto& r) { return r.label == 1; });
  if (!has0 || !has1) {
    throw Error(ErrorCode::kDegenerateDataset,
                "training records carry only one label");
  }
  for (auto& r : ExpandTriples(heldout_set)) {
    if (!r.answer.empty()) out.heldout.push_back(std::move(r));
  }
  const bool score_heldout =
      std::any_of(out.heldout.begin(), out.heldout.end(),
                  [](const auto& r) { return r.label == 0; }) &&
      std::any_of(out.heldout.begin(), out.heldout.end(),
                  [](const auto& r) { return r.label == 1; });

  HarmDetector& detector = out.detector;
  const std::vector<Tensor*> params = detector.TrainableParams();
  AdamState adam;
  std::vector<std::size_t> record_order(records.size());
  std::iota(record_order.begin(), record_order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);

  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(record_order.begin(), record_order.end(), rng);
    DetectorEpoch stats;
    stats.epoch = epoch;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < record_order.size(); start += batch) {
      const std::size_t end = std::min(start + batch, record_order.size());
      Gradients grads = detector.ZeroGradients();
      const double scale = 1.0 / static_cast<double>(end - start);
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const LabeledResponse& r = records[record_order[i]];
        batch_loss += detector.LossAndGrad(r.answer, r.label, scale, grads);
        ++stats.records_seen;
        ++(r.label == 0 ? stats.h0_seen : stats.h1_seen);
      }
      if (!std::isfinite(batch_loss)) {
        throw Error(ErrorCode::kDivergence,
                    fmt::format("detector loss diverged in epoch {}", epoch));
      }
      loss_sum += batch_loss;
      ClipGradNorm(grads, config.clip_norm);
      AdamStep(params, grads, adam, config.lr);
    }
    stats.mean_loss = loss_sum / static_cast<double>(records.size());
    if (score_heldout) {
      stats.heldout = DetectorAccuracy(detector, out.heldout, threshold);
    }
    report.epochs.push_back(stats);
  }
  return out;
}

void SaveHarmDetector(const HarmDetector& detector, double threshold,
                      const std::filesystem::path& path) {
  ValidateThreshold(threshold);
  Checkpoint checkpoint;
  checkpoint.kind = kKindHarmDetector;
  checkpoint.config = detector.backbone().config();
  checkpoint.extra = {{"threshold", threshold}};
  checkpoint.tensors = detector.backbone().params();
  checkpoint.tensors.push_back({kHeadWeight, detector.head_weight()});
  checkpoint.tensors.push_back({kHeadBias, detector.head_bias()});
  SaveCheckpoint(checkpoint, path);
}

LoadedDetector LoadHarmDetector(const std::filesystem::path& path) {
  Checkpoint checkpoint = LoadCheckpoint(path);
  ExpectKind(checkpoint, kKindHarmDetector);
  auto& tensors = checkpoint.tensors;
  if (tensors.size() < 2 || tensors[tensors.size() - 2].name != kHeadWeight ||
      tensors.back().name != kHeadBias) {
    throw Error(ErrorCode::kManifest,
                fmt::format("{}: detector checkpoint lacks head.weight / "
                            "head.bias",
                            path.string()));
  }
  Tensor bias = std::move(tensors.back().tensor);
  tensors.pop_back();
  Tensor weight = std::move(tensors.back().tensor);
  tensors.pop_back();
  const double threshold =
      checkpoint.extra.value("threshold", kDefaultThreshold);
  ValidateThreshold(threshold);
  return {HarmDetector(TinyLm(checkpoint.config, std::move(tensors)),
                       std::move(weight), std::move(bias)),
          threshold};
}

}  // namespace protector
