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

#ifndef PROTECTOR_TINY_LM_H_
#define PROTECTOR_TINY_LM_H_

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "protector/tensor.h"
#include "protector/text.h"

namespace protector {

struct ModelConfig {
  int vocab_size = Vocab::kSize;
  int d_model = 32;
  int n_layers = 2;
  int n_heads = 2;
  int ctx_len = 64;
  std::uint64_t seed = 42;

  // Throws kConfig on a violated invariant.
  void Validate() const;
  int head_dim() const { return d_model / n_heads; }

  bool operator==(const ModelConfig&) const = default;
};

nlohmann::json ModelConfigToJson(const ModelConfig& config);
ModelConfig ModelConfigFromJson(const nlohmann::json& j);

// Names and shapes of every parameter tensor, in storage order.
struct ParamSpec {
  std::string name;
  std::vector<std::size_t> shape;
};
std::vector<ParamSpec> ParameterLayout(const ModelConfig& config);

using Gradients = std::vector<Tensor>;

struct LayerCache {
  Tensor x_in;
  Tensor ln1_xhat;
  std::vector<double> ln1_rstd;
  Tensor a;
  Tensor q, k, v;
  Tensor probs;  // [heads, T, T], row i holds weights over keys 0..i
  Tensor ctx;
  Tensor x_mid;
  Tensor ln2_xhat;
  std::vector<double> ln2_rstd;
  Tensor b;
  Tensor hpre, hact;
};

// Activations retained by a training forward pass.
struct ForwardCache {
  TokenIds ids;
  std::vector<LayerCache> layers;
  Tensor lnf_xhat;
  std::vector<double> lnf_rstd;
  Tensor hidden;  // [T, d_model], after the final layer norm
};

// Key/value rows for incremental decoding.
struct DecodeState {
  std::vector<std::vector<double>> keys;
  std::vector<std::vector<double>> values;
  int length = 0;
};

// Decoder-only transformer: learned absolute positions, pre-norm blocks,
// causal multi-head attention, GELU MLP, untied output projection.
class TinyLm {
 public:
  // Seeded init: N(0, 0.02) weights, zero biases, unit norm gains.
  explicit TinyLm(const ModelConfig& config);
  // Adopts existing tensors; throws kManifest if names or shapes disagree
  // with the layout for `config`.
  TinyLm(const ModelConfig& config, std::vector<NamedTensor> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& params() const { return params_; }
  std::vector<NamedTensor>& mutable_params() { return params_; }
  std::size_t ParameterCount() const;
  Gradients ZeroGradients() const;

  // Logits [T, vocab]. Throws kContextOverflow when T > ctx_len.
  Tensor Forward(std::span<const TokenId> ids) const;
  // Final-norm hidden states [T, d_model].
  Tensor Hidden(std::span<const TokenId> ids) const;

  void ForwardCached(std::span<const TokenId> ids, ForwardCache& cache) const;
  // Accumulates parameter gradients given dLoss/dHidden.
  void Backward(const ForwardCache& cache, const Tensor& d_hidden,
                Gradients& grads) const;

  void LogitsRow(const double* hidden_row, double* logits) const;
  std::size_t head_weight_index() const { return params_.size() - 2; }
  std::size_t head_bias_index() const { return params_.size() - 1; }

  // Feeds one token at position state.length; writes its hidden row.
  // Produces bit-identical rows to Hidden() on the same prefix.
  void Step(DecodeState& state, TokenId token, double* hidden_row) const;
  DecodeState StartDecode() const;

 private:
  void CheckIds(std::span<const TokenId> ids) const;
  const Tensor& P(std::size_t i) const { return params_[i].tensor; }

  ModelConfig config_;
  std::vector<NamedTensor> params_;
};

struct LmExample {
  TokenIds input;
  TokenIds target;
  std::vector<std::uint8_t> mask;
};

// Mean NLL over unmasked positions. Throws kDegenerateMask when nothing is
// unmasked.
double LmLoss(const TinyLm& model, std::span<const TokenId> input,
              std::span<const TokenId> target,
              std::span<const std::uint8_t> mask);
double LmLoss(const TinyLm& model, const LmExample& example);

// Returns the loss and adds scale * dLoss/dParams into `grads`.
double LmLossAndGrad(const TinyLm& model, const LmExample& example,
                     double scale, Gradients& grads);

// Gradient of the batch-mean loss. Throws kDegenerateMask on an empty batch
// or an all-masked example, kDivergence on a non-finite loss.
Gradients LmGrads(const TinyLm& model, std::span<const LmExample> batch,
                  double* mean_loss = nullptr);

// Argmax decoding, lowest id on ties. Stops at stop_id (not included),
// after max_new tokens, or when the context window is full.
TokenIds GreedyDecode(const TinyLm& model, std::span<const TokenId> prompt,
                      int max_new, TokenId stop_id = Vocab::kEos);

// log p(ids[t] | ids[<t]) for t >= condition_len.
std::vector<double> SequenceLogprobs(const TinyLm& model,
                                     std::span<const TokenId> ids,
                                     std::size_t condition_len);

// exp(-mean(logprobs)).
double Perplexity(std::span<const double> logprobs);

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  long step = 0;
  std::vector<Tensor> m;
  std::vector<Tensor> v;
};

void AdamStep(std::span<Tensor* const> params, const Gradients& grads,
              AdamState& state, double lr, const AdamOptions& options = {});

// Rescales grads so the global L2 norm is at most max_norm. Returns the norm
// before clipping.
double ClipGradNorm(Gradients& grads, double max_norm);

std::vector<Tensor*> ParamPointers(std::vector<NamedTensor>& params);

}  // namespace protector

#endif  // PROTECTOR_TINY_LM_H_
