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

#include "protector/tiny_lm.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "fmt/core.h"
#include "protector/error.h"

namespace protector {
namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr std::size_t kParamsPerLayer = 16;

// Offsets within a block's parameter group.
enum LayerParam : std::size_t {
  kLn1Gamma = 0,
  kLn1Beta,
  kWq,
  kBq,
  kWk,
  kBk,
  kWv,
  kBv,
  kWo,
  kBo,
  kLn2Gamma,
  kLn2Beta,
  kFc1W,
  kFc1B,
  kFc2W,
  kFc2B,
};

constexpr std::size_t kTokEmb = 0;
constexpr std::size_t kPosEmb = 1;

std::size_t LayerBase(std::size_t layer) {
  return 2 + kParamsPerLayer * layer;
}

// out[n] = b[n] + sum_k x[k] * w[k, n]
void AffineRow(const double* x, const Tensor& w, const Tensor& b,
               double* out) {
  const std::size_t in = w.dim(0);
  const std::size_t n_out = w.dim(1);
  const double* bias = b.data();
  std::copy(bias, bias + n_out, out);
  for (std::size_t k = 0; k < in; ++k) {
    const double xk = x[k];
    const double* wrow = w.row(k);
    for (std::size_t n = 0; n < n_out; ++n) out[n] += xk * wrow[n];
  }
}

void LayerNormRow(const double* x, std::size_t d, const Tensor& gamma,
                  const Tensor& beta, double* xhat, double* rstd,
                  double* out) {
  double mean = 0.0;
  for (std::size_t i = 0; i < d; ++i) mean += x[i];
  mean /= static_cast<double>(d);
  double var = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double c = x[i] - mean;
    var += c * c;
  }
  var /= static_cast<double>(d);
  const double r = 1.0 / std::sqrt(var + kLayerNormEps);
  *rstd = r;
  for (std::size_t i = 0; i < d; ++i) {
    xhat[i] = (x[i] - mean) * r;
    out[i] = xhat[i] * gamma[i] + beta[i];
  }
}

// Accumulates dgamma/dbeta and writes (adds) dx.
void LayerNormBackwardRow(const double* dy, const double* xhat, double rstd,
                          std::size_t d, const Tensor& gamma, Tensor& dgamma,
                          Tensor& dbeta, double* dx) {
  double mean1 = 0.0;
  double mean2 = 0.0;
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < d; ++i) {
    dgamma[i] += dy[i] * xhat[i];
    dbeta[i] += dy[i];
    dxhat[i] = dy[i] * gamma[i];
    mean1 += dxhat[i];
    mean2 += dxhat[i] * xhat[i];
  }
  mean1 /= static_cast<double>(d);
  mean2 /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) {
    dx[i] += rstd * (dxhat[i] - mean1 - xhat[i] * mean2);
  }
}

double Gelu(double x) {
  return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

double GeluGrad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
  const double pdf = std::exp(-0.5 * x * x) * 0.5 * M_2_SQRTPI * M_SQRT1_2;
  return cdf + x * pdf;
}

// Causal attention for one query row over `n_keys` key/value rows (stride d).
// probs for head h land at probs[h * head_stride .. + n_keys).
void AttendRow(const double* q, const double* keys, const double* values,
               std::size_t n_keys, std::size_t d, std::size_t n_heads,
               double* probs, std::size_t head_stride, double* ctx) {
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  std::fill(ctx, ctx + d, 0.0);
  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    double* p = probs + h * head_stride;
    double max_score = -INFINITY;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* kj = keys + j * d + off;
      double s = 0.0;
      for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * kj[c];
      p[j] = s * scale;
      max_score = std::max(max_score, p[j]);
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n_keys; ++j) {
      p[j] = std::exp(p[j] - max_score);
      sum += p[j];
    }
    for (std::size_t j = 0; j < n_keys; ++j) p[j] /= sum;
    for (std::size_t j = 0; j < n_keys; ++j) {
      const double* vj = values + j * d + off;
      const double pj = p[j];
      for (std::size_t c = 0; c < hd; ++c) ctx[off + c] += pj * vj[c];
    }
  }
}

// dx[t, k] += sum_n dy[t, n] * w[k, n]; dw += x^T dy; db += sum_t dy[t].
void AffineBackward(const Tensor& x, const Tensor& dy, const Tensor& w,
                    Tensor* dx, Tensor& dw, Tensor& db) {
  const std::size_t rows = x.dim(0);
  const std::size_t in = w.dim(0);
  const std::size_t out = w.dim(1);
  for (std::size_t t = 0; t < rows; ++t) {
    const double* xr = x.row(t);
    const double* dyr = dy.row(t);
    for (std::size_t n = 0; n < out; ++n) db[n] += dyr[n];
    for (std::size_t k = 0; k < in; ++k) {
      const double xk = xr[k];
      double* dwrow = dw.row(k);
      for (std::size_t n = 0; n < out; ++n) dwrow[n] += xk * dyr[n];
    }
    if (dx != nullptr) {
      double* dxr = dx->row(t);
      for (std::size_t k = 0; k < in; ++k) {
        const double* wrow = w.row(k);
        double s = 0.0;
        for (std::size_t n = 0; n < out; ++n) s += dyr[n] * wrow[n];
        dxr[k] += s;
      }
    }
  }
}

double LogSumExp(const double* v, std::size_t n) {
  double m = -INFINITY;
  for (std::size_t i = 0; i < n; ++i) m = std::max(m, v[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(v[i] - m);
  return m + std::log(s);
}

void RequirePositive(int value, const char* name) {
  if (value <= 0) {
    throw Error(ErrorCode::kConfig,
                fmt::format("model config: {} must be positive, got {}", name,
                            value));
  }
}

}  // namespace

void ModelConfig::Validate() const {
  RequirePositive(vocab_size, "vocab_size");
  RequirePositive(d_model, "d_model");
  RequirePositive(n_layers, "n_layers");
  RequirePositive(n_heads, "n_heads");
  RequirePositive(ctx_len, "ctx_len");
  if (d_model % n_heads != 0) {
    throw Error(ErrorCode::kConfig,
                fmt::format("model config: d_model {} not divisible by "
                            "n_heads {}",
                            d_model, n_heads));
  }
  if (ctx_len < 8) {
    throw Error(ErrorCode::kConfig,
                fmt::format("model config: ctx_len must be >= 8, got {}",
                            ctx_len));
  }
}

nlohmann::json ModelConfigToJson(const ModelConfig& config) {
  return {{"vocab_size", config.vocab_size}, {"d_model", config.d_model},
          {"n_layers", config.n_layers},     {"n_heads", config.n_heads},
          {"ctx_len", config.ctx_len},       {"seed", config.seed}};
}

ModelConfig ModelConfigFromJson(const nlohmann::json& j) {
  ModelConfig config;
  try {
    config.vocab_size = j.value("vocab_size", config.vocab_size);
    config.d_model = j.value("d_model", config.d_model);
    config.n_layers = j.value("n_layers", config.n_layers);
    config.n_heads = j.value("n_heads", config.n_heads);
    config.ctx_len = j.value("ctx_len", config.ctx_len);
    config.seed = j.value("seed", config.seed);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("model config: {}", e.what()));
  }
  config.Validate();
  return config;
}

std::vector<ParamSpec> ParameterLayout(const ModelConfig& config) {
  const auto v = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.d_model);
  const auto ctx = static_cast<std::size_t>(config.ctx_len);
  std::vector<ParamSpec> layout;
  layout.push_back({"tok_emb.weight", {v, d}});
  layout.push_back({"pos_emb.weight", {ctx, d}});
  for (int l = 0; l < config.n_layers; ++l) {
    const std::string p = fmt::format("blocks.{}.", l);
    layout.push_back({p + "ln1.gamma", {d}});
    layout.push_back({p + "ln1.beta", {d}});
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      layout.push_back({p + "attn." + w + ".weight", {d, d}});
      layout.push_back({p + "attn." + w + ".bias", {d}});
    }
    layout.push_back({p + "ln2.gamma", {d}});
    layout.push_back({p + "ln2.beta", {d}});
    layout.push_back({p + "mlp.fc1.weight", {d, 4 * d}});
    layout.push_back({p + "mlp.fc1.bias", {4 * d}});
    layout.push_back({p + "mlp.fc2.weight", {4 * d, d}});
    layout.push_back({p + "mlp.fc2.bias", {d}});
  }
  layout.push_back({"ln_f.gamma", {d}});
  layout.push_back({"ln_f.beta", {d}});
  layout.push_back({"lm_head.weight", {d, v}});
  layout.push_back({"lm_head.bias", {v}});
  return layout;
}

TinyLm::TinyLm(const ModelConfig& config) : config_(config) {
  config_.Validate();
  std::mt19937_64 rng(config_.seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& spec : ParameterLayout(config_)) {
    Tensor t(spec.shape);
    const std::string& name = spec.name;
    if (name.ends_with(".gamma")) {
      t.Fill(1.0);
    } else if (name.ends_with(".weight")) {
      for (double& x : t.values()) x = normal(rng);
    }
    params_.push_back({std::move(spec.name), std::move(t)});
  }
}

TinyLm::TinyLm(const ModelConfig& config, std::vector<NamedTensor> params)
    : config_(config), params_(std::move(params)) {
  config_.Validate();
  const auto layout = ParameterLayout(config_);
  if (layout.size() != params_.size()) {
    throw Error(ErrorCode::kManifest,
                fmt::format("expected {} tensors, got {}", layout.size(),
                            params_.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout[i].name != params_[i].name ||
        layout[i].shape != params_[i].tensor.shape()) {
      throw Error(ErrorCode::kManifest,
                  fmt::format("tensor {}: expected {} {}, got {} {}", i,
                              layout[i].name, ShapeString(layout[i].shape),
                              params_[i].name,
                              ShapeString(params_[i].tensor.shape())));
    }
  }
}

std::size_t TinyLm::ParameterCount() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

Gradients TinyLm::ZeroGradients() const {
  Gradients grads;
  grads.reserve(params_.size());
  for (const auto& p : params_) grads.emplace_back(p.tensor.shape());
  return grads;
}

void TinyLm::CheckIds(std::span<const TokenId> ids) const {
  if (ids.size() > static_cast<std::size_t>(config_.ctx_len)) {
    throw Error(ErrorCode::kContextOverflow,
                fmt::format("sequence of {} tokens exceeds ctx_len {}",
                            ids.size(), config_.ctx_len));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw Error(ErrorCode::kOutOfRange,
                  fmt::format("token id {} outside vocabulary of size {}", id,
                              config_.vocab_size));
    }
  }
}

void TinyLm::ForwardCached(std::span<const TokenId> ids,
                           ForwardCache& cache) const {
  CheckIds(ids);
  const std::size_t T = ids.size();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto H = static_cast<std::size_t>(config_.n_heads);
  const std::size_t ff = 4 * d;

  cache.ids.assign(ids.begin(), ids.end());
  cache.layers.resize(static_cast<std::size_t>(config_.n_layers));

  Tensor x({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = P(kTokEmb).row(static_cast<std::size_t>(ids[t]));
    const double* pe = P(kPosEmb).row(t);
    double* xr = x.row(t);
    for (std::size_t c = 0; c < d; ++c) xr[c] = te[c] + pe[c];
  }

  for (std::size_t l = 0; l < cache.layers.size(); ++l) {
    const std::size_t base = LayerBase(l);
    LayerCache& lc = cache.layers[l];
    lc.x_in = x;
    lc.ln1_xhat = Tensor({T, d});
    lc.ln1_rstd.assign(T, 0.0);
    lc.a = Tensor({T, d});
    lc.q = Tensor({T, d});
    lc.k = Tensor({T, d});
    lc.v = Tensor({T, d});
    lc.probs = Tensor({H, T, T});
    lc.ctx = Tensor({T, d});
    lc.x_mid = Tensor({T, d});
    lc.ln2_xhat = Tensor({T, d});
    lc.ln2_rstd.assign(T, 0.0);
    lc.b = Tensor({T, d});
    lc.hpre = Tensor({T, ff});
    lc.hact = Tensor({T, ff});

    for (std::size_t t = 0; t < T; ++t) {
      LayerNormRow(x.row(t), d, P(base + kLn1Gamma), P(base + kLn1Beta),
                   lc.ln1_xhat.row(t), &lc.ln1_rstd[t], lc.a.row(t));
      AffineRow(lc.a.row(t), P(base + kWq), P(base + kBq), lc.q.row(t));
      AffineRow(lc.a.row(t), P(base + kWk), P(base + kBk), lc.k.row(t));
      AffineRow(lc.a.row(t), P(base + kWv), P(base + kBv), lc.v.row(t));
    }
    std::vector<double> attn_out(d);
    for (std::size_t t = 0; t < T; ++t) {
      AttendRow(lc.q.row(t), lc.k.data(), lc.v.data(), t + 1, d, H,
                lc.probs.data() + t * T, T * T, lc.ctx.row(t));
      AffineRow(lc.ctx.row(t), P(base + kWo), P(base + kBo), attn_out.data());
      const double* xr = x.row(t);
      double* mid = lc.x_mid.row(t);
      for (std::size_t c = 0; c < d; ++c) mid[c] = xr[c] + attn_out[c];
    }
    std::vector<double> mlp_out(d);
    for (std::size_t t = 0; t < T; ++t) {
      LayerNormRow(lc.x_mid.row(t), d, P(base + kLn2Gamma),
                   P(base + kLn2Beta), lc.ln2_xhat.row(t), &lc.ln2_rstd[t],
                   lc.b.row(t));
      AffineRow(lc.b.row(t), P(base + kFc1W), P(base + kFc1B),
                lc.hpre.row(t));
      const double* hp = lc.hpre.row(t);
      double* ha = lc.hact.row(t);
      for (std::size_t c = 0; c < ff; ++c) ha[c] = Gelu(hp[c]);
      AffineRow(ha, P(base + kFc2W), P(base + kFc2B), mlp_out.data());
      const double* mid = lc.x_mid.row(t);
      double* xr = x.row(t);
      for (std::size_t c = 0; c < d; ++c) xr[c] = mid[c] + mlp_out[c];
    }
  }

  const std::size_t fbase = LayerBase(cache.layers.size());
  cache.lnf_xhat = Tensor({T, d});
  cache.lnf_rstd.assign(T, 0.0);
  cache.hidden = Tensor({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    LayerNormRow(x.row(t), d, P(fbase), P(fbase + 1), cache.lnf_xhat.row(t),
                 &cache.lnf_rstd[t], cache.hidden.row(t));
  }
}

void TinyLm::Backward(const ForwardCache& cache, const Tensor& d_hidden,
                      Gradients& grads) const {
  const std::size_t T = cache.ids.size();
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto H = static_cast<std::size_t>(config_.n_heads);
  const std::size_t hd = d / H;
  const std::size_t ff = 4 * d;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  const std::size_t fbase = LayerBase(cache.layers.size());
  Tensor dx({T, d});
  for (std::size_t t = 0; t < T; ++t) {
    LayerNormBackwardRow(d_hidden.row(t), cache.lnf_xhat.row(t),
                         cache.lnf_rstd[t], d, P(fbase), grads[fbase],
                         grads[fbase + 1], dx.row(t));
  }

  for (std::size_t li = cache.layers.size(); li-- > 0;) {
    const std::size_t base = LayerBase(li);
    const LayerCache& lc = cache.layers[li];

    // MLP branch: x_out = x_mid + fc2(gelu(fc1(ln2(x_mid)))).
    Tensor dhact({T, ff});
    AffineBackward(lc.hact, dx, P(base + kFc2W), &dhact, grads[base + kFc2W],
                   grads[base + kFc2B]);
    Tensor dhpre({T, ff});
    for (std::size_t i = 0; i < dhact.size(); ++i) {
      dhpre[i] = dhact[i] * GeluGrad(lc.hpre[i]);
    }
    Tensor db({T, d});
    AffineBackward(lc.b, dhpre, P(base + kFc1W), &db, grads[base + kFc1W],
                   grads[base + kFc1B]);
    Tensor dmid = dx;
    for (std::size_t t = 0; t < T; ++t) {
      LayerNormBackwardRow(db.row(t), lc.ln2_xhat.row(t), lc.ln2_rstd[t], d,
                           P(base + kLn2Gamma), grads[base + kLn2Gamma],
                           grads[base + kLn2Beta], dmid.row(t));
    }

    // Attention branch: x_mid = x_in + wo(attn(ln1(x_in))).
    Tensor dctx({T, d});
    AffineBackward(lc.ctx, dmid, P(base + kWo), &dctx, grads[base + kWo],
                   grads[base + kBo]);
    Tensor dq({T, d});
    Tensor dk({T, d});
    Tensor dv({T, d});
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < T; ++i) {
        const double* p = lc.probs.data() + h * T * T + i * T;
        const double* dci = dctx.row(i) + off;
        double dot = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = lc.v.row(j) + off;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += dci[c] * vj[c];
          dp[j] = s;
          dot += p[j] * s;
          double* dvj = dv.row(j) + off;
          for (std::size_t c = 0; c < hd; ++c) dvj[c] += p[j] * dci[c];
        }
        const double* qi = lc.q.row(i) + off;
        double* dqi = dq.row(i) + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = p[j] * (dp[j] - dot) * scale;
          const double* kj = lc.k.row(j) + off;
          double* dkj = dk.row(j) + off;
          for (std::size_t c = 0; c < hd; ++c) {
            dqi[c] += ds * kj[c];
            dkj[c] += ds * qi[c];
          }
        }
      }
    }
    Tensor da({T, d});
    AffineBackward(lc.a, dq, P(base + kWq), &da, grads[base + kWq],
                   grads[base + kBq]);
    AffineBackward(lc.a, dk, P(base + kWk), &da, grads[base + kWk],
                   grads[base + kBk]);
    AffineBackward(lc.a, dv, P(base + kWv), &da, grads[base + kWv],
                   grads[base + kBv]);
    Tensor dxin = dmid;
    for (std::size_t t = 0; t < T; ++t) {
      LayerNormBackwardRow(da.row(t), lc.ln1_xhat.row(t), lc.ln1_rstd[t], d,
                           P(base + kLn1Gamma), grads[base + kLn1Gamma],
                           grads[base + kLn1Beta], dxin.row(t));
    }
    dx = std::move(dxin);
  }

  for (std::size_t t = 0; t < T; ++t) {
    double* te = grads[kTokEmb].row(static_cast<std::size_t>(cache.ids[t]));
    double* pe = grads[kPosEmb].row(t);
    const double* g = dx.row(t);
    for (std::size_t c = 0; c < d; ++c) {
      te[c] += g[c];
      pe[c] += g[c];
    }
  }
}

void TinyLm::LogitsRow(const double* hidden_row, double* logits) const {
  AffineRow(hidden_row, P(head_weight_index()), P(head_bias_index()), logits);
}

Tensor TinyLm::Hidden(std::span<const TokenId> ids) const {
  ForwardCache cache;
  ForwardCached(ids, cache);
  return std::move(cache.hidden);
}

Tensor TinyLm::Forward(std::span<const TokenId> ids) const {
  Tensor hidden = Hidden(ids);
  const std::size_t T = ids.size();
  Tensor logits({T, static_cast<std::size_t>(config_.vocab_size)});
  for (std::size_t t = 0; t < T; ++t) LogitsRow(hidden.row(t), logits.row(t));
  return logits;
}

DecodeState TinyLm::StartDecode() const {
  DecodeState state;
  state.keys.resize(static_cast<std::size_t>(config_.n_layers));
  state.values.resize(static_cast<std::size_t>(config_.n_layers));
  return state;
}

void TinyLm::Step(DecodeState& state, TokenId token, double* hidden_row) const {
  if (state.length >= config_.ctx_len) {
    throw Error(ErrorCode::kContextOverflow,
                fmt::format("decode position {} exceeds ctx_len {}",
                            state.length, config_.ctx_len));
  }
  const TokenId one[] = {token};
  CheckIds(one);
  const auto d = static_cast<std::size_t>(config_.d_model);
  const auto H = static_cast<std::size_t>(config_.n_heads);
  const std::size_t ff = 4 * d;
  const auto pos = static_cast<std::size_t>(state.length);

  std::vector<double> x(d), xhat(d), a(d), q(d), kv(d), ctx(d), tmp(d), mid(d);
  std::vector<double> hpre(ff), hact(ff), probs(H * (pos + 1));
  double rstd = 0.0;
  const double* te = P(kTokEmb).row(static_cast<std::size_t>(token));
  const double* pe = P(kPosEmb).row(pos);
  for (std::size_t c = 0; c < d; ++c) x[c] = te[c] + pe[c];

  for (std::size_t l = 0; l < static_cast<std::size_t>(config_.n_layers);
       ++l) {
    const std::size_t base = LayerBase(l);
    LayerNormRow(x.data(), d, P(base + kLn1Gamma), P(base + kLn1Beta),
                 xhat.data(), &rstd, a.data());
    AffineRow(a.data(), P(base + kWq), P(base + kBq), q.data());
    auto& keys = state.keys[l];
    auto& values = state.values[l];
    keys.resize((pos + 1) * d);
    values.resize((pos + 1) * d);
    AffineRow(a.data(), P(base + kWk), P(base + kBk), keys.data() + pos * d);
    AffineRow(a.data(), P(base + kWv), P(base + kBv), values.data() + pos * d);
    AttendRow(q.data(), keys.data(), values.data(), pos + 1, d, H,
              probs.data(), pos + 1, ctx.data());
    AffineRow(ctx.data(), P(base + kWo), P(base + kBo), tmp.data());
    for (std::size_t c = 0; c < d; ++c) mid[c] = x[c] + tmp[c];
    LayerNormRow(mid.data(), d, P(base + kLn2Gamma), P(base + kLn2Beta),
                 xhat.data(), &rstd, a.data());
    AffineRow(a.data(), P(base + kFc1W), P(base + kFc1B), hpre.data());
    for (std::size_t c = 0; c < ff; ++c) hact[c] = Gelu(hpre[c]);
    AffineRow(hact.data(), P(base + kFc2W), P(base + kFc2B), tmp.data());
    for (std::size_t c = 0; c < d; ++c) x[c] = mid[c] + tmp[c];
  }
  const std::size_t fbase = LayerBase(static_cast<std::size_t>(config_.n_layers));
  LayerNormRow(x.data(), d, P(fbase), P(fbase + 1), xhat.data(), &rstd,
               hidden_row);
  ++state.length;
}

namespace {

void CheckExample(const TinyLm& model, std::span<const TokenId> input,
                  std::span<const TokenId> target,
                  std::span<const std::uint8_t> mask) {
  if (input.size() != target.size() || input.size() != mask.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("lm example lengths differ: input {}, target {}, "
                            "mask {}",
                            input.size(), target.size(), mask.size()));
  }
  if (std::none_of(mask.begin(), mask.end(),
                   [](std::uint8_t m) { return m != 0; })) {
    throw Error(ErrorCode::kDegenerateMask, "loss mask selects no positions");
  }
  for (TokenId id : target) {
    if (id < 0 || id >= model.config().vocab_size) {
      throw Error(ErrorCode::kOutOfRange,
                  fmt::format("target id {} outside vocabulary", id));
    }
  }
}

std::size_t MaskCount(std::span<const std::uint8_t> mask) {
  return static_cast<std::size_t>(
      std::count_if(mask.begin(), mask.end(),
                    [](std::uint8_t m) { return m != 0; }));
}

}  // namespace

double LmLoss(const TinyLm& model, std::span<const TokenId> input,
              std::span<const TokenId> target,
              std::span<const std::uint8_t> mask) {
  CheckExample(model, input, target, mask);
  const Tensor hidden = model.Hidden(input);
  std::vector<double> logits(static_cast<std::size_t>(model.config().vocab_size));
  double total = 0.0;
  for (std::size_t t = 0; t < input.size(); ++t) {
    if (mask[t] == 0) continue;
    model.LogitsRow(hidden.row(t), logits.data());
    total += LogSumExp(logits.data(), logits.size()) -
             logits[static_cast<std::size_t>(target[t])];
  }
  return total / static_cast<double>(MaskCount(mask));
}

double LmLoss(const TinyLm& model, const LmExample& example) {
  return LmLoss(model, example.input, example.target, example.mask);
}

double LmLossAndGrad(const TinyLm& model, const LmExample& example,
                     double scale, Gradients& grads) {
  CheckExample(model, example.input, example.target, example.mask);
  ForwardCache cache;
  model.ForwardCached(example.input, cache);
  const std::size_t T = example.input.size();
  const auto d = static_cast<std::size_t>(model.config().d_model);
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  const double inv_count = 1.0 / static_cast<double>(MaskCount(example.mask));
  const Tensor& w = model.params()[model.head_weight_index()].tensor;
  Tensor& dw = grads[model.head_weight_index()];
  Tensor& db = grads[model.head_bias_index()];

  Tensor d_hidden({T, d});
  std::vector<double> logits(V);
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (example.mask[t] == 0) continue;
    const double* h = cache.hidden.row(t);
    model.LogitsRow(h, logits.data());
    const double lse = LogSumExp(logits.data(), V);
    const auto target = static_cast<std::size_t>(example.target[t]);
    total += lse - logits[target];
    for (std::size_t n = 0; n < V; ++n) {
      logits[n] = std::exp(logits[n] - lse) * inv_count * scale;
    }
    logits[target] -= inv_count * scale;
    for (std::size_t n = 0; n < V; ++n) db[n] += logits[n];
    double* dh = d_hidden.row(t);
    for (std::size_t k = 0; k < d; ++k) {
      const double hk = h[k];
      double* dwrow = dw.row(k);
      const double* wrow = w.row(k);
      double s = 0.0;
      for (std::size_t n = 0; n < V; ++n) {
        dwrow[n] += hk * logits[n];
        s += logits[n] * wrow[n];
      }
      dh[k] = s;
    }
  }
  model.Backward(cache, d_hidden, grads);
  return total * inv_count;
}

Gradients LmGrads(const TinyLm& model, std::span<const LmExample> batch,
                  double* mean_loss) {
  if (batch.empty()) {
    throw Error(ErrorCode::kDegenerateMask, "empty batch");
  }
  Gradients grads = model.ZeroGradients();
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& example : batch) {
    total += LmLossAndGrad(model, example, scale, grads);
  }
  const double loss = total * scale;
  if (!std::isfinite(loss)) {
    throw Error(ErrorCode::kDivergence,
                fmt::format("non-finite loss {}", loss));
  }
  if (mean_loss != nullptr) *mean_loss = loss;
  return grads;
}

TokenIds GreedyDecode(const TinyLm& model, std::span<const TokenId> prompt,
                      int max_new, TokenId stop_id) {
  const int ctx = model.config().ctx_len;
  if (prompt.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "greedy decode needs a prompt");
  }
  if (prompt.size() >= static_cast<std::size_t>(ctx)) {
    throw Error(ErrorCode::kContextOverflow,
                fmt::format("prompt of {} tokens leaves no room in ctx_len {}",
                            prompt.size(), ctx));
  }
  TokenIds generated;
  if (max_new <= 0) return generated;

  const auto d = static_cast<std::size_t>(model.config().d_model);
  const auto V = static_cast<std::size_t>(model.config().vocab_size);
  std::vector<double> hidden(d);
  std::vector<double> logits(V);
  DecodeState state = model.StartDecode();
  for (TokenId id : prompt) model.Step(state, id, hidden.data());

  while (true) {
    model.LogitsRow(hidden.data(), logits.data());
    std::size_t best = 0;
    for (std::size_t n = 1; n < V; ++n) {
      if (logits[n] > logits[best]) best = n;
    }
    const auto next = static_cast<TokenId>(best);
    if (next == stop_id) break;
    generated.push_back(next);
    if (static_cast<int>(generated.size()) >= max_new) break;
    if (state.length >= ctx) break;
    model.Step(state, next, hidden.data());
  }
  return generated;
}

std::vector<double> SequenceLogprobs(const TinyLm& model,
                                     std::span<const TokenId> ids,
                                     std::size_t condition_len) {
  if (condition_len < 1 || condition_len >= ids.size()) {
    throw Error(ErrorCode::kEmptyContinuation,
                fmt::format("condition_len {} leaves no continuation in a "
                            "sequence of {} tokens",
                            condition_len, ids.size()));
  }
  const auto input = ids.first(ids.size() - 1);
  const Tensor hidden = model.Hidden(input);
  std::vector<double> logits(static_cast<std::size_t>(model.config().vocab_size));
  std::vector<double> out;
  out.reserve(ids.size() - condition_len);
  for (std::size_t t = condition_len; t < ids.size(); ++t) {
    const auto target = ids[t];
    if (target < 0 || target >= model.config().vocab_size) {
      throw Error(ErrorCode::kOutOfRange,
                  fmt::format("token id {} outside vocabulary", target));
    }
    model.LogitsRow(hidden.row(t - 1), logits.data());
    out.push_back(logits[static_cast<std::size_t>(target)] -
                  LogSumExp(logits.data(), logits.size()));
  }
  return out;
}

double Perplexity(std::span<const double> logprobs) {
  if (logprobs.empty()) {
    throw Error(ErrorCode::kEmptyContinuation, "perplexity of zero tokens");
  }
  double sum = 0.0;
  for (double lp : logprobs) sum += lp;
  return std::exp(-sum / static_cast<double>(logprobs.size()));
}

void AdamStep(std::span<Tensor* const> params, const Gradients& grads,
              AdamState& state, double lr, const AdamOptions& options) {
  if (params.size() != grads.size()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("adam: {} params vs {} grads", params.size(),
                            grads.size()));
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->SameShape(grads[i]) || !params[i]->SameShape(state.m[i])) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("adam: shape mismatch at tensor {}", i));
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(options.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(options.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = options.beta1 * m[j] + (1.0 - options.beta1) * g[j];
      v[j] = options.beta2 * v[j] + (1.0 - options.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      p[j] -= lr * m_hat / (std::sqrt(v_hat) + options.eps);
    }
  }
}

double ClipGradNorm(Gradients& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& g : grads) {
    for (double x : g.values()) sq += x * x;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads) {
      for (double& x : g.values()) x *= s;
    }
  }
  return norm;
}

std::vector<Tensor*> ParamPointers(std::vector<NamedTensor>& params) {
  std::vector<Tensor*> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(&p.tensor);
  return out;
}

}  // namespace protector
