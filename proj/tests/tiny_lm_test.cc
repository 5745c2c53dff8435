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

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "protector/error.h"
#include "support/gradcheck.h"

namespace protector {
namespace {

ModelConfig Small(int d = 16, int ctx = 32) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = 2;
  c.n_heads = 2;
  c.ctx_len = ctx;
  c.seed = 42;
  return c;
}

// lm_head zeroed: every position predicts the uniform distribution.
TinyLm UniformModel() {
  TinyLm model(Small());
  auto& params = model.mutable_params();
  params[model.head_weight_index()].tensor.Fill(0.0);
  params[model.head_bias_index()].tensor.Fill(0.0);
  return model;
}

LmExample NextTokenExample(std::string_view text) {
  TokenIds seq = {Vocab::kBos};
  for (TokenId id : Encode(text)) seq.push_back(id);
  seq.push_back(Vocab::kEos);
  LmExample ex;
  ex.input.assign(seq.begin(), seq.end() - 1);
  ex.target.assign(seq.begin() + 1, seq.end());
  ex.mask.assign(ex.input.size(), 1);
  return ex;
}

TEST(ModelConfigTest, Validates) {
  ModelConfig c = Small();
  c.n_heads = 3;
  EXPECT_THROW(c.Validate(), Error);
  c = Small();
  c.ctx_len = 4;
  EXPECT_THROW(c.Validate(), Error);
  EXPECT_NO_THROW(Small().Validate());
  EXPECT_EQ(ModelConfigFromJson(ModelConfigToJson(Small())), Small());
}

TEST(TinyLmTest, LayoutHasSixteenTensorsPerBlock) {
  const auto layout = ParameterLayout(Small());
  EXPECT_EQ(layout.size(), 2u + 16u * 2u + 4u);
  EXPECT_EQ(layout.front().name, "tok_emb.weight");
  EXPECT_EQ(layout.back().name, "lm_head.bias");
  const TinyLm model(Small());
  std::size_t n = 0;
  for (const auto& spec : layout) {
    std::size_t s = 1;
    for (auto dim : spec.shape) s *= dim;
    n += s;
  }
  EXPECT_EQ(model.ParameterCount(), n);
}

TEST(TinyLmTest, ForwardShapeAndFinite) {
  const TinyLm model(Small());
  const Tensor logits = model.Forward(Encode("hello"));
  ASSERT_EQ(logits.shape(), (std::vector<std::size_t>{5, 263}));
  EXPECT_TRUE(logits.AllFinite());
}

TEST(TinyLmTest, ForwardRejectsOverlongInput) {
  const TinyLm model(Small(16, 8));
  try {
    model.Forward(Encode("123456789"));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContextOverflow);
  }
}

TEST(TinyLmTest, Causal) {
  const TinyLm model(Small());
  TokenIds a = Encode("causal masks");
  TokenIds b = a;
  b[7] = 'Z';
  const Tensor la = model.Forward(a);
  const Tensor lb = model.Forward(b);
  for (std::size_t t = 0; t < 7; ++t) {
    EXPECT_EQ(std::memcmp(la.row(t), lb.row(t), 263 * sizeof(double)), 0)
        << "position " << t;
  }
  EXPECT_NE(std::memcmp(la.row(7), lb.row(7), 263 * sizeof(double)), 0);
}

TEST(TinyLmTest, SeededInitIsDeterministic) {
  const TinyLm a(Small());
  const TinyLm b(Small());
  const Tensor la = a.Forward(Encode("same seed"));
  const Tensor lb = b.Forward(Encode("same seed"));
  EXPECT_EQ(std::memcmp(la.data(), lb.data(), la.size() * sizeof(double)), 0);
  ModelConfig other = Small();
  other.seed = 43;
  const Tensor lc = TinyLm(other).Forward(Encode("same seed"));
  EXPECT_NE(std::memcmp(la.data(), lc.data(), la.size() * sizeof(double)), 0);
}

TEST(TinyLmTest, StepMatchesFullForwardBitwise) {
  TinyLm model(Small());
  testing::Randomize(ParamPointers(model.mutable_params()), 5, 0.2);
  const TokenIds ids = Encode("incremental decoding");
  const Tensor full = model.Hidden(ids);
  DecodeState state = model.StartDecode();
  std::vector<double> row(16);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    model.Step(state, ids[t], row.data());
    ASSERT_EQ(std::memcmp(row.data(), full.row(t), 16 * sizeof(double)), 0)
        << "position " << t;
  }
}

TEST(LmLossTest, UniformModelGivesLogVocab) {
  const TinyLm model = UniformModel();
  const double loss = LmLoss(model, NextTokenExample("any target at all"));
  EXPECT_NEAR(loss, std::log(263.0), 1e-9);
}

TEST(LmLossTest, SaturatedLogitGivesZero) {
  TinyLm model = UniformModel();
  model.mutable_params()[model.head_bias_index()].tensor[65] = 1000.0;
  LmExample ex;
  ex.input = {Vocab::kBos, 'x'};
  ex.target = {65, 'q'};
  ex.mask = {1, 0};
  EXPECT_LT(LmLoss(model, ex), 1e-12);
}

TEST(LmLossTest, EmptyMaskIsAnError) {
  const TinyLm model(Small());
  LmExample ex = NextTokenExample("ab");
  ex.mask.assign(ex.mask.size(), 0);
  try {
    LmLoss(model, ex);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDegenerateMask);
  }
  const std::vector<LmExample> empty;
  EXPECT_THROW(LmGrads(model, empty), Error);
  const std::vector<LmExample> masked = {ex};
  EXPECT_THROW(LmGrads(model, masked), Error);
}

TEST(LmLossTest, NonFiniteLossIsDivergence) {
  TinyLm model(Small());
  model.mutable_params()[model.head_bias_index()].tensor[3] = NAN;
  const std::vector<LmExample> batch = {NextTokenExample("nan")};
  try {
    LmGrads(model, batch);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDivergence);
  }
}

TEST(LmGradTest, MatchesCentralDifferences) {
  TinyLm model(Small(16, 16));
  testing::Randomize(ParamPointers(model.mutable_params()), 11, 0.3);
  LmExample ex = NextTokenExample("grad check!");
  ex.mask[0] = 0;
  const auto report = testing::CheckLmGradients(model, ex, 8, 3);
  EXPECT_GE(report.checked, 200u);
  // Key biases are shift-invariant and checked for a zero gradient instead.
  EXPECT_EQ(report.kinds.size(), 2u + 15u + 4u);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
  EXPECT_GT(report.zero_checked, 0u);
  EXPECT_LT(report.max_zero_grad, 1e-12);
}

TEST(LmGradTest, AbsentTokenRowHasZeroGradient) {
  const TinyLm model(Small());
  const std::vector<LmExample> batch = {NextTokenExample("abc")};
  const Gradients grads = LmGrads(model, batch);
  const Tensor& g = grads[0];
  for (std::size_t c = 0; c < 16; ++c) {
    EXPECT_EQ(g[static_cast<std::size_t>('z') * 16 + c], 0.0);
  }
  double used = 0.0;
  for (std::size_t c = 0; c < 16; ++c) {
    used += std::fabs(g[static_cast<std::size_t>('a') * 16 + c]);
  }
  EXPECT_GT(used, 0.0);
}

TEST(AdamTest, ZeroGradientLeavesParameters) {
  Tensor p({3}, {1.0, -2.0, 0.5});
  Gradients g = {Tensor({3})};
  AdamState state;
  std::vector<Tensor*> params = {&p};
  AdamStep(params, g, state, 0.1);
  EXPECT_EQ(p[0], 1.0);
  EXPECT_EQ(p[1], -2.0);
  EXPECT_EQ(p[2], 0.5);
}

TEST(AdamTest, FirstStepClosedForm) {
  Tensor p({1}, {0.0});
  Gradients g = {Tensor({1}, {1.0})};
  AdamState state;
  std::vector<Tensor*> params = {&p};
  AdamStep(params, g, state, 0.1);
  EXPECT_DOUBLE_EQ(p[0], -0.1 * (1.0 / (std::sqrt(1.0) + 1e-8)));
  EXPECT_EQ(state.step, 1);
}

TEST(AdamTest, ClipRescalesToMaxNorm) {
  Gradients g = {Tensor({2}, {3.0, 4.0})};
  EXPECT_DOUBLE_EQ(ClipGradNorm(g, 1.0), 5.0);
  EXPECT_NEAR(g[0][0], 0.6, 1e-15);
  EXPECT_NEAR(g[0][1], 0.8, 1e-15);
  Gradients small = {Tensor({1}, {0.5})};
  ClipGradNorm(small, 1.0);
  EXPECT_EQ(small[0][0], 0.5);
}

std::vector<LmExample> MemorizationCorpus() {
  std::vector<LmExample> corpus;
  for (const char* s : {"red fox", "blue jay", "old oak", "wet sand",
                        "hot tea", "dry leaf", "big sky", "low tide",
                        "new moon", "soft rain"}) {
    corpus.push_back(NextTokenExample(s));
  }
  return corpus;
}

TinyLm TrainMemorizer(double* initial, double* final_loss) {
  TinyLm model(Small(16, 16));
  const auto corpus = MemorizationCorpus();
  AdamState adam;
  const auto params = ParamPointers(model.mutable_params());
  for (int step = 0; step < 200; ++step) {
    double loss = 0.0;
    Gradients g = LmGrads(model, corpus, &loss);
    if (step == 0) *initial = loss;
    ClipGradNorm(g, 1.0);
    AdamStep(params, g, adam, 1e-2);
  }
  LmGrads(model, corpus, final_loss);
  return model;
}

TEST(TrainingTest, MemorizesTenSequences) {
  double initial = 0.0;
  double final_loss = 0.0;
  const TinyLm model = TrainMemorizer(&initial, &final_loss);
  EXPECT_LT(final_loss, 0.1 * initial);

  // Prompt "<BOS>red" must continue with " fox" then EOS.
  TokenIds prompt = {Vocab::kBos};
  for (TokenId id : Encode("red")) prompt.push_back(id);
  const TokenIds out = GreedyDecode(model, prompt, 10);
  EXPECT_EQ(Decode(out), " fox");
  EXPECT_EQ(GreedyDecode(model, prompt, 10), out);

  // A memorised sequence has perplexity close to 1.
  TokenIds seq = prompt;
  for (TokenId id : Encode(" fox")) seq.push_back(id);
  seq.push_back(Vocab::kEos);
  EXPECT_LT(Perplexity(SequenceLogprobs(model, seq, 4)), 1.2);
}

TEST(GreedyDecodeTest, Limits) {
  const TinyLm model(Small(16, 8));
  EXPECT_TRUE(GreedyDecode(model, Encode("ab"), 0).empty());
  try {
    GreedyDecode(model, Encode("12345678"), 4);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kContextOverflow);
  }
  // Stops at a full window even with budget left; no stop token can win
  // here because EOS is excluded via an unreachable stop id.
  const TokenIds out = GreedyDecode(model, Encode("abcde"), 100, -1);
  EXPECT_EQ(out.size(), 8u - 5u + 1u);
}

TEST(SequenceLogprobsTest, UniformPerplexity) {
  const TinyLm model = UniformModel();
  const TokenIds ids = Encode("uniform model text");
  EXPECT_NEAR(Perplexity(SequenceLogprobs(model, ids, 3)), 263.0, 1e-6);
  try {
    SequenceLogprobs(model, ids, ids.size());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEmptyContinuation);
  }
}

TEST(SequenceLogprobsTest, MatchesExpLoss) {
  TinyLm model(Small());
  testing::Randomize(ParamPointers(model.mutable_params()), 9, 0.1);
  const TokenIds ids = Encode("consistency between paths");
  const std::size_t cond = 6;
  LmExample ex;
  ex.input.assign(ids.begin(), ids.end() - 1);
  ex.target.assign(ids.begin() + 1, ids.end());
  ex.mask.assign(ex.input.size(), 0);
  for (std::size_t t = cond - 1; t < ex.mask.size(); ++t) ex.mask[t] = 1;
  const double ppl = Perplexity(SequenceLogprobs(model, ids, cond));
  EXPECT_NEAR(ppl, std::exp(LmLoss(model, ex)), 1e-10);
}

}  // namespace
}  // namespace protector
