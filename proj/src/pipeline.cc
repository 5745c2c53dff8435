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

#include "protector/pipeline.h"

#include <chrono>

#include "fmt/core.h"
#include "protector/error.h"

namespace protector {
namespace {

using Clock = std::chrono::steady_clock;

double MillisSince(Clock::time_point start) {
  return std::chrono::duration<double, std::milli>(Clock::now() - start)
      .count();
}

}  // namespace

std::string SerializeTurn(const Turn& turn) {
  std::string out = turn.role == Role::kUser ? "USER: " : "ASSISTANT: ";
  for (const auto& ref : turn.image_refs) {
    out += "<image:";
    out += ref;
    out += ">";
  }
  out += turn.text;
  out += '\n';
  return out;
}

std::string ConcatHistory(const PipelineState& state, const Turn& user_turn) {
  std::string out;
  for (const auto& turn : state.history) out += SerializeTurn(turn);
  out += SerializeTurn(user_turn);
  return out;
}

Protector::Protector(std::shared_ptr<Backend> backend,
                     std::shared_ptr<const ResponseScorer> scorer,
                     std::shared_ptr<const ResponseRewriter> rewriter,
                     ProtectorConfig config)
    : backend_(std::move(backend)),
      scorer_(std::move(scorer)),
      rewriter_(std::move(rewriter)),
      config_(config) {
  if (!backend_ || !scorer_ || !rewriter_) {
    throw Error(ErrorCode::kConfig,
                "protector needs a backend, a scorer and a rewriter");
  }
  ValidateThreshold(config_.threshold);
}

Protector::Outcome Protector::RunTurn(const PipelineState& state,
                                      const UserInput& input,
                                      std::string_view conversation_id) const {
  const Turn user_turn{Role::kUser, input.text, input.image_refs};
  UpstreamRequest request;
  request.conversation_id = std::string(conversation_id);
  request.turn = state.completed_turns();
  request.serialized_input = ConcatHistory(state, user_turn);
  request.user_text = input.text;
  request.image_refs = input.image_refs;

  Outcome outcome;
  TurnResult& result = outcome.result;
  result.turn_index = request.turn;

  auto start = Clock::now();
  try {
    result.original_text = backend_->Generate(request).text;
  } catch (const Error& e) {
    throw Error(ErrorCode::kUpstream,
                fmt::format("{} backend failed ({}): {}", backend_->kind(),
                            ErrorCodeName(e.code()), e.what()));
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kUpstream,
                fmt::format("{} backend failed: {}", backend_->kind(),
                            e.what()));
  }
  result.latency.generate_ms = MillisSince(start);

  start = Clock::now();
  result.verdict =
      Classify(scorer_->Score(result.original_text), config_.threshold);
  result.latency.detect_ms = MillisSince(start);

  result.final_text = result.original_text;
  if (result.verdict.is_harmful) {
    start = Clock::now();
    const DetoxResult rewrite = rewriter_->Detoxify(
        {input.text, result.original_text,
         static_cast<int>(input.image_refs.size())});
    result.final_text = rewrite.text;
    result.verdict.source = rewrite.fallback ? VerdictSource::kFixedRefusal
                                             : VerdictSource::kDetoxified;
    if (config_.recheck_detoxified && !rewrite.fallback &&
        Classify(scorer_->Score(rewrite.text), config_.threshold).is_harmful) {
      result.final_text = kFixedRefusal;
      result.verdict.source = VerdictSource::kFixedRefusal;
    }
    result.latency.detoxify_ms = MillisSince(start);
  }

  outcome.state = state;
  outcome.state.history.push_back(user_turn);
  outcome.state.history.push_back({Role::kAssistant, result.final_text, {}});
  return outcome;
}

ConversationManager::ConversationManager(
    std::shared_ptr<const Protector> protector, int max_turns)
    : protector_(std::move(protector)), max_turns_(max_turns) {}

TurnResult ConversationManager::RunTurn(const std::string& conversation_id,
                                        const UserInput& input) {
  PipelineState snapshot;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    Slot& slot = slots_[conversation_id];
    if (slot.busy) {
      throw Error(ErrorCode::kBusy,
                  fmt::format("conversation '{}' already has a turn in flight",
                              conversation_id));
    }
    if (max_turns_ > 0 && slot.state.completed_turns() >= max_turns_) {
      throw Error(ErrorCode::kExhausted,
                  fmt::format("conversation '{}' reached the {}-turn limit",
                              conversation_id, max_turns_));
    }
    slot.busy = true;
    snapshot = slot.state;
  }

  try {
    Protector::Outcome outcome =
        protector_->RunTurn(snapshot, input, conversation_id);
    std::lock_guard<std::mutex> lock(mutex_);
    Slot& slot = slots_[conversation_id];
    slot.state = std::move(outcome.state);
    slot.busy = false;
    return std::move(outcome.result);
  } catch (...) {
    std::lock_guard<std::mutex> lock(mutex_);
    slots_[conversation_id].busy = false;
    throw;
  }
}

std::optional<PipelineState> ConversationManager::Snapshot(
    const std::string& conversation_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = slots_.find(conversation_id);
  if (it == slots_.end()) return std::nullopt;
  return it->second.state;
}

void ConversationManager::Restore(const std::string& conversation_id,
                                  PipelineState state) {
  std::lock_guard<std::mutex> lock(mutex_);
  slots_[conversation_id].state = std::move(state);
}

std::size_t ConversationManager::conversation_count() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return slots_.size();
}

}  // namespace protector
