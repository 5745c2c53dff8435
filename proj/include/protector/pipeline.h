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

#ifndef PROTECTOR_PIPELINE_H_
#define PROTECTOR_PIPELINE_H_

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "protector/backend.h"
#include "protector/detoxifier.h"
#include "protector/harm_detector.h"

namespace protector {

enum class Role { kUser, kAssistant };

struct Turn {
  Role role = Role::kUser;
  std::string text;
  std::vector<std::string> image_refs;  // user turns only

  bool operator==(const Turn&) const = default;
};

// Conversation memory. Alternates user/assistant starting with user; an
// empty history means the next turn is the first round.
struct PipelineState {
  std::vector<Turn> history;

  bool first_round() const { return history.empty(); }
  int completed_turns() const { return static_cast<int>(history.size() / 2); }
  bool operator==(const PipelineState&) const = default;
};

inline constexpr int kHistoryFormatVersion = 1;

// "USER: <image:ref>text\n" / "ASSISTANT: text\n".
std::string SerializeTurn(const Turn& turn);

// Prior turns in order followed by the new user turn. The serialization of
// a longer history always extends that of its prefix.
std::string ConcatHistory(const PipelineState& state, const Turn& user_turn);

struct UserInput {
  std::string text;
  std::vector<std::string> image_refs;
};

struct StageLatency {
  double generate_ms = 0.0;
  double detect_ms = 0.0;
  double detoxify_ms = 0.0;
};

struct TurnResult {
  std::string final_text;
  std::string original_text;
  SafetyVerdict verdict;
  int turn_index = 0;
  StageLatency latency;
};

struct ProtectorConfig {
  double threshold = kDefaultThreshold;
  // Re-score the rewrite once and fall back to the fixed refusal if it is
  // still flagged.
  bool recheck_detoxified = false;
};

// One guarded turn: generate, score once, rewrite if flagged, then commit
// only the final text to history.
class Protector {
 public:
  Protector(std::shared_ptr<Backend> backend,
            std::shared_ptr<const ResponseScorer> scorer,
            std::shared_ptr<const ResponseRewriter> rewriter,
            ProtectorConfig config = {});

  struct Outcome {
    TurnResult result;
    PipelineState state;
  };

  // `state` is never modified; the caller adopts Outcome::state. Backend
  // failures surface as kUpstream and leave nothing to commit.
  Outcome RunTurn(const PipelineState& state, const UserInput& input,
                  std::string_view conversation_id = {}) const;

  const ProtectorConfig& config() const { return config_; }
  Backend& backend() const { return *backend_; }
  const ResponseScorer& scorer() const { return *scorer_; }
  const ResponseRewriter& rewriter() const { return *rewriter_; }

 private:
  std::shared_ptr<Backend> backend_;
  std::shared_ptr<const ResponseScorer> scorer_;
  std::shared_ptr<const ResponseRewriter> rewriter_;
  ProtectorConfig config_;
};

// Per-conversation state with one in-flight turn per conversation id.
class ConversationManager {
 public:
  // max_turns <= 0 means unlimited.
  explicit ConversationManager(std::shared_ptr<const Protector> protector,
                               int max_turns = 0);

  // Throws kBusy if the conversation already has a turn in flight and
  // kExhausted once max_turns turns are committed.
  TurnResult RunTurn(const std::string& conversation_id,
                     const UserInput& input);

  std::optional<PipelineState> Snapshot(const std::string& conversation_id) const;
  void Restore(const std::string& conversation_id, PipelineState state);
  std::size_t conversation_count() const;

  const Protector& protector() const { return *protector_; }

 private:
  struct Slot {
    PipelineState state;
    bool busy = false;
  };

  std::shared_ptr<const Protector> protector_;
  int max_turns_;
  mutable std::mutex mutex_;
  std::map<std::string, Slot> slots_;
};

}  // namespace protector

#endif  // PROTECTOR_PIPELINE_H_
