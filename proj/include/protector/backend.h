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

#ifndef PROTECTOR_BACKEND_H_
#define PROTECTOR_BACKEND_H_

#include <filesystem>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "protector/tiny_lm.h"

namespace protector {

// What the wrapped model receives for one turn.
struct UpstreamRequest {
  std::string conversation_id;
  int turn = 0;
  std::string serialized_input;  // full history plus the new user turn
  std::string user_text;         // the new user turn's text alone
  std::vector<std::string> image_refs;
};

struct BackendReply {
  std::string text;
  std::optional<std::vector<double>> token_logprobs;
};

// The upstream chat/MLLM being guarded. Generate may be called from several
// threads for different conversations.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual std::string_view kind() const = 0;
  virtual BackendReply Generate(const UpstreamRequest& request) = 0;
  // Per-token log-probabilities of `response` as a continuation of the
  // request. Backends that cannot provide them throw kCapability.
  virtual std::vector<double> ContinuationLogprobs(
      const UpstreamRequest& request, std::string_view response);
};

// Exact-match map from the latest user text to a canned response.
class ScriptedBackend : public Backend {
 public:
  explicit ScriptedBackend(std::map<std::string, std::string> responses);

  std::string_view kind() const override { return "scripted"; }
  BackendReply Generate(const UpstreamRequest& request) override;

 private:
  std::map<std::string, std::string> responses_;
};

struct ReplayRecord {
  std::string conversation_id;
  int turn = 0;
  std::string response;
  std::optional<std::vector<double>> token_logprobs;
};

// Serves responses recorded from a real model, keyed by
// (conversation_id, turn).
class ReplayBackend : public Backend {
 public:
  explicit ReplayBackend(std::vector<ReplayRecord> records);
  static std::vector<ReplayRecord> ReadRecords(std::istream& in);
  static std::vector<ReplayRecord> LoadRecords(
      const std::filesystem::path& path);

  std::string_view kind() const override { return "replay"; }
  BackendReply Generate(const UpstreamRequest& request) override;
  // Looks up the record of this conversation whose response matches.
  std::vector<double> ContinuationLogprobs(const UpstreamRequest& request,
                                           std::string_view response) override;

 private:
  std::vector<ReplayRecord> records_;
  std::map<std::pair<std::string, int>, std::size_t> index_;
};

struct HttpBackendConfig {
  std::string base_url;  // scheme://host[:port]
  std::string path = "/v1/chat/completions";
  // Any string equal to "{{input}}" (or "{{user_text}}",
  // "{{conversation_id}}") is replaced before sending.
  nlohmann::json body_template = {
      {"messages", {{{"role", "user"}, {"content", "{{input}}"}}}}};
  // Dotted path to the assistant text; numeric segments index arrays.
  std::string response_path = "choices.0.message.content";
  double timeout_seconds = 30.0;
  std::map<std::string, std::string> headers;
};

class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendConfig config);

  std::string_view kind() const override { return "http"; }
  BackendReply Generate(const UpstreamRequest& request) override;

 private:
  HttpBackendConfig config_;
};

// A local TinyLm acting as the upstream model; supports log-probabilities.
class LocalLmBackend : public Backend {
 public:
  LocalLmBackend(TinyLm model, int max_new);

  std::string_view kind() const override { return "local-lm"; }
  BackendReply Generate(const UpstreamRequest& request) override;
  std::vector<double> ContinuationLogprobs(const UpstreamRequest& request,
                                           std::string_view response) override;

 private:
  TinyLm model_;
  int max_new_;
};

// Fills template slots recursively.
nlohmann::json FillTemplate(const nlohmann::json& node,
                            const UpstreamRequest& request);
// Resolves "a.b.0.c" against a JSON document. Throws kNotFound.
const nlohmann::json& SelectPath(const nlohmann::json& doc,
                                 std::string_view path);

HttpBackendConfig HttpBackendConfigFromJson(const nlohmann::json& j);

// {"kind": "scripted", "responses": {...}} or {"kind": "scripted", "path"}
// {"kind": "replay", "path": ...}
// {"kind": "http", "base_url": ..., ...}
// {"kind": "local-lm", "checkpoint": ..., "max_new": ...}
// Relative paths resolve against base_dir.
std::shared_ptr<Backend> MakeBackend(const nlohmann::json& config,
                                     const std::filesystem::path& base_dir = {});

}  // namespace protector

#endif  // PROTECTOR_BACKEND_H_
