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

#include "protector/backend.h"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>

#include "fmt/core.h"
#include "httplib.h"
#include "protector/checkpoint.h"
#include "protector/error.h"

namespace protector {

std::vector<double> Backend::ContinuationLogprobs(const UpstreamRequest&,
                                                  std::string_view) {
  throw Error(ErrorCode::kCapability,
              fmt::format("{} backend does not expose token log-probabilities",
                          kind()));
}

ScriptedBackend::ScriptedBackend(std::map<std::string, std::string> responses)
    : responses_(std::move(responses)) {}

BackendReply ScriptedBackend::Generate(const UpstreamRequest& request) {
  auto it = responses_.find(request.user_text);
  if (it == responses_.end()) {
    throw Error(ErrorCode::kNotFound,
                fmt::format("no scripted response for '{}'", request.user_text));
  }
  return {it->second, std::nullopt};
}

ReplayBackend::ReplayBackend(std::vector<ReplayRecord> records)
    : records_(std::move(records)) {
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto key = std::make_pair(records_[i].conversation_id,
                                    records_[i].turn);
    // First occurrence wins; later duplicates are only reachable through
    // ContinuationLogprobs.
    index_.emplace(key, i);
  }
}

std::vector<ReplayRecord> ReplayBackend::ReadRecords(std::istream& in) {
  std::vector<ReplayRecord> records;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ReplayRecord r;
      r.conversation_id = j.at("conversation_id").get<std::string>();
      r.turn = j.at("turn").get<int>();
      r.response = j.at("response").get<std::string>();
      if (auto it = j.find("token_logprobs"); it != j.end() && !it->is_null()) {
        r.token_logprobs = it->get<std::vector<double>>();
      }
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParse,
                  fmt::format("replay line {}: {}", line_number, e.what()));
    }
  }
  return records;
}

std::vector<ReplayRecord> ReplayBackend::LoadRecords(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open replay file {}", path.string()));
  }
  return ReadRecords(in);
}

BackendReply ReplayBackend::Generate(const UpstreamRequest& request) {
  auto it = index_.find({request.conversation_id, request.turn});
  if (it != index_.end()) {
    const ReplayRecord& r = records_[it->second];
    return {r.response, r.token_logprobs};
  }
  const bool known = std::any_of(
      records_.begin(), records_.end(), [&](const ReplayRecord& r) {
        return r.conversation_id == request.conversation_id;
      });
  if (known) {
    throw Error(ErrorCode::kExhausted,
                fmt::format("replay exhausted for conversation '{}' at turn {}",
                            request.conversation_id, request.turn));
  }
  throw Error(ErrorCode::kNotFound,
              fmt::format("no replay records for conversation '{}'",
                          request.conversation_id));
}

std::vector<double> ReplayBackend::ContinuationLogprobs(
    const UpstreamRequest& request, std::string_view response) {
  for (const auto& r : records_) {
    if (r.conversation_id == request.conversation_id &&
        r.response == response) {
      if (!r.token_logprobs) {
        throw Error(ErrorCode::kCapability,
                    fmt::format("replay record for '{}' has no token_logprobs",
                                r.conversation_id));
      }
      return *r.token_logprobs;
    }
  }
  throw Error(ErrorCode::kNotFound,
              fmt::format("no replay record in '{}' matches the response",
                          request.conversation_id));
}

nlohmann::json FillTemplate(const nlohmann::json& node,
                            const UpstreamRequest& request) {
  if (node.is_string()) {
    const auto& s = node.get_ref<const std::string&>();
    if (s == "{{input}}") return request.serialized_input;
    if (s == "{{user_text}}") return request.user_text;
    if (s == "{{conversation_id}}") return request.conversation_id;
    if (s == "{{image_refs}}") return request.image_refs;
    return node;
  }
  if (node.is_object()) {
    nlohmann::json out = nlohmann::json::object();
    for (auto it = node.begin(); it != node.end(); ++it) {
      out[it.key()] = FillTemplate(it.value(), request);
    }
    return out;
  }
  if (node.is_array()) {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& child : node) out.push_back(FillTemplate(child, request));
    return out;
  }
  return node;
}

const nlohmann::json& SelectPath(const nlohmann::json& doc,
                                 std::string_view path) {
  const nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (start <= path.size() && !path.empty()) {
    const std::size_t dot = path.find('.', start);
    const std::string_view seg =
        path.substr(start, dot == std::string_view::npos ? path.npos
                                                         : dot - start);
    if (node->is_array()) {
      std::size_t index = 0;
      const auto [ptr, ec] =
          std::from_chars(seg.data(), seg.data() + seg.size(), index);
      if (ec != std::errc() || ptr != seg.data() + seg.size() ||
          index >= node->size()) {
        throw Error(ErrorCode::kNotFound,
                    fmt::format("path segment '{}' does not index the array",
                                seg));
      }
      node = &(*node)[index];
    } else if (node->is_object() && node->contains(seg)) {
      node = &(*node)[std::string(seg)];
    } else {
      throw Error(ErrorCode::kNotFound,
                  fmt::format("path segment '{}' not found", seg));
    }
    if (dot == std::string_view::npos) break;
    start = dot + 1;
  }
  return *node;
}

HttpBackendConfig HttpBackendConfigFromJson(const nlohmann::json& j) {
  HttpBackendConfig config;
  try {
    config.base_url = j.at("base_url").get<std::string>();
    config.path = j.value("path", config.path);
    if (j.contains("body_template")) config.body_template = j["body_template"];
    config.response_path = j.value("response_path", config.response_path);
    config.timeout_seconds = j.value("timeout_seconds", config.timeout_seconds);
    if (j.contains("headers")) {
      config.headers =
          j["headers"].get<std::map<std::string, std::string>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("http backend config: {}", e.what()));
  }
  return config;
}

HttpBackend::HttpBackend(HttpBackendConfig config)
    : config_(std::move(config)) {
  if (config_.base_url.empty()) {
    throw Error(ErrorCode::kConfig, "http backend needs a base_url");
  }
}

BackendReply HttpBackend::Generate(const UpstreamRequest& request) {
  httplib::Client client(config_.base_url);
  const auto seconds = static_cast<time_t>(config_.timeout_seconds);
  const auto usec = static_cast<time_t>(
      (config_.timeout_seconds - static_cast<double>(seconds)) * 1e6);
  client.set_connection_timeout(seconds, usec);
  client.set_read_timeout(seconds, usec);
  client.set_write_timeout(seconds, usec);
  httplib::Headers headers(config_.headers.begin(), config_.headers.end());

  const std::string body =
      FillTemplate(config_.body_template, request)
          .dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
  auto res = client.Post(config_.path, headers, body, "application/json");
  if (!res) {
    throw Error(ErrorCode::kUpstream,
                fmt::format("http backend {}{}: {}", config_.base_url,
                            config_.path, httplib::to_string(res.error())));
  }
  if (res->status < 200 || res->status >= 300) {
    throw Error(ErrorCode::kUpstream,
                fmt::format("http backend returned status {}: {}", res->status,
                            res->body.substr(0, 512)));
  }
  try {
    const auto doc = nlohmann::json::parse(res->body);
    const auto& text = SelectPath(doc, config_.response_path);
    if (!text.is_string()) {
      throw Error(ErrorCode::kUpstream,
                  fmt::format("response path '{}' is not a string",
                              config_.response_path));
    }
    return {text.get<std::string>(), std::nullopt};
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kUpstream,
                fmt::format("http backend sent invalid JSON: {}", e.what()));
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kUpstream) throw;
    throw Error(ErrorCode::kUpstream, e.what());
  }
}

LocalLmBackend::LocalLmBackend(TinyLm model, int max_new)
    : model_(std::move(model)), max_new_(max_new) {}

BackendReply LocalLmBackend::Generate(const UpstreamRequest& request) {
  TokenIds ids = Encode(request.serialized_input);
  ids.insert(ids.begin(), Vocab::kBos);
  const auto keep = static_cast<std::size_t>(model_.config().ctx_len - 1);
  if (ids.size() > keep) {
    ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(keep));
  }
  return {Decode(GreedyDecode(model_, ids, max_new_, Vocab::kEos)),
          std::nullopt};
}

std::vector<double> LocalLmBackend::ContinuationLogprobs(
    const UpstreamRequest& request, std::string_view response) {
  TokenIds context = Encode(request.serialized_input);
  context.insert(context.begin(), Vocab::kBos);
  const TokenIds cont = Encode(response);
  if (cont.empty()) {
    throw Error(ErrorCode::kEmptyContinuation, "empty response");
  }
  const auto window = static_cast<std::size_t>(model_.config().ctx_len) + 1;
  if (cont.size() >= window) {
    throw Error(ErrorCode::kContextOverflow,
                fmt::format("response of {} tokens does not fit ctx_len {}",
                            cont.size(), model_.config().ctx_len));
  }
  const std::size_t room = window - cont.size();
  if (context.size() > room) {
    context.erase(context.begin(),
                  context.end() - static_cast<std::ptrdiff_t>(room));
  }
  TokenIds ids = context;
  ids.insert(ids.end(), cont.begin(), cont.end());
  return SequenceLogprobs(model_, ids, context.size());
}

std::shared_ptr<Backend> MakeBackend(const nlohmann::json& config,
                                     const std::filesystem::path& base_dir) {
  auto resolve = [&](const std::string& p) {
    std::filesystem::path path(p);
    return path.is_relative() && !base_dir.empty() ? base_dir / path : path;
  };
  std::string kind;
  try {
    kind = config.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("backend config: {}", e.what()));
  }
  try {
    if (kind == "scripted") {
      nlohmann::json responses;
      if (config.contains("responses")) {
        responses = config["responses"];
      } else {
        const auto path = resolve(config.at("path").get<std::string>());
        std::ifstream in(path);
        if (!in) {
          throw Error(ErrorCode::kIo,
                      fmt::format("cannot open {}", path.string()));
        }
        responses = nlohmann::json::parse(in);
      }
      return std::make_shared<ScriptedBackend>(
          responses.get<std::map<std::string, std::string>>());
    }
    if (kind == "replay") {
      return std::make_shared<ReplayBackend>(ReplayBackend::LoadRecords(
          resolve(config.at("path").get<std::string>())));
    }
    if (kind == "http") {
      return std::make_shared<HttpBackend>(HttpBackendConfigFromJson(config));
    }
    if (kind == "local-lm") {
      return std::make_shared<LocalLmBackend>(
          LoadTinyLm(resolve(config.at("checkpoint").get<std::string>())),
          config.value("max_new", 64));
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("{} backend config: {}", kind, e.what()));
  }
  throw Error(ErrorCode::kConfig, fmt::format("unknown backend kind '{}'", kind));
}

}  // namespace protector
