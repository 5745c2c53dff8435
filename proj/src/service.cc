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

#include "protector/service.h"

#include <cstdlib>
#include <fstream>

#include "fmt/core.h"
#include "httplib.h"
#include "protector/error.h"

namespace protector {
namespace {

using nlohmann::json;

std::string Dump(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace);
}

std::filesystem::path Resolve(const std::filesystem::path& base,
                              const std::string& p) {
  const std::filesystem::path path(p);
  if (p.empty() || path.is_absolute() || base.empty()) return path;
  return base / path;
}

bool ParseBool(const std::string& s) {
  if (s == "1" || s == "true" || s == "yes" || s == "on") return true;
  if (s == "0" || s == "false" || s == "no" || s == "off" || s.empty()) {
    return false;
  }
  throw Error(ErrorCode::kConfig, fmt::format("not a boolean: '{}'", s));
}

int StatusFor(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kParse:
    case ErrorCode::kContextOverflow:
      return 400;
    case ErrorCode::kBusy: return 409;
    case ErrorCode::kExhausted: return 429;
    case ErrorCode::kUpstream: return 502;
    default: return 500;
  }
}

HttpReply ErrorReply(int status, std::string_view code,
                     std::string_view message) {
  return {status, {{"error", {{"code", code}, {"message", message}}}}};
}

HttpReply ErrorReply(const Error& e) {
  return ErrorReply(StatusFor(e.code()), ErrorCodeName(e.code()), e.what());
}

json ParseBody(const std::string& body) {
  try {
    json j = json::parse(body);
    if (!j.is_object()) {
      throw Error(ErrorCode::kInvalidArgument, "request body must be an object");
    }
    return j;
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kParse, fmt::format("bad JSON body: {}", e.what()));
  }
}

std::string RequireString(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || !it->is_string()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("field '{}' must be a string", key));
  }
  return it->get<std::string>();
}

std::vector<std::string> OptionalStrings(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return {};
  if (!it->is_array()) {
    throw Error(ErrorCode::kInvalidArgument,
                fmt::format("field '{}' must be an array of strings", key));
  }
  std::vector<std::string> out;
  for (const auto& v : *it) {
    if (!v.is_string()) {
      throw Error(ErrorCode::kInvalidArgument,
                  fmt::format("field '{}' must be an array of strings", key));
    }
    out.push_back(v.get<std::string>());
  }
  return out;
}

template <typename Fn>
HttpReply Guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return ErrorReply(e);
  } catch (const std::exception& e) {
    return ErrorReply(500, "internal", e.what());
  }
}

}  // namespace

ServiceConfig ServiceConfigFromJson(const json& j,
                                    const std::filesystem::path& base_dir) {
  ServiceConfig c;
  try {
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    if (j.contains("detector")) {
      c.detector_path = Resolve(base_dir, j["detector"].get<std::string>());
    }
    if (j.contains("detoxifier")) {
      c.detoxifier_path = Resolve(base_dir, j["detoxifier"].get<std::string>());
    }
    if (j.contains("threshold") && !j["threshold"].is_null()) {
      c.threshold = j["threshold"].get<double>();
    }
    c.recheck_detoxified = j.value("recheck_detoxified", c.recheck_detoxified);
    if (j.contains("backend")) {
      c.backend = j["backend"];
      // Backend paths are resolved against the same directory.
      if (c.backend.is_object() && !base_dir.empty()) {
        for (const char* key : {"path", "checkpoint"}) {
          if (c.backend.contains(key) && c.backend[key].is_string()) {
            c.backend[key] =
                Resolve(base_dir, c.backend[key].get<std::string>()).string();
          }
        }
      }
    }
    c.max_turns = j.value("max_turns", c.max_turns);
    c.max_request_bytes = j.value("max_request_bytes", c.max_request_bytes);
    c.quiet = j.value("quiet", c.quiet);
    if (j.contains("session_log")) {
      c.session_log = Resolve(base_dir, j["session_log"].get<std::string>());
    }
    if (j.contains("max_new") && !j["max_new"].is_null()) {
      c.max_new = j["max_new"].get<int>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kConfig, fmt::format("service config: {}", e.what()));
  }
  return c;
}

ServiceConfig LoadServiceConfig(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open service config {}", path.string()));
  }
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kConfig,
                fmt::format("{}: {}", path.string(), e.what()));
  }
  return ServiceConfigFromJson(j, path.parent_path());
}

std::optional<std::string> ProcessEnv(const char* name) {
  const char* v = std::getenv(name);
  if (v == nullptr) return std::nullopt;
  return std::string(v);
}

void ApplyEnvOverrides(ServiceConfig& c, const EnvLookup& env) {
  auto number = [](const std::string& s, const char* name) {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      throw Error(ErrorCode::kConfig,
                  fmt::format("{}: not a number: '{}'", name, s));
    }
  };
  if (auto v = env("PROTECTOR_HOST")) c.host = *v;
  if (auto v = env("PROTECTOR_PORT")) {
    c.port = static_cast<int>(number(*v, "PROTECTOR_PORT"));
  }
  if (auto v = env("PROTECTOR_DETECTOR")) c.detector_path = *v;
  if (auto v = env("PROTECTOR_DETOXIFIER")) c.detoxifier_path = *v;
  if (auto v = env("PROTECTOR_THRESHOLD")) {
    c.threshold = number(*v, "PROTECTOR_THRESHOLD");
  }
  if (auto v = env("PROTECTOR_RECHECK")) c.recheck_detoxified = ParseBool(*v);
  if (auto v = env("PROTECTOR_BACKEND")) {
    try {
      c.backend = json::parse(*v);
    } catch (const json::parse_error& e) {
      throw Error(ErrorCode::kConfig,
                  fmt::format("PROTECTOR_BACKEND: {}", e.what()));
    }
  }
  if (auto v = env("PROTECTOR_MAX_TURNS")) {
    c.max_turns = static_cast<int>(number(*v, "PROTECTOR_MAX_TURNS"));
  }
  if (auto v = env("PROTECTOR_MAX_REQUEST_BYTES")) {
    c.max_request_bytes =
        static_cast<std::size_t>(number(*v, "PROTECTOR_MAX_REQUEST_BYTES"));
  }
  if (auto v = env("PROTECTOR_QUIET")) c.quiet = ParseBool(*v);
  if (auto v = env("PROTECTOR_SESSION_LOG")) c.session_log = *v;
  if (auto v = env("PROTECTOR_MAX_NEW")) {
    c.max_new = static_cast<int>(number(*v, "PROTECTOR_MAX_NEW"));
  }
}

void ValidateServiceConfig(const ServiceConfig& c) {
  if (c.threshold && !(*c.threshold > 0.0 && *c.threshold < 1.0)) {
    throw Error(ErrorCode::kConfig,
                fmt::format("threshold {} must lie in (0, 1)", *c.threshold));
  }
  for (const auto* p : {&c.detector_path, &c.detoxifier_path}) {
    if (p->empty()) {
      throw Error(ErrorCode::kConfig,
                  "detector and detoxifier checkpoints are required");
    }
    if (!std::filesystem::exists(*p)) {
      throw Error(ErrorCode::kConfig,
                  fmt::format("checkpoint {} does not exist", p->string()));
    }
  }
  if (!c.backend.is_object()) {
    throw Error(ErrorCode::kConfig, "backend config is required");
  }
  if (c.port < 0 || c.port > 65535) {
    throw Error(ErrorCode::kConfig, fmt::format("bad port {}", c.port));
  }
  if (c.max_request_bytes == 0) {
    throw Error(ErrorCode::kConfig, "max_request_bytes must be positive");
  }
}

ServiceComponents LoadServiceComponents(const ServiceConfig& config) {
  ValidateServiceConfig(config);
  ServiceComponents out;

  LoadedDetector loaded = [&] {
    try {
      return LoadHarmDetector(config.detector_path);
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("detector {}: {}",
                                        config.detector_path.string(),
                                        e.what()));
    }
  }();
  const double threshold = config.threshold.value_or(loaded.threshold);
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kConfig,
                fmt::format("threshold {} must lie in (0, 1)", threshold));
  }
  Detoxifier detox = [&] {
    try {
      return LoadDetoxifier(config.detoxifier_path);
    } catch (const Error& e) {
      throw Error(e.code(), fmt::format("detoxifier {}: {}",
                                        config.detoxifier_path.string(),
                                        e.what()));
    }
  }();
  if (config.max_new) {
    detox = Detoxifier(std::move(detox.mutable_backbone()), *config.max_new);
  }

  out.metadata = {
      {"detector",
       {{"path", config.detector_path.string()},
        {"config", ModelConfigToJson(loaded.detector.backbone().config())},
        {"checkpoint_threshold", loaded.threshold}}},
      {"detoxifier",
       {{"path", config.detoxifier_path.string()},
        {"config", ModelConfigToJson(detox.backbone().config())},
        {"template_version", detox.template_version()},
        {"max_new", detox.max_new()}}}};
  out.scorer = std::make_shared<HarmDetector>(std::move(loaded.detector));
  out.rewriter = std::make_shared<Detoxifier>(std::move(detox));
  out.backend = MakeBackend(config.backend);
  out.protector = {threshold, config.recheck_detoxified};
  return out;
}

json TurnResultToJson(const TurnResult& r, bool include_original, bool quiet) {
  json j = {{"text", r.final_text}, {"turn", r.turn_index}};
  if (!quiet) {
    j["verdict"] = {{"score", r.verdict.score},
                    {"threshold", r.verdict.threshold},
                    {"is_harmful", r.verdict.is_harmful},
                    {"source", VerdictSourceName(r.verdict.source)}};
  }
  if (include_original) j["original"] = r.original_text;
  return j;
}

GuardService::GuardService(ServiceComponents components,
                           ServiceOptions options)
    : components_(std::move(components)), options_(std::move(options)) {
  protector_ = std::make_shared<Protector>(
      components_.backend, components_.scorer, components_.rewriter,
      components_.protector);
  conversations_ =
      std::make_unique<ConversationManager>(protector_, options_.max_turns);
  if (!options_.session_log.empty()) ReplaySessionLog();
}

GuardService::~GuardService() { Stop(); }

void GuardService::ReplaySessionLog() {
  std::ifstream in(options_.session_log);
  if (!in) return;  // first start
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      const std::string id = j.at("conversation_id").get<std::string>();
      PipelineState state = conversations_->Snapshot(id).value_or(
          PipelineState{});
      if (j.at("turn").get<int>() != state.completed_turns()) {
        throw Error(ErrorCode::kParse, "turn index out of sequence");
      }
      state.history.push_back({Role::kUser, j.at("user").get<std::string>(),
                               OptionalStrings(j, "image_refs")});
      state.history.push_back(
          {Role::kAssistant, j.at("assistant").get<std::string>(), {}});
      conversations_->Restore(id, std::move(state));
      ++replayed_turns_;
    } catch (const std::exception& e) {
      throw Error(ErrorCode::kParse,
                  fmt::format("session log {} line {}: {}",
                              options_.session_log.string(), n, e.what()));
    }
  }
}

void GuardService::AppendSessionLog(const std::string& conversation_id,
                                    const UserInput& input,
                                    const TurnResult& result) {
  if (options_.session_log.empty()) return;
  const json entry = {{"conversation_id", conversation_id},
                      {"turn", result.turn_index},
                      {"user", input.text},
                      {"image_refs", input.image_refs},
                      {"assistant", result.final_text}};
  std::lock_guard<std::mutex> lock(log_mutex_);
  std::ofstream out(options_.session_log, std::ios::app);
  out << Dump(entry) << '\n';
}

HttpReply GuardService::Chat(const std::string& body) {
  return Guarded([&]() -> HttpReply {
    const json j = ParseBody(body);
    const std::string id = RequireString(j, "conversation_id");
    UserInput input{RequireString(j, "text"), OptionalStrings(j, "image_refs")};
    if (input.text.size() > options_.max_request_bytes) {
      return ErrorReply(413, "too-large",
                        fmt::format("text of {} bytes exceeds the {}-byte limit",
                                    input.text.size(),
                                    options_.max_request_bytes));
    }
    const bool include_original = j.value("include_original", false);
    const TurnResult result = conversations_->RunTurn(id, input);
    AppendSessionLog(id, input, result);
    return {200, TurnResultToJson(result, include_original, options_.quiet)};
  });
}

HttpReply GuardService::Score(const std::string& body) const {
  return Guarded([&]() -> HttpReply {
    const json j = ParseBody(body);
    return {200, {{"score", components_.scorer->Score(RequireString(j, "text"))}}};
  });
}

HttpReply GuardService::Detoxify(const std::string& body) const {
  return Guarded([&]() -> HttpReply {
    const json j = ParseBody(body);
    DetoxPrompt prompt{RequireString(j, "question"),
                       RequireString(j, "response"),
                       j.value("image_count", 0)};
    const DetoxResult r = components_.rewriter->Detoxify(prompt);
    return {200, {{"text", r.text}, {"fallback", r.fallback}}};
  });
}

HttpReply GuardService::Health() const {
  json j = components_.metadata;
  j["status"] = "ok";
  j["threshold"] = components_.protector.threshold;
  j["recheck_detoxified"] = components_.protector.recheck_detoxified;
  j["backend"] = components_.backend->kind();
  j["history_format_version"] = kHistoryFormatVersion;
  j["template_version"] = kDetoxTemplateVersion;
  j["conversations"] = conversations_->conversation_count();
  return {200, std::move(j)};
}

int GuardService::Start(const std::string& host, int port) {
  if (server_) throw Error(ErrorCode::kConfig, "service already started");
  server_ = std::make_unique<httplib::Server>();
  // Leave room for the JSON envelope around the text limit.
  server_->set_payload_max_length(options_.max_request_bytes * 2 + 4096);

  auto send = [](httplib::Response& res, const HttpReply& reply) {
    res.status = reply.status;
    res.set_content(Dump(reply.body), "application/json");
  };
  server_->Post("/v1/chat", [this, send](const httplib::Request& req,
                                         httplib::Response& res) {
    send(res, Chat(req.body));
  });
  server_->Post("/v1/score", [this, send](const httplib::Request& req,
                                          httplib::Response& res) {
    send(res, Score(req.body));
  });
  server_->Post("/v1/detoxify", [this, send](const httplib::Request& req,
                                             httplib::Response& res) {
    send(res, Detoxify(req.body));
  });
  server_->Get("/v1/health", [this, send](const httplib::Request&,
                                          httplib::Response& res) {
    send(res, Health());
  });
  server_->set_error_handler([send](const httplib::Request&,
                                    httplib::Response& res) {
    if (!res.body.empty()) return;
    if (res.status == 413) {
      send(res, ErrorReply(413, "too-large", "request body too large"));
    } else if (res.status == 404) {
      send(res, ErrorReply(404, "not-found", "no such endpoint"));
    }
  });

  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) {
    server_.reset();
    throw Error(ErrorCode::kIo,
                fmt::format("cannot listen on {}:{}", host, port));
  }
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void GuardService::Stop() {
  if (!server_) return;
  server_->stop();
  if (thread_.joinable()) thread_.join();
  server_.reset();
}

}  // namespace protector
