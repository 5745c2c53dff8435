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

#ifndef PROTECTOR_SERVICE_H_
#define PROTECTOR_SERVICE_H_

#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "json.hpp"
#include "protector/backend.h"
#include "protector/detoxifier.h"
#include "protector/harm_detector.h"
#include "protector/pipeline.h"

namespace httplib {
class Server;
}

namespace protector {

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path detector_path;
  std::filesystem::path detoxifier_path;
  // Unset: use the threshold stored in the detector checkpoint.
  std::optional<double> threshold;
  bool recheck_detoxified = false;
  nlohmann::json backend;
  int max_turns = 0;  // 0 = unlimited
  std::size_t max_request_bytes = 64 * 1024;
  bool quiet = false;  // omit verdict metadata from chat replies
  std::filesystem::path session_log;
  std::optional<int> max_new;  // overrides the detoxifier checkpoint
};

// Relative paths resolve against base_dir.
ServiceConfig ServiceConfigFromJson(const nlohmann::json& j,
                                    const std::filesystem::path& base_dir = {});
ServiceConfig LoadServiceConfig(const std::filesystem::path& path);

using EnvLookup = std::function<std::optional<std::string>(const char*)>;
std::optional<std::string> ProcessEnv(const char* name);

// PROTECTOR_HOST, _PORT, _DETECTOR, _DETOXIFIER, _THRESHOLD, _RECHECK,
// _BACKEND (JSON), _MAX_TURNS, _MAX_REQUEST_BYTES, _QUIET, _SESSION_LOG,
// _MAX_NEW.
void ApplyEnvOverrides(ServiceConfig& config, const EnvLookup& env = ProcessEnv);

// Threshold must lie strictly inside (0, 1) here; checkpoint paths must
// exist. Throws kConfig.
void ValidateServiceConfig(const ServiceConfig& config);

struct ServiceComponents {
  std::shared_ptr<Backend> backend;
  std::shared_ptr<const ResponseScorer> scorer;
  std::shared_ptr<const ResponseRewriter> rewriter;
  ProtectorConfig protector;
  nlohmann::json metadata = nlohmann::json::object();  // served by /v1/health
};

// Loads and validates both checkpoints; errors name the offending file.
ServiceComponents LoadServiceComponents(const ServiceConfig& config);

struct ServiceOptions {
  int max_turns = 0;
  std::size_t max_request_bytes = 64 * 1024;
  bool quiet = false;
  std::filesystem::path session_log;
};

struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

class GuardService {
 public:
  GuardService(ServiceComponents components, ServiceOptions options);
  ~GuardService();

  GuardService(const GuardService&) = delete;
  GuardService& operator=(const GuardService&) = delete;

  // Binds and serves on a background thread. port 0 picks a free port.
  // Returns the bound port.
  int Start(const std::string& host, int port);
  // Stops accepting and waits for in-flight requests.
  void Stop();

  // Endpoint logic without the transport.
  HttpReply Chat(const std::string& body);
  HttpReply Score(const std::string& body) const;
  HttpReply Detoxify(const std::string& body) const;
  HttpReply Health() const;

  ConversationManager& conversations() { return *conversations_; }
  std::size_t replayed_turns() const { return replayed_turns_; }

 private:
  void ReplaySessionLog();
  void AppendSessionLog(const std::string& conversation_id,
                        const UserInput& input, const TurnResult& result);

  ServiceComponents components_;
  ServiceOptions options_;
  std::shared_ptr<const Protector> protector_;
  std::unique_ptr<ConversationManager> conversations_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
  std::mutex log_mutex_;
  std::size_t replayed_turns_ = 0;
};

nlohmann::json TurnResultToJson(const TurnResult& result, bool include_original,
                                bool quiet);

}  // namespace protector

#endif  // PROTECTOR_SERVICE_H_
