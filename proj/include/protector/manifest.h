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

#ifndef PROTECTOR_MANIFEST_H_
#define PROTECTOR_MANIFEST_H_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace protector {

std::string Sha256Hex(std::string_view data);
std::string Sha256File(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::uint64_t seed = 0;
  nlohmann::json config;                // hashed as its compact dump
  std::vector<std::filesystem::path> inputs;   // hashed together, in order
  std::vector<std::filesystem::path> outputs;  // hashed individually
};

// Writes {command, argv, seed, config, config_hash, data_hash, inputs,
// outputs} as pretty JSON.
nlohmann::json ManifestToJson(const RunManifest& manifest);
void WriteRunManifest(const RunManifest& manifest,
                      const std::filesystem::path& path);

}  // namespace protector

#endif  // PROTECTOR_MANIFEST_H_
