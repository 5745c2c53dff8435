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

#ifndef PROTECTOR_CHECKPOINT_H_
#define PROTECTOR_CHECKPOINT_H_

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "protector/tensor.h"
#include "protector/tiny_lm.h"

namespace protector {

// On-disk layout:
//   "TLMC" | u32 version | u64 header length | JSON header | f64 data
// All integers and floats are little-endian. The header carries "kind",
// "config", and a "tensors" manifest of {name, shape, offset} where offset
// is the byte offset of the tensor within the data section. Kind-specific
// fields (threshold, template_version) sit beside them.
inline constexpr char kCheckpointMagic[4] = {'T', 'L', 'M', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline constexpr char kKindTinyLm[] = "tiny-lm";
inline constexpr char kKindHarmDetector[] = "harm-detector";
inline constexpr char kKindDetoxifier[] = "detoxifier";

struct Checkpoint {
  std::string kind;
  ModelConfig config;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<NamedTensor> tensors;
};

void WriteCheckpoint(const Checkpoint& checkpoint, std::ostream& out);
void SaveCheckpoint(const Checkpoint& checkpoint,
                    const std::filesystem::path& path);

// Throws kFormat, kVersion, kTruncated or kManifest.
Checkpoint ReadCheckpoint(std::istream& in);
Checkpoint LoadCheckpoint(const std::filesystem::path& path);

// Throws kKindMismatch unless checkpoint.kind == expected.
void ExpectKind(const Checkpoint& checkpoint, const std::string& expected);

void SaveTinyLm(const TinyLm& model, const std::filesystem::path& path);
TinyLm LoadTinyLm(const std::filesystem::path& path);

}  // namespace protector

#endif  // PROTECTOR_CHECKPOINT_H_
