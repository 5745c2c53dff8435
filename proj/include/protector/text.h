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

#ifndef PROTECTOR_TEXT_H_
#define PROTECTOR_TEXT_H_

#include <cstdint>
#include <filesystem>
#include <istream>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace protector {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

// Byte-level vocabulary. Ids 0-255 are raw bytes, followed by seven special
// tokens. The layout is fixed, so there is nothing to load or train.
struct Vocab {
  static constexpr TokenId kPad = 256;
  static constexpr TokenId kBos = 257;
  static constexpr TokenId kEos = 258;
  static constexpr TokenId kSepQuery = 259;
  static constexpr TokenId kSepAnswer = 260;
  static constexpr TokenId kSepRejected = 261;
  static constexpr TokenId kImage = 262;
  static constexpr int kSize = 263;

  static constexpr bool IsByte(TokenId id) { return id >= 0 && id < 256; }
  static constexpr bool IsSpecial(TokenId id) {
    return id >= kPad && id < kSize;
  }
};

TokenIds Encode(std::string_view text);

// Specials render as nothing. Throws kOutOfRange for ids outside the vocab.
std::string Decode(std::span<const TokenId> ids);

struct TrainingTriple {
  std::string question;
  std::string accepted;
  std::string rejected;
  std::optional<std::string> scenario;
};

struct LabeledResponse {
  std::string question;
  std::string answer;
  int label = 1;  // 1 = harmless, 0 = harmful
};

// Parses one JSONL line. `line_number` is 1-based and only used in messages.
TrainingTriple ParseTripleLine(std::string_view line, std::size_t line_number);

// Blank lines are skipped; any malformed line aborts with kParse naming the
// line.
std::vector<TrainingTriple> ReadTriples(std::istream& in);
std::vector<TrainingTriple> LoadTriples(const std::filesystem::path& path);

void WriteTriples(std::span<const TrainingTriple> triples, std::ostream& out);

// Each triple becomes (q, accepted, 1) followed by (q, rejected, 0).
std::vector<LabeledResponse> ExpandTriples(
    std::span<const TrainingTriple> triples);

}  // namespace protector

#endif  // PROTECTOR_TEXT_H_
