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

#include "protector/text.h"

#include <fstream>

#include "fmt/core.h"
#include "json.hpp"
#include "protector/error.h"

namespace protector {

std::string_view ErrorCodeName(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument: return "invalid-argument";
    case ErrorCode::kOutOfRange: return "out-of-range";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kContextOverflow: return "context-overflow";
    case ErrorCode::kDegenerateMask: return "degenerate-mask";
    case ErrorCode::kEmptyContinuation: return "empty-continuation";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kDegenerateDataset: return "degenerate-dataset";
    case ErrorCode::kConfig: return "config";
    case ErrorCode::kNotFound: return "not-found";
    case ErrorCode::kExhausted: return "exhausted";
    case ErrorCode::kUpstream: return "upstream";
    case ErrorCode::kCapability: return "capability";
    case ErrorCode::kJudge: return "judge";
    case ErrorCode::kBusy: return "busy";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kVersion: return "version";
    case ErrorCode::kTruncated: return "truncated";
    case ErrorCode::kManifest: return "manifest";
    case ErrorCode::kKindMismatch: return "kind-mismatch";
  }
  return "unknown";
}

TokenIds Encode(std::string_view text) {
  TokenIds ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(static_cast<TokenId>(c));
  return ids;
}

std::string Decode(std::span<const TokenId> ids) {
  std::string out;
  out.reserve(ids.size());
  for (TokenId id : ids) {
    if (id < 0 || id >= Vocab::kSize) {
      throw Error(ErrorCode::kOutOfRange,
                  fmt::format("token id {} outside vocabulary of size {}", id,
                              Vocab::kSize));
    }
    if (Vocab::IsByte(id)) out.push_back(static_cast<char>(id));
  }
  return out;
}

namespace {

std::string RequiredString(const nlohmann::json& obj, const char* key,
                           std::size_t line_number) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: missing '{}'", line_number, key));
  }
  if (!it->is_string()) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: '{}' must be a string", line_number, key));
  }
  return it->get<std::string>();
}

}  // namespace

TrainingTriple ParseTripleLine(std::string_view line, std::size_t line_number) {
  nlohmann::json obj;
  try {
    obj = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: invalid JSON ({})", line_number, e.what()));
  }
  if (!obj.is_object()) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: expected a JSON object", line_number));
  }
  TrainingTriple triple;
  triple.question = RequiredString(obj, "question", line_number);
  triple.accepted = RequiredString(obj, "accepted", line_number);
  triple.rejected = RequiredString(obj, "rejected", line_number);
  if (auto it = obj.find("scenario"); it != obj.end() && !it->is_null()) {
    if (!it->is_string()) {
      throw Error(ErrorCode::kParse,
                  fmt::format("line {}: 'scenario' must be a string",
                              line_number));
    }
    triple.scenario = it->get<std::string>();
  }
  if (triple.question.empty() || triple.accepted.empty()) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: question and accepted must be non-empty",
                            line_number));
  }
  if (triple.accepted == triple.rejected) {
    throw Error(ErrorCode::kParse,
                fmt::format("line {}: accepted and rejected are identical",
                            line_number));
  }
  return triple;
}

std::vector<TrainingTriple> ReadTriples(std::istream& in) {
  std::vector<TrainingTriple> triples;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    triples.push_back(ParseTripleLine(line, line_number));
  }
  return triples;
}

std::vector<TrainingTriple> LoadTriples(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open triples file {}", path.string()));
  }
  return ReadTriples(in);
}

void WriteTriples(std::span<const TrainingTriple> triples, std::ostream& out) {
  for (const auto& t : triples) {
    nlohmann::json obj = {{"question", t.question},
                          {"accepted", t.accepted},
                          {"rejected", t.rejected}};
    if (t.scenario) obj["scenario"] = *t.scenario;
    out << obj.dump() << '\n';
  }
}

std::vector<LabeledResponse> ExpandTriples(
    std::span<const TrainingTriple> triples) {
  std::vector<LabeledResponse> records;
  records.reserve(triples.size() * 2);
  for (const auto& t : triples) {
    records.push_back({t.question, t.accepted, 1});
    records.push_back({t.question, t.rejected, 0});
  }
  return records;
}

}  // namespace protector
