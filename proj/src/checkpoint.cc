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

#include "protector/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "fmt/core.h"
#include "protector/error.h"

namespace protector {
namespace {

template <typename T>
void WriteLe(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  auto bits = std::bit_cast<std::conditional_t<sizeof(T) == 8, std::uint64_t,
                                               std::uint32_t>>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  }
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

void ReadExact(std::istream& in, char* dst, std::size_t n, const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw Error(ErrorCode::kTruncated,
                fmt::format("checkpoint truncated while reading {}", what));
  }
}

template <typename T>
T ReadLe(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(T)];
  ReadExact(in, reinterpret_cast<char*>(bytes), sizeof(T), what);
  using Bits =
      std::conditional_t<sizeof(T) == 8, std::uint64_t, std::uint32_t>;
  Bits bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bits |= static_cast<Bits>(bytes[i]) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

}  // namespace

void WriteCheckpoint(const Checkpoint& checkpoint, std::ostream& out) {
  nlohmann::json header = checkpoint.extra;
  header["kind"] = checkpoint.kind;
  header["config"] = ModelConfigToJson(checkpoint.config);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : checkpoint.tensors) {
    manifest.push_back({{"name", t.name},
                        {"shape", t.tensor.shape()},
                        {"offset", offset}});
    offset += t.tensor.size() * sizeof(double);
  }
  header["tensors"] = std::move(manifest);
  const std::string header_text = header.dump();

  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  WriteLe<std::uint32_t>(out, kCheckpointVersion);
  WriteLe<std::uint64_t>(out, header_text.size());
  out.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
  for (const auto& t : checkpoint.tensors) {
    for (double v : t.tensor.values()) WriteLe<double>(out, v);
  }
  if (!out) throw Error(ErrorCode::kIo, "checkpoint write failed");
}

void SaveCheckpoint(const Checkpoint& checkpoint,
                    const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot open {} for writing", path.string()));
  }
  WriteCheckpoint(checkpoint, out);
}

Checkpoint ReadCheckpoint(std::istream& in) {
  char magic[4];
  ReadExact(in, magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw Error(ErrorCode::kFormat, "bad checkpoint magic (expected TLMC)");
  }
  const auto version = ReadLe<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::kVersion,
                fmt::format("checkpoint version {} unsupported (expected {})",
                            version, kCheckpointVersion));
  }
  const auto header_len = ReadLe<std::uint64_t>(in, "header length");
  if (header_len > (std::uint64_t{1} << 30)) {
    throw Error(ErrorCode::kFormat, "implausible checkpoint header length");
  }
  std::string header_text(header_len, '\0');
  ReadExact(in, header_text.data(), header_text.size(), "header");

  nlohmann::json header;
  Checkpoint checkpoint;
  try {
    header = nlohmann::json::parse(header_text);
    checkpoint.kind = header.at("kind").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kFormat,
                fmt::format("checkpoint header: {}", e.what()));
  }
  if (!header.contains("config") || !header.contains("tensors") ||
      !header["tensors"].is_array()) {
    throw Error(ErrorCode::kFormat, "checkpoint header lacks config/tensors");
  }
  checkpoint.config = ModelConfigFromJson(header["config"]);

  std::uint64_t expected_offset = 0;
  for (const auto& entry : header["tensors"]) {
    std::string name;
    std::vector<std::size_t> shape;
    std::uint64_t offset = 0;
    try {
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<std::vector<std::size_t>>();
      offset = entry.at("offset").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kManifest,
                  fmt::format("bad manifest entry: {}", e.what()));
    }
    if (offset != expected_offset) {
      throw Error(ErrorCode::kManifest,
                  fmt::format("tensor {} at offset {}, expected {}", name,
                              offset, expected_offset));
    }
    Tensor tensor(shape);
    for (double& v : tensor.values()) v = ReadLe<double>(in, "tensor data");
    expected_offset += tensor.size() * sizeof(double);
    checkpoint.tensors.push_back({std::move(name), std::move(tensor)});
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw Error(ErrorCode::kManifest,
                "checkpoint has trailing bytes beyond its manifest");
  }
  header.erase("kind");
  header.erase("config");
  header.erase("tensors");
  checkpoint.extra = std::move(header);
  return checkpoint;
}

Checkpoint LoadCheckpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIo, fmt::format("cannot open {}", path.string()));
  }
  try {
    return ReadCheckpoint(in);
  } catch (const Error& e) {
    throw Error(e.code(), fmt::format("{}: {}", path.string(), e.what()));
  }
}

void ExpectKind(const Checkpoint& checkpoint, const std::string& expected) {
  if (checkpoint.kind != expected) {
    throw Error(ErrorCode::kKindMismatch,
                fmt::format("checkpoint kind '{}' where '{}' was expected",
                            checkpoint.kind, expected));
  }
}

void SaveTinyLm(const TinyLm& model, const std::filesystem::path& path) {
  SaveCheckpoint({kKindTinyLm, model.config(), nlohmann::json::object(),
                  model.params()},
                 path);
}

TinyLm LoadTinyLm(const std::filesystem::path& path) {
  Checkpoint checkpoint = LoadCheckpoint(path);
  ExpectKind(checkpoint, kKindTinyLm);
  return TinyLm(checkpoint.config, std::move(checkpoint.tensors));
}

}  // namespace protector
