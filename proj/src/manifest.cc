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

#include "protector/manifest.h"

#include <openssl/evp.h>

#include <fstream>
#include <memory>

#include "fmt/core.h"
#include "protector/error.h"

namespace protector {
namespace {

class Sha256 {
 public:
  Sha256() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
    if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
      throw Error(ErrorCode::kIo, "sha256 init failed");
    }
  }
  void Update(std::string_view data) {
    EVP_DigestUpdate(ctx_.get(), data.data(), data.size());
  }
  std::string HexDigest() {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx_.get(), digest, &len);
    std::string out;
    for (unsigned int i = 0; i < len; ++i) out += fmt::format("{:02x}", digest[i]);
    return out;
  }

 private:
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

void HashFileInto(Sha256& hash, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw Error(ErrorCode::kIo, fmt::format("cannot read {}", path.string()));
  }
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    hash.Update({buf, static_cast<std::size_t>(in.gcount())});
  }
}

}  // namespace

std::string Sha256Hex(std::string_view data) {
  Sha256 hash;
  hash.Update(data);
  return hash.HexDigest();
}

std::string Sha256File(const std::filesystem::path& path) {
  Sha256 hash;
  HashFileInto(hash, path);
  return hash.HexDigest();
}

nlohmann::json ManifestToJson(const RunManifest& m) {
  Sha256 data_hash;
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& p : m.inputs) {
    const std::string h = Sha256File(p);
    data_hash.Update(h);
    inputs.push_back({{"path", p.string()}, {"sha256", h}});
  }
  nlohmann::json outputs = nlohmann::json::array();
  for (const auto& p : m.outputs) {
    outputs.push_back({{"path", p.string()}, {"sha256", Sha256File(p)}});
  }
  return {{"command", m.command},
          {"argv", m.argv},
          {"seed", m.seed},
          {"config", m.config},
          {"config_hash", Sha256Hex(m.config.dump())},
          {"data_hash", data_hash.HexDigest()},
          {"inputs", std::move(inputs)},
          {"outputs", std::move(outputs)}};
}

void WriteRunManifest(const RunManifest& manifest,
                      const std::filesystem::path& path) {
  const std::string text = ManifestToJson(manifest).dump(
      2, ' ', false, nlohmann::json::error_handler_t::replace);
  std::ofstream out(path, std::ios::binary);
  if (!out || !(out << text << '\n')) {
    throw Error(ErrorCode::kIo,
                fmt::format("cannot write manifest {}", path.string()));
  }
}

}  // namespace protector
