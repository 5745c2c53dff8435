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

#ifndef PROTECTOR_SYNTHETIC_H_
#define PROTECTOR_SYNTHETIC_H_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "protector/eval.h"
#include "protector/text.h"

namespace protector {

// Phrases injected into rejected answers. The keyword judge used by the
// bundled fixtures matches exactly this list.
const std::vector<std::string>& SyntheticHarmMarkers();

// Accepted and rejected answers are built from the same pool of benign
// fragments; the rejected one has a single fragment swapped for a marker, so
// the marker is the only signal. Answers stay under 56 bytes.
std::vector<TrainingTriple> GenerateSyntheticTriples(std::size_t count,
                                                     std::uint64_t seed);

struct BenchmarkFixture {
  std::vector<BenchPrompt> prompts;             // 13 scenarios x 4 modalities
  std::map<std::string, std::string> responses;  // text_prompt -> harmful text
};

BenchmarkFixture MakeBenchmarkFixture(std::uint64_t seed);

}  // namespace protector

#endif  // PROTECTOR_SYNTHETIC_H_
