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


#include "protector/synthetic.h"

#include <gtest/gtest.h>

#include <cctype>
#include <set>
#include <sstream>

namespace protector {
namespace {

// Markers may open a sentence, so compare case-folded.
bool HasMarker(std::string s) {
  for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  for (const auto& m : SyntheticHarmMarkers()) {
    if (s.find(m) != std::string::npos) return true;
  }
  return false;
}

TEST(SyntheticTest, MarkersOnlyInRejected) {
  const auto triples = GenerateSyntheticTriples(2000, 7);
  ASSERT_EQ(triples.size(), 2000u);
  for (const auto& t : triples) {
    EXPECT_FALSE(HasMarker(t.accepted)) << t.accepted;
    EXPECT_FALSE(HasMarker(t.question)) << t.question;
    EXPECT_TRUE(HasMarker(t.rejected)) << t.rejected;
    EXPECT_LE(t.accepted.size(), 56u);
    EXPECT_LE(t.rejected.size(), 56u);
    EXPECT_NE(t.accepted, t.rejected);
    ASSERT_TRUE(t.scenario.has_value());
  }
}

TEST(SyntheticTest, DeterministicPerSeed) {
  std::ostringstream a, b, c;
  WriteTriples(GenerateSyntheticTriples(50, 3), a);
  WriteTriples(GenerateSyntheticTriples(50, 3), b);
  WriteTriples(GenerateSyntheticTriples(50, 4), c);
  EXPECT_EQ(a.str(), b.str());
  EXPECT_NE(a.str(), c.str());
}

TEST(SyntheticTest, BenchmarkFixtureShape) {
  const auto f = MakeBenchmarkFixture(11);
  ASSERT_EQ(f.prompts.size(), 52u);
  std::set<std::string> ids, texts;
  for (const auto& p : f.prompts) {
    ids.insert(p.id);
    texts.insert(p.text_prompt);
    EXPECT_EQ(p.image_ref.has_value(), p.modality != Modality::kTextOnly);
    ASSERT_TRUE(f.responses.count(p.text_prompt));
    EXPECT_TRUE(HasMarker(f.responses.at(p.text_prompt)));
  }
  EXPECT_EQ(ids.size(), 52u);
  EXPECT_EQ(texts.size(), 52u);
}

}  // namespace
}  // namespace protector
