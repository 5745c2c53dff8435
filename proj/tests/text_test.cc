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

#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "protector/error.h"

namespace protector {
namespace {

ErrorCode CodeOf(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::kIo;
}

TEST(EncodeTest, EmptyAndAscii) {
  EXPECT_TRUE(Encode("").empty());
  EXPECT_EQ(Encode("ab"), (TokenIds{97, 98}));
}

TEST(EncodeTest, HighBytesStayBelow256) {
  const TokenIds ids = Encode("\xc3\xa9");
  EXPECT_EQ(ids, (TokenIds{0xc3, 0xa9}));
}

TEST(DecodeTest, ElidesSpecials) {
  EXPECT_EQ(Decode(TokenIds{97, 98}), "ab");
  EXPECT_EQ(Decode(TokenIds{Vocab::kBos, 104, 105, Vocab::kEos}), "hi");
  EXPECT_EQ(Decode(TokenIds{Vocab::kImage, Vocab::kPad}), "");
}

TEST(DecodeTest, OutOfRange) {
  EXPECT_EQ(CodeOf([] { Decode(TokenIds{300}); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(CodeOf([] { Decode(TokenIds{263}); }), ErrorCode::kOutOfRange);
  EXPECT_EQ(CodeOf([] { Decode(TokenIds{-1}); }), ErrorCode::kOutOfRange);
}

// Random well-formed UTF-8: code points drawn across all encoded lengths,
// surrogates skipped.
std::string RandomUtf8(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> len_dist(0, 40);
  std::uniform_int_distribution<int> width_dist(1, 4);
  std::string s;
  const int n = len_dist(rng);
  for (int i = 0; i < n; ++i) {
    std::uint32_t cp = 0;
    switch (width_dist(rng)) {
      case 1: cp = std::uniform_int_distribution<std::uint32_t>(0, 0x7f)(rng); break;
      case 2: cp = std::uniform_int_distribution<std::uint32_t>(0x80, 0x7ff)(rng); break;
      case 3:
        do {
          cp = std::uniform_int_distribution<std::uint32_t>(0x800, 0xffff)(rng);
        } while (cp >= 0xd800 && cp <= 0xdfff);
        break;
      default:
        cp = std::uniform_int_distribution<std::uint32_t>(0x10000, 0x10ffff)(rng);
    }
    if (cp < 0x80) {
      s += static_cast<char>(cp);
    } else if (cp < 0x800) {
      s += static_cast<char>(0xc0 | (cp >> 6));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    } else if (cp < 0x10000) {
      s += static_cast<char>(0xe0 | (cp >> 12));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    } else {
      s += static_cast<char>(0xf0 | (cp >> 18));
      s += static_cast<char>(0x80 | ((cp >> 12) & 0x3f));
      s += static_cast<char>(0x80 | ((cp >> 6) & 0x3f));
      s += static_cast<char>(0x80 | (cp & 0x3f));
    }
  }
  return s;
}

TEST(EncodeTest, RoundTripRandomUtf8) {
  std::mt19937_64 rng(2024);
  for (int i = 0; i < 1000; ++i) {
    const std::string s = RandomUtf8(rng);
    const TokenIds ids = Encode(s);
    ASSERT_EQ(ids.size(), s.size());
    for (TokenId id : ids) ASSERT_TRUE(Vocab::IsByte(id));
    ASSERT_EQ(Decode(ids), s);
  }
}

TEST(TriplesTest, ParsesOneLine) {
  const TrainingTriple t =
      ParseTripleLine(R"({"question":"q","accepted":"a","rejected":"r"})", 1);
  EXPECT_EQ(t.question, "q");
  EXPECT_EQ(t.accepted, "a");
  EXPECT_EQ(t.rejected, "r");
  EXPECT_FALSE(t.scenario.has_value());
}

TEST(TriplesTest, KeepsOrderAndScenario) {
  std::istringstream in(
      R"({"question":"q1","accepted":"a1","rejected":"r1"})"
      "\n\n"
      R"({"question":"q2","accepted":"a2","rejected":"r2","scenario":"Fraud"})"
      "\n"
      R"({"question":"q3","accepted":"a3","rejected":"r3"})"
      "\n");
  const auto triples = ReadTriples(in);
  ASSERT_EQ(triples.size(), 3u);
  EXPECT_EQ(triples[0].question, "q1");
  EXPECT_EQ(triples[1].scenario, "Fraud");
  EXPECT_EQ(triples[2].rejected, "r3");
}

TEST(TriplesTest, MissingKeyNamesLineAndKey) {
  std::istringstream in(
      R"({"question":"q","accepted":"a","rejected":"r"})"
      "\n"
      R"({"question":"q","accepted":"a"})"
      "\n");
  try {
    ReadTriples(in);
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParse);
    EXPECT_STREQ(e.what(), "line 2: missing 'rejected'");
  }
}

TEST(TriplesTest, RejectsDegenerateTriples) {
  EXPECT_EQ(CodeOf([] {
              ParseTripleLine(R"({"question":"q","accepted":"x","rejected":"x"})", 1);
            }),
            ErrorCode::kParse);
  EXPECT_EQ(CodeOf([] {
              ParseTripleLine(R"({"question":"","accepted":"x","rejected":"y"})", 1);
            }),
            ErrorCode::kParse);
  EXPECT_EQ(CodeOf([] { ParseTripleLine("{not json", 4); }), ErrorCode::kParse);
}

TEST(TriplesTest, WriteReadRoundTrip) {
  const std::vector<TrainingTriple> triples = {
      {"q\n1", "a \"quoted\"", "r", std::nullopt},
      {"q2", "a2", "", std::string("Fraud")}};
  std::stringstream buf;
  WriteTriples(triples, buf);
  const auto back = ReadTriples(buf);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].question, "q\n1");
  EXPECT_EQ(back[0].accepted, "a \"quoted\"");
  EXPECT_EQ(back[1].rejected, "");
  EXPECT_EQ(back[1].scenario, "Fraud");
}

TEST(TriplesTest, ExpandsToBalancedLabels) {
  const std::vector<TrainingTriple> triples = {{"q1", "a1", "r1", {}},
                                               {"q2", "a2", "r2", {}}};
  const auto records = ExpandTriples(triples);
  ASSERT_EQ(records.size(), 4u);
  EXPECT_EQ(records[0].answer, "a1");
  EXPECT_EQ(records[0].label, 1);
  EXPECT_EQ(records[1].answer, "r1");
  EXPECT_EQ(records[1].label, 0);
  EXPECT_EQ(records[3].question, "q2");
}

}  // namespace
}  // namespace protector
