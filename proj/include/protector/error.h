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

#ifndef PROTECTOR_ERROR_H_
#define PROTECTOR_ERROR_H_

#include <stdexcept>
#include <string>
#include <string_view>

namespace protector {

enum class ErrorCode {
  kInvalidArgument,
  kOutOfRange,
  kParse,
  kContextOverflow,
  kDegenerateMask,
  kEmptyContinuation,
  kDivergence,
  kDegenerateDataset,
  kConfig,
  kNotFound,
  kExhausted,
  kUpstream,
  kCapability,
  kJudge,
  kBusy,
  kIo,
  // Checkpoint failures.
  kFormat,
  kVersion,
  kTruncated,
  kManifest,
  kKindMismatch,
};

std::string_view ErrorCodeName(ErrorCode code);

// The single exception type thrown by this library. The code lets callers
// (the service, the CLI, tests) branch on the failure class.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace protector

#endif  // PROTECTOR_ERROR_H_
