// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ca3d {

// Values line up with the CLI exit codes and the C API status codes.
enum class ErrorCode : int {
  kIo = 1,
  kUsage = 2,
  kNumerical = 3,
  kVerification = 4,
  kShape = 5,
  kFormat = 6,
  kBadMagic = 7,
  kTruncated = 8,
  kDuplicateName = 9,
  kUnsupportedVersion = 10,
  kChecksum = 11,
  kInvalidArgument = 12,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

}  // namespace ca3d
