// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace xfus {

/// Every failure mode the library reports. Tests match on the kind, not the
/// message text.
enum class ErrorKind {
  InvalidArgument,
  ShapeMismatch,
  KeyMismatch,
  NonFinite,
  Io,
  BadMagic,
  BadVersion,
  Truncated,
  OverlappingExtents,
  BadHeader,
  EmptyCheckpoint,
  MalformedLine,
  MixedDomainBatch,
  Divergence,
  RewardCollapse,
  MissingReference,
  FingerprintMismatch,
  SplitContamination,
  StageFailure,
};

const char* to_string(ErrorKind k);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg)
      : std::runtime_error(std::string(to_string(kind)) + ": " + msg), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
  throw Error(kind, msg);
}

}  // namespace xfus
