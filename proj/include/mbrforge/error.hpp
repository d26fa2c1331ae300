// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mbrforge {

/// Failure category. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
  Usage = 2,
  Data = 3,
  Bridge = 4,
  Io = 5,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::Usage, what) {}
};

/// Malformed or inconsistent input data.
class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::Data, what) {}
};

/// Parallel inputs whose lengths disagree.
class AlignmentError : public DataError {
 public:
  explicit AlignmentError(const std::string& what) : DataError(what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorKind::Io, what) {}
};

class BridgeError : public Error {
 public:
  enum class Reason { Spawn, Protocol, Crash, Timeout };

  BridgeError(Reason reason, const std::string& what, std::string raw = {})
      : Error(ErrorKind::Bridge, what), reason_(reason), raw_(std::move(raw)) {}

  Reason reason() const noexcept { return reason_; }
  /// Raw scorer output that triggered the failure, if any.
  const std::string& raw_response() const noexcept { return raw_; }

 private:
  Reason reason_;
  std::string raw_;
};

}  // namespace mbrforge
