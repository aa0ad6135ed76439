// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace spflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's precondition (bad shape, k out of range, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Malformed or truncated input data (files, checkpoints, headers).
class DataError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value showed up during a computation.
class NumericError : public Error {
 public:
  explicit NumericError(std::string stage)
      : Error("non-finite value in stage '" + stage + "'"), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace spflow
