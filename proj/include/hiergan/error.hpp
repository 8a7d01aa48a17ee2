// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace hiergan {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A caller supplied an argument outside an operation's contract.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered where finite values are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// File system or container format failure. The message names the file or section.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration; the message lists the offending keys.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace hiergan
