// Copyright (c) 2026, The mixcpt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace mixcpt {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not satisfy an op's contract.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A token id or coordinate is out of range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A configuration or hyper-parameter value is invalid.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied data violates a precondition (empty field, overlong prompt).
class InputError : public Error {
 public:
  using Error::Error;
};

/// A value falls outside the mathematical domain of an op (e.g. negative probability).
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Binary file could not be decoded (magic, version, truncation, shape).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A text data file could not be parsed.
class ParseError : public Error {
 public:
  using Error::Error;
};

/// Training produced a non-finite loss.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long long step) : Error(what), step_(step) {}
  long long step() const noexcept { return step_; }

 private:
  long long step_;
};

/// Misuse of the autograd graph (non-scalar root, double backward).
class GraphError : public Error {
 public:
  using Error::Error;
};

}  // namespace mixcpt
