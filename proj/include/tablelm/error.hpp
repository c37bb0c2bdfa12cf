// Copyright (c) 2026 The tablelm Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace tablelm {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class EmptyInputError : public Error {
 public:
  using Error::Error;
};

class ConstraintViolation : public Error {
 public:
  using Error::Error;
};

class IndexOutOfRange : public Error {
 public:
  using Error::Error;
};

/// An artifact was produced against different inputs than the ones supplied.
class HashMismatch : public Error {
 public:
  using Error::Error;
};

class SolverCapExceeded : public Error {
 public:
  using Error::Error;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace tablelm
