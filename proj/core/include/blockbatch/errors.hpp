// Copyright (C) 2026 The BlockBatch Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace blockbatch {

// All library failures derive from Error so callers can catch one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or dimensions.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

// Window or index outside the sequence.
class RangeError : public Error {
 public:
  using Error::Error;
};

// Object is not in a state that supports the request (e.g. invalid cache rows).
class StateError : public Error {
 public:
  using Error::Error;
};

// Scheduler exceeded its forward-call budget.
class RunawayError : public Error {
 public:
  using Error::Error;
};

// Analysis input does not contain enough data for the requested estimate.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Geometry is degenerate (zero anchor, zero perturbation).
class DegenerateError : public Error {
 public:
  using Error::Error;
};

}  // namespace blockbatch
