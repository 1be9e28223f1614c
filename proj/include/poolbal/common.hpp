// Copyright 2026 The poolbal Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <stdexcept>
#include <string>

namespace poolbal {

inline constexpr const char* kVersion = "0.1.0";

// Base class for every error raised by the library. The CLI maps these onto
// exit codes: configuration and input problems exit 1, solver feasibility and
// convergence failures exit 2.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed input file (CSV or JSON config). Messages carry the offending
// row or column so users can locate the problem.
class ParseError : public Error {
 public:
  using Error::Error;
};

// Structurally valid input that violates a requirement (zero-control stratum,
// rank-deficient design, empty target, constraint violation).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// Bad option combination or out-of-range configuration value.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// The balance constraints admit no nonnegative solution; the dual diverges.
// The message names the feature with the largest dual multiplier.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// Iteration budget exhausted before reaching tolerance.
class ConvergenceError : public Error {
 public:
  using Error::Error;
};

// Propensity score of 1 on a control unit; odds weights are undefined.
class OverlapError : public Error {
 public:
  using Error::Error;
};

}  // namespace poolbal
