// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace dpatd {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operand shapes do not agree.
struct DimensionError : Error {
  using Error::Error;
};

// backward() called on a non-scalar.
struct RankError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct InputError : Error {
  using Error::Error;
};

// Position or sequence length beyond a learned table.
struct CapacityError : Error {
  using Error::Error;
};

struct ReconstructionError : Error {
  using Error::Error;
};

struct SequenceTooShortError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct MetricError : Error {
  using Error::Error;
};

}  // namespace dpatd
