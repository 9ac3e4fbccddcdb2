#pragma once

#include <stdexcept>
#include <string>

namespace remask {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A primitive produced NaN/Inf, or a loss went non-finite.
struct NonFiniteError : Error {
  using Error::Error;
};

// Optimizer saw a non-finite gradient; message names the parameter.
struct DivergenceError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

// Checkpoint/trace file is truncated, checksum-mismatched, or newer-versioned.
struct CorruptFileError : Error {
  using Error::Error;
};

}  // namespace remask
