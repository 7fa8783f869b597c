#pragma once

#include <stdexcept>

namespace g2kit {

/// Base class for all g2kit errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid arguments, configuration, or input files (CLI exit code 2).
struct ValidationError : Error {
  using Error::Error;
};

/// Rate generator has no unique stationary state.
struct DegenerateSystemError : Error {
  using Error::Error;
};

/// Inversion target is not realizable by any physical rate tuple.
struct NoSolutionError : Error {
  using Error::Error;
};

/// Iterative solver hit its cap without meeting tolerances (CLI exit code 3).
struct ConvergenceError : Error {
  using Error::Error;
};

/// Curve carries no usable parameter information (e.g. flat g2 == 1).
struct UnidentifiableError : Error {
  using Error::Error;
};

/// No detection efficiency makes all power points invertible.
struct CalibrationError : Error {
  using Error::Error;
};

/// File or stream I/O failure (CLI exit code 4).
struct IoError : Error {
  using Error::Error;
};

}  // namespace g2kit
