#pragma once

#include <stdexcept>
#include <string>

namespace unifuse {

/// Base class for every error raised by the library. The CLI maps the
/// concrete subclasses onto process exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Sequence too short / too long for an operation (names the op and modality).
class LengthError : public Error {
public:
    using Error::Error;
};

/// Tensor shape disagreement.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration or argument.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// A task was requested on inputs that lack a required modality, or
/// per-modality sequences disagree in length.
class InputError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// NaN/Inf encountered where a finite value is required.
class NumericError : public Error {
public:
    using Error::Error;
};

}  // namespace unifuse
