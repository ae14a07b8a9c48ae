#pragma once

#include <stdexcept>
#include <string>

namespace rairl {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Precondition violated by the caller (bad shape, unknown id, empty input).
class InvalidInput : public Error {
public:
    using Error::Error;
};

/// A value that must be finite was not.
class NumericalError : public Error {
public:
    using Error::Error;
};

/// Input is well-formed but statistically degenerate (zero variance, empty bucket).
class DegenerateInput : public Error {
public:
    using Error::Error;
};

/// Request exceeds a configured capability, e.g. an enumeration cap.
class Unsupported : public Error {
public:
    using Error::Error;
};

/// A file could not be parsed.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A file was written by an incompatible format version.
class VersionError : public Error {
public:
    using Error::Error;
};

/// Configuration rejected by schema validation.
class ConfigError : public Error {
public:
    using Error::Error;
};

}  // namespace rairl
