#pragma once

#include <stdexcept>
#include <string>

namespace retkit {

/// Base class for all retkit errors.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Bad inputs: malformed files, violated invariants, inconsistent shapes.
struct ValidationError : Error {
    using Error::Error;
};

/// Filesystem / stream failures. Messages carry the offending path.
struct IoError : Error {
    using Error::Error;
};

/// Numerical failure (divergence, non-finite values).
struct NumericError : Error {
    using Error::Error;
};

} // namespace retkit
