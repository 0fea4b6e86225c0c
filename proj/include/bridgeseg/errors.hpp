#pragma once

#include <stdexcept>
#include <string>

namespace bridgeseg {

// Base for everything thrown by this library, so callers can catch one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement in a graph primitive.
struct ShapeError : Error {
    using Error::Error;
};

// A precondition of a documented operation was violated by the caller.
struct ContractError : Error {
    using Error::Error;
};

// Non-finite values or degenerate quantities (zero-norm cosine, empty mean).
struct NumericError : Error {
    using Error::Error;
};

// Malformed or truncated binary files, bad magic/version, manifest mismatch.
struct FormatError : Error {
    using Error::Error;
};

// Bad keys or values in run configuration.
struct ConfigError : Error {
    using Error::Error;
};

// Training code touched ground-truth labels of an unlabeled domain.
struct LabelSecrecyError : Error {
    using Error::Error;
};

} // namespace bridgeseg
