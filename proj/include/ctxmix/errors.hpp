#pragma once

#include <stdexcept>
#include <string>

namespace ctxmix {

// Invalid argument values (bad sizes, out-of-range ids, empty input).
struct ArgumentError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Tensor shape disagreement; the message names both shapes.
struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Non-finite values produced where finite math was expected.
struct NumericError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Trace/weights (or other paired state) built from different sources.
struct ConsistencyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// File parsing and serialization failures.
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

} // namespace ctxmix
