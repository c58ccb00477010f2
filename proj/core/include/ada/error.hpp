// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace ada {

/// Base class for all errors raised by the library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not line up (matmul inner dims, elementwise shapes, ...).
struct ShapeError : Error {
    using Error::Error;
};

/// Mathematically invalid input: log of a non-positive value, softmax with an
/// empty support, AUC on a single-class label set, a depth plan outside 1..L.
struct DomainError : Error {
    using Error::Error;
};

/// Invalid construction-time settings (k out of range, D not divisible by the
/// head count, kernel wider than the field count, bad target loads, ...).
struct ConfigError : Error {
    using Error::Error;
};

/// Malformed or inconsistent input data (bad rows, arity mismatch, empty fit
/// corpus, schema mismatch between pipeline and dataset).
struct DataError : Error {
    using Error::Error;
};

/// Unreadable, corrupt, or version-incompatible checkpoint/pipeline files.
struct CheckpointError : Error {
    using Error::Error;
};

/// Training produced a non-finite loss or another unrecoverable numeric state.
struct NumericError : Error {
    using Error::Error;
};

/// Violated internal invariant (dispatch/combine bookkeeping mismatch).
struct InternalError : Error {
    using Error::Error;
};

}  // namespace ada
