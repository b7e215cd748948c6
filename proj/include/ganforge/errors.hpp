#pragma once

#include <stdexcept>
#include <string>

namespace ganforge {

// Base class for everything thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad argument values: non-positive stride, slope outside (0,1), bad flags.
class ArgumentError : public Error {
public:
    using Error::Error;
};

// Tensor extents do not line up (conv channel mismatch, broadcast failure).
class ShapeError : public Error {
public:
    using Error::Error;
};

// Requested geometry cannot be built (transposed conv extent <= 0,
// resolution not reachable by the layer ladder).
class GeometryError : public Error {
public:
    using Error::Error;
};

// Math domain violations: log of a non-positive value.
class DomainError : public Error {
public:
    using Error::Error;
};

// Backward pass asked about a tensor the tape never produced.
class TraceError : public Error {
public:
    using Error::Error;
};

// Not enough samples to fit statistics (batch norm, covariance).
class StatsError : public Error {
public:
    using Error::Error;
};

// NaN/Inf surfaced by an operation, or a numeric abort during training.
class NumericError : public Error {
public:
    using Error::Error;
};

// Dataset problems: empty directory, no decodable images.
class DataError : public Error {
public:
    using Error::Error;
};

// Filesystem failures outside of dataset semantics.
class IoError : public Error {
public:
    using Error::Error;
};

// Bad magic, version, or truncated checkpoint container.
class CheckpointError : public Error {
public:
    using Error::Error;
};

}  // namespace ganforge
