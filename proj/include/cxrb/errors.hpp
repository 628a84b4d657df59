#pragma once

#include <stdexcept>
#include <string>

namespace cxrb {

/// Base of every error the library throws.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Tensor or image dimensions do not fit the operation.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// API misuse: non-scalar loss, missing gradients, bad call order.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Invalid model, phantom or training configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or truncated input file.
class FormatError : public Error {
public:
    using Error::Error;
};

/// A workload that would not fit in memory.
class ResourceError : public Error {
public:
    using Error::Error;
};

/// A forward op produced NaN or Inf.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace cxrb
