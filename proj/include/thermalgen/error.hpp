#pragma once

#include <stdexcept>
#include <string>

namespace thermalgen {

/// Base class for every error raised by the library. `exit_code()` is what the
/// command-line tool returns when the error escapes a subcommand.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

/// Shapes that do not line up (matmul inner dims, broadcast, patch sizes).
class DimensionError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

/// A scalar argument outside its mathematical domain (e.g. t outside [0, 1]).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Caller broke an API contract (backward on a non-scalar, missing grads, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

class LookupError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class ConflictError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class ConfigError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

class DataError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

/// Non-finite values, overflow, or a covariance that is not positive semidefinite.
class NumericalError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

}  // namespace thermalgen
