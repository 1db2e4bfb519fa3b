#pragma once

#include <stdexcept>
#include <string>

namespace qpcnet {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A physical or numerical parameter is outside its documented domain.
class InvalidParameter : public Error {
public:
    using Error::Error;
};

/// Tensor or batch shapes do not agree.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A config file failed validation; `field()` names the offending entry.
class ConfigError : public Error {
public:
    ConfigError(std::string field, const std::string& message)
        : Error(field + ": " + message), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

/// Binary file decoding failure (datasets and checkpoints).
class FormatError : public Error {
public:
    enum class Kind { BadMagic, BadVersion, TruncatedPayload, SizeMismatch, Io };

    FormatError(Kind kind, const std::string& message) : Error(message), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// Deterministic integrator lost trace or produced non-finite values.
class IntegrationError : public Error {
public:
    using Error::Error;
};

/// Bayesian weights vanished numerically.
class UnderflowError : public Error {
public:
    UnderflowError(std::size_t bin, const std::string& message)
        : Error(message + " (bin " + std::to_string(bin) + ")"), bin_(bin) {}
    std::size_t bin() const noexcept { return bin_; }

private:
    std::size_t bin_;
};

/// Operation not defined for the trace mode it was given.
class UnsupportedMode : public Error {
public:
    using Error::Error;
};

}  // namespace qpcnet
