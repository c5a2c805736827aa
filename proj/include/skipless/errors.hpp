#pragma once

#include <stdexcept>
#include <string>

namespace skipless {

/// Base class for every domain error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A dense allocation would exceed the configured element budget.
class BudgetError : public Error {
public:
    using Error::Error;
};

/// The SVD iteration did not converge.
class SvdError : public Error {
public:
    using Error::Error;
};

/// A non-finite value appeared where the contract requires finite input.
class NonFiniteError : public Error {
public:
    using Error::Error;
};

/// Shapes or indices are inconsistent with the model configuration.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// A forward pass produced non-finite activations.
class DivergenceError : public Error {
public:
    DivergenceError(int layer, const std::string& what)
        : Error("divergence at layer " + std::to_string(layer) + ": " + what), layer_(layer) {}

    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

/// Malformed tensor file.
class FormatError : public Error {
public:
    FormatError(std::string field, const std::string& what)
        : Error(what), field_(std::move(field)) {}

    /// Header field or section the failure is attributed to ("n", "magic", "payload", ...).
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

}  // namespace skipless
