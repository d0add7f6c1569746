#pragma once

#include <stdexcept>
#include <string>

namespace segnet {

// Error taxonomy shared across the library. The CLI maps these onto
// distinct exit codes, so new failure kinds should subclass one of them.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor shape disagreement; message names both shapes.
class ShapeError : public Error {
public:
    using Error::Error;
};

// A softmax/attention row with no unmasked entry.
class MaskError : public Error {
public:
    using Error::Error;
};

// API precondition violated (non-scalar backward, empty sentence, ...).
class ContractError : public Error {
public:
    using Error::Error;
};

// Stateful decoding machinery driven out of order.
class StateError : public Error {
public:
    using Error::Error;
};

// Invalid configuration field or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

// Malformed or unreadable input data.
class DataError : public Error {
public:
    using Error::Error;
};

// Non-finite values, divergence, failed numeric checks.
class NumericError : public Error {
public:
    using Error::Error;
};

} // namespace segnet
