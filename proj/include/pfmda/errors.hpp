#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pfmda {

/// Shape or extent disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// NaN/Inf produced by a forward operation, or training divergence.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad or missing configuration (config file, checkpoint, dataset layout).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Phantom geometry could not be placed within the retry budget.
class GenerationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed tensor container. Carries the byte offset where decoding failed.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"), message_(what), offset_(offset) {}

    std::size_t offset() const noexcept { return offset_; }
    const std::string& message() const noexcept { return message_; }

private:
    std::string message_;
    std::size_t offset_;
};

/// Metric whose value is mathematically undefined for the given input.
class UndefinedMetricError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

}  // namespace pfmda
