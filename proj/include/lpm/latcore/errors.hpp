#pragma once

#include <stdexcept>
#include <string>

namespace lpm {

// Operand shapes do not line up.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A softmax row had no unmasked entry.
class DegenerateRowError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

// A caller broke an operation's precondition (ordering, schedule, duplicates).
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

// Bad or unknown configuration value.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A retained KV entry was requested but is not stored.
class CacheMissError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed external input (files, protocol messages).
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Audio for the current second has not fully arrived.
class UnderrunError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// A client message broke the session protocol; the session keeps running.
class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced NaN or Inf.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace lpm
