#pragma once

#include <stdexcept>
#include <string>

namespace pnp {

/// Argument outside the mathematical domain of an operation.
class DomainError : public std::domain_error {
public:
  using std::domain_error::domain_error;
};

/// Invalid network or experiment configuration.
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// A computation exceeded a resource budget (event count, memory).
class ResourceError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Records whose phases do not belong to the protocol being sifted.
class ProtocolError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class EmptyKeyError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Interference measurement with no light to measure.
class DegenerateError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

} // namespace pnp
