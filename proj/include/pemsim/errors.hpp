#pragma once

#include <stdexcept>
#include <string>

namespace pemsim {

/// Bad scenario/config input. The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
  public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

/// A model invariant was violated at runtime (mass loss, negative
/// probabilities beyond float noise, ...). The CLI maps this to exit code 2.
class ModelError : public std::runtime_error {
  public:
    explicit ModelError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace pemsim
