#pragma once

#include <stdexcept>
#include <string>

namespace gne {

/// The constraints admit no point (e.g. an opponent profile that exhausts
/// the shared capacity, or an instance without a feasible collective).
class InfeasibleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A QP came back with a non-optimal status where optimality was required.
class SolverError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid user-facing configuration. `field()` holds the offending path,
/// e.g. "gamma0" or "d[3]".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error(field.empty() ? what : field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace gne
