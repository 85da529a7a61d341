#pragma once

#include <stdexcept>
#include <string>

namespace semrec {

// Contract violations: bad shapes, bad configs, malformed files. CLI exit code 2.
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

// Numeric failure: NaN/Inf in an op output, training loss blow-up. CLI exit code 3.
class DivergenceError : public std::runtime_error {
 public:
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace semrec
