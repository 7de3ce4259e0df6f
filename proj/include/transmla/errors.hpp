#pragma once

#include <stdexcept>
#include <string>

namespace transmla {

/// A contract or invariant on the math was violated (bad shapes, non-finite
/// values, non-orthogonal rotations, ...). The CLI maps this to exit code 1.
class InvariantError : public std::runtime_error {
public:
  explicit InvariantError(const std::string& what) : std::runtime_error(what) {}
};

/// Reading or writing a file failed. The CLI maps this to exit code 2.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw InvariantError(msg);
}

}  // namespace transmla
