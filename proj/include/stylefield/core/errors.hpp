#pragma once

#include <stdexcept>
#include <string>

namespace stylefield {

/// Malformed or unrecognised on-disk data (bad magic, truncated payload, wrong format tag).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Inputs that are individually valid but disagree with each other.
class ConsistencyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented precondition or invariant.
class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// An operation was called before the object it depends on was ready.
class StateError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
inline void require(bool cond, const std::string& what) {
  if (!cond) throw ValidationError(what);
}
}  // namespace detail

}  // namespace stylefield
