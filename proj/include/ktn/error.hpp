#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ktn {

/// Tensor extents or channel counts do not line up.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// A caller broke a documented precondition (index range, mismatched shape).
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Geometric input outside the domain of a projection.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// Malformed binary input. `offset()` is the byte position where parsing
/// stopped.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace ktn
