#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cmegrpo {

// Invalid input or configuration. The CLI maps it to exit code 2.
class DomainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Generator and verifier views of a response disagree on the text.
class AlignmentError : public DomainError {
 public:
  AlignmentError(const std::string& what, std::size_t offset)
      : DomainError(what), offset_(offset) {}

  // First character offset at which the two texts differ.
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

// Non-finite loss or gradient during training. The CLI maps it to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace cmegrpo
