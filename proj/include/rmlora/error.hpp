// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rmlora {

/// Input rejected by a precondition check (shape mismatch, out-of-range rank, ...).
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Numerical failure: non-convergence, divergence, non-finite values.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what, std::size_t iterations = 0)
      : std::runtime_error(what), iterations_(iterations) {}

  std::size_t iterations() const noexcept { return iterations_; }

 private:
  std::size_t iterations_;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A construction the library does not implement (e.g. multi-layer partition groups).
class Unsupported : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

}  // namespace rmlora
