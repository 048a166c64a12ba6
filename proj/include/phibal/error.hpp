// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace phibal {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform for a primitive.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Input lies outside the domain of a potential or its gradient map.
/// `index()` names the offending coordinate when one exists.
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& what, std::size_t index = npos)
      : Error(what), index_(index) {}

  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  std::size_t index() const noexcept { return index_; }

 private:
  std::size_t index_;
};

/// Bad configuration: out-of-range parameter, unknown key, malformed token.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// A NaN or infinity appeared where a finite value was required.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace phibal
