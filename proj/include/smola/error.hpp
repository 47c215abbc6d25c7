/* Copyright 2026 The smola Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace smola {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  bool operator==(const Shape&) const = default;

  std::string str() const {
    return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
  }
};

/// Raised when operand shapes are incompatible. Carries both offending shapes.
class ShapeError : public Error {
 public:
  ShapeError(const std::string& op, Shape lhs, Shape rhs)
      : Error(op + ": incompatible shapes " + lhs.str() + " and " + rhs.str()),
        lhs_(lhs),
        rhs_(rhs) {}

  explicit ShapeError(const std::string& what) : Error(what) {}

  Shape lhs() const { return lhs_; }
  Shape rhs() const { return rhs_; }

 private:
  Shape lhs_{};
  Shape rhs_{};
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Jacobi sweeps exhausted before the off-diagonal mass fell below tolerance.
class ConvergenceError : public Error {
 public:
  ConvergenceError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}

  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::size_t step)
      : Error(what), step_(step) {}

  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Malformed or unreadable serialized data.
class FormatError : public Error {
 public:
  using Error::Error;
};

}  // namespace smola
