#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace tsae {

// Shapes of operands disagree.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An index, step or length is outside its admissible range.
class RangeError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A value is structurally invalid (missing BOS, bad config, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Corrupt, truncated or wrong-version file.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A quantity has no defined value for the given input.
class UndefinedError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Training produced a non-finite loss.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t step, std::size_t model = 0)
      : std::runtime_error(what + " at step " + std::to_string(step)), message_(what), step_(step), model_(model) {}
  std::size_t step() const noexcept { return step_; }
  /// Index of the failing model in a group run.
  std::size_t model() const noexcept { return model_; }
  /// what() without the step suffix.
  const std::string& message() const noexcept { return message_; }

 private:
  std::string message_;
  std::size_t step_;
  std::size_t model_;
};

}  // namespace tsae
