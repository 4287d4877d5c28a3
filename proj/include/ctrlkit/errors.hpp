#pragma once

#include <stdexcept>
#include <string>

namespace ctrlkit {

// Shape disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Token id or target outside its valid range.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// NaN / infinity where finite values are required.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Corrupt or truncated file, bad magic, unsupported version.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Sequence longer than the model context.
struct ContextError : std::length_error {
  using std::length_error::length_error;
};

// Invalid hyperparameter or configuration value.
struct ParameterError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Control code that is not in the registry (or has the wrong kind).
struct UnknownCodeError : std::invalid_argument {
  explicit UnknownCodeError(const std::string& code)
      : std::invalid_argument("unknown control code: " + code), code_(code) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// Training diverged.
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace ctrlkit
