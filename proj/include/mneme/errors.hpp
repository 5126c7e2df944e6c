#pragma once

#include <stdexcept>
#include <string>

namespace mneme {

// Shape or rank mismatch between tensor operands.
struct shape_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed or out-of-range caller input (corpus records, token ids, spans).
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Operation invoked on an object in the wrong state or on the wrong variant.
struct contract_error : std::logic_error {
  using std::logic_error::logic_error;
};

// Invalid configuration values or field combinations.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Unreadable, truncated, or version-mismatched serialized artifacts.
struct format_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN/Inf escaped a forward computation.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace mneme
