#pragma once

#include <stdexcept>
#include <string>

namespace quack {

// Shape or rank mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A softmax row with every entry masked out.
class DegenerateRowError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// A weight whose norm is zero where a strictly positive norm is required.
class DegenerateWeightError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Power iteration did not reach the requested tolerance.
class IterationLimitError : public std::runtime_error {
 public:
  IterationLimitError(const std::string& what, double last_estimate)
      : std::runtime_error(what), last_estimate_(last_estimate) {}

  double last_estimate() const noexcept { return last_estimate_; }

 private:
  double last_estimate_;
};

// Invalid or inconsistent configuration (missing lr entry, unknown key, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class VocabularyError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace quack
