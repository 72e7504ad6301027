#pragma once

#include <stdexcept>
#include <string>

namespace sharelora {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Integer index outside its valid range (token ids, class targets).
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Caller violated an operation's precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Invalid scheme, spec, preset or config file.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Non-finite values or iterative routines that failed to converge.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training loss exceeded the divergence threshold.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint bytes could not be decoded.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace sharelora
