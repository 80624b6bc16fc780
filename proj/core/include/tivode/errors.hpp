// Error taxonomy shared by all modules. The CLI maps these onto exit codes:
// bad input/arguments -> 2, I/O and file-format failures -> 3,
// non-finite training state -> 4, ODE solver failures -> 5.
#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace tivode {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between operands.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// An API precondition was violated (non-scalar backward root, stale tape, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

// Bad user-supplied input (empty caption, malformed time grid, ...).
class InputError : public Error {
 public:
  using Error::Error;
};

// Malformed or truncated file contents. Carries the byte offset.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit FormatError(const std::string& what) : Error(what), offset_(0) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Filesystem-level failure (cannot open/read/write).
class IoError : public Error {
 public:
  using Error::Error;
};

// Numerical integration failure. Carries the time and step size at failure.
class IntegrationError : public Error {
 public:
  IntegrationError(const std::string& what, double t, double h)
      : Error(what + " (t=" + std::to_string(t) + ", h=" + std::to_string(h) + ")"),
        t_(t),
        h_(h) {}
  double t() const { return t_; }
  double h() const { return h_; }

 private:
  double t_;
  double h_;
};

// Step size collapsed below h_min while the error estimate kept rejecting.
class StiffnessError : public IntegrationError {
 public:
  using IntegrationError::IntegrationError;
};

// Step count exceeded cfg.max_steps.
class BudgetError : public IntegrationError {
 public:
  using IntegrationError::IntegrationError;
};

// Non-finite loss during training. Carries the seed needed to replay the batch.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::uint64_t replay_seed)
      : Error(what + " (replay seed " + std::to_string(replay_seed) + ")"),
        replay_seed_(replay_seed) {}
  std::uint64_t replay_seed() const { return replay_seed_; }

 private:
  std::uint64_t replay_seed_;
};

// A step-wise baseline was asked for a time grid it cannot represent.
class UnsupportedGridError : public Error {
 public:
  using Error::Error;
};

}  // namespace tivode
