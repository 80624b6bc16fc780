// Dense fp64 tensor with tape-based reverse-mode differentiation.
//
// Tensors are value types: copying shares the underlying buffer, mutation
// copies-on-write. A Tape records primitive applications in execution order
// (define-by-run); Tape::backward sweeps the records in reverse, accumulating
// gradients additively across fan-out. One tape is single-threaded by
// contract; run independent tapes for parallelism.
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tivode/errors.hpp"

namespace tivode {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(std::vector<double> values, Shape shape);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_ ? values_->size() : 0; }
  std::size_t dim(std::size_t axis) const;
  bool empty() const { return !values_ || values_->empty(); }

  const std::vector<double>& values() const;
  const double* data() const { return values().data(); }

  // Copy-on-write access. Mutating detaches the tensor from any tape node:
  // a recorded value that changes no longer matches its record.
  std::vector<double>& mutable_values();

  double item() const;  // scalar tensors only
  double at(std::initializer_list<std::size_t> idx) const;

  // Same shape and bit-identical values.
  bool equals(const Tensor& other) const;

  bool tracked_on(const Tape& tape) const;

  // Tape bookkeeping, written by the op layer.
  int node = -1;
  std::uint64_t tape_id = 0;

 private:
  Shape shape_;
  std::shared_ptr<std::vector<double>> values_;
};

class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // The tape recording on the current thread, or nullptr. A Tape activates
  // itself on construction and restores the previous one on destruction
  // (strict stack discipline).
  static Tape* active();

  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Registers t as a differentiable leaf on this tape.
  void watch(Tensor& t);

  // Records one primitive application. `backward` receives the node's output
  // gradient and must Tape::accumulate into its parents. Returns the node id.
  using BackwardFn = std::function<void(std::span<const double>, Tape&)>;
  int record(std::size_t out_size, BackwardFn backward);

  void accumulate(int node, std::span<const double> g);

  // Reverse sweep from a scalar root. Each node is visited exactly once.
  void backward(const Tensor& root);

  bool has_grad(const Tensor& t) const;
  // Gradient of the last backward() root wrt t; zeros if no path reached t.
  Tensor grad(const Tensor& t) const;

 private:
  struct Node {
    std::size_t size;
    BackwardFn backward;  // null for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::uint64_t id_;
  Tape* previous_ = nullptr;
  bool swept_ = false;
};

// Temporarily disables recording on the current thread.
class PauseTape {
 public:
  PauseTape();
  ~PauseTape();
  PauseTape(const PauseTape&) = delete;
  PauseTape& operator=(const PauseTape&) = delete;

 private:
  Tape* saved_;
};

// Post-op NaN/Inf assertions. On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void check_finite(const Tensor& t, const char* op_name);

}  // namespace tivode
