#include "tivode/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace tivode {

namespace {

thread_local Tape* g_active_tape = nullptr;
std::atomic<std::uint64_t> g_tape_counter{1};

#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif

}  // namespace

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.values_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), 0.0);
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.values_ = std::make_shared<std::vector<double>>(shape_numel(t.shape_), value);
  return t;
}

Tensor Tensor::scalar(double value) { return full({}, value); }

Tensor Tensor::from(std::vector<double> values, Shape shape) {
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("Tensor::from: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.values_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " +
                         shape_str(shape_));
  }
  return shape_[axis];
}

const std::vector<double>& Tensor::values() const {
  if (!values_) throw ContractError("reading values of an empty tensor");
  return *values_;
}

std::vector<double>& Tensor::mutable_values() {
  if (!values_) throw ContractError("mutating an empty tensor");
  if (values_.use_count() > 1) {
    values_ = std::make_shared<std::vector<double>>(*values_);
  }
  node = -1;
  tape_id = 0;
  return *values_;
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
  return (*values_)[0];
}

double Tensor::at(std::initializer_list<std::size_t> idx) const {
  if (idx.size() != shape_.size()) {
    throw DimensionError("index rank mismatch for " + shape_str(shape_));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : idx) {
    if (i >= shape_[axis]) throw DimensionError("index out of range for " + shape_str(shape_));
    flat = flat * shape_[axis] + i;
    ++axis;
  }
  return (*values_)[flat];
}

bool Tensor::equals(const Tensor& other) const {
  if (shape_ != other.shape_) return false;
  if (!values_ || !other.values_) return values_ == other.values_;
  return std::memcmp(values_->data(), other.values_->data(),
                     values_->size() * sizeof(double)) == 0;
}

bool Tensor::tracked_on(const Tape& tape) const {
  return node >= 0 && tape_id == tape.id();
}

Tape::Tape() : id_(g_tape_counter.fetch_add(1)) {
  previous_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = previous_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::watch(Tensor& t) {
  if (t.tracked_on(*this)) return;
  t.node = record(t.size(), nullptr);
  t.tape_id = id_;
}

int Tape::record(std::size_t out_size, BackwardFn backward) {
  nodes_.push_back(Node{out_size, std::move(backward)});
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::accumulate(int node, std::span<const double> g) {
  if (node < 0) return;
  auto& buf = grads_[static_cast<std::size_t>(node)];
  if (buf.empty()) {
    buf.assign(g.begin(), g.end());
    return;
  }
  if (buf.size() != g.size()) {
    throw ContractError("gradient size mismatch on tape node " + std::to_string(node));
  }
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

void Tape::backward(const Tensor& root) {
  if (!root.tracked_on(*this)) {
    throw ContractError("backward root is not recorded on this tape");
  }
  if (root.size() != 1) {
    throw ContractError("backward root must be scalar, got " + shape_str(root.shape()));
  }
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<std::size_t>(root.node)] = {1.0};
  for (int i = root.node; i >= 0; --i) {
    auto& node = nodes_[static_cast<std::size_t>(i)];
    auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty() || !node.backward) continue;
    node.backward(std::span<const double>(g.data(), g.size()), *this);
  }
  swept_ = true;
}

bool Tape::has_grad(const Tensor& t) const {
  if (!swept_ || !t.tracked_on(*this)) return false;
  return !grads_[static_cast<std::size_t>(t.node)].empty();
}

Tensor Tape::grad(const Tensor& t) const {
  if (!t.tracked_on(*this)) {
    throw ContractError("grad() of a tensor not tracked on this tape");
  }
  if (!swept_) throw ContractError("grad() before backward()");
  const auto& g = grads_[static_cast<std::size_t>(t.node)];
  if (g.empty()) return Tensor::zeros(t.shape());
  return Tensor::from(std::vector<double>(g.begin(), g.end()), t.shape());
}

PauseTape::PauseTape() : saved_(g_active_tape) { g_active_tape = nullptr; }
PauseTape::~PauseTape() { g_active_tape = saved_; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

void check_finite(const Tensor& t, const char* op_name) {
  if (!g_finite_checks) return;
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw ContractError(std::string(op_name) + " produced a non-finite value");
    }
  }
}

}  // namespace tivode
