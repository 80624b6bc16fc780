// Internal helpers shared by the op implementation files. Not installed.
#pragma once

#include <string>

#include "tivode/tensor.hpp"

namespace tivode::detail {

inline bool tracked(const Tensor& t) {
  Tape* tape = Tape::active();
  return tape && t.tracked_on(*tape);
}

inline int node_of(const Tensor& t) { return tracked(t) ? t.node : -1; }

inline void attach(Tensor& out, Tape::BackwardFn fn) {
  Tape* tape = Tape::active();
  out.node = tape->record(out.size(), std::move(fn));
  out.tape_id = tape->id();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

// Decomposes a shape into (outer, axis_len, inner) around one axis.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  }
  AxisSplit sp;
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  sp.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

}  // namespace tivode::detail
