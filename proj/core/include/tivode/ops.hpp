// Differentiable primitives over Tensor. Every op computes its forward value
// eagerly and, when a tape is active and any input is tracked, records a
// backward closure. Gradient conventions:
//   - conv2d uses the cross-correlation convention (no kernel flip)
//   - softmax/attention act row-wise on 2-D tensors
//   - stop_gradient is exact identity forward, zero gradient backward
#pragma once

#include <vector>

#include "tivode/tensor.hpp"

namespace tivode {

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);

// Fused base + sum_i coeffs[i]*parts[i]. One tape node regardless of the
// number of parts; Runge-Kutta stage combinations use this.
Tensor add_scaled(const Tensor& base, const std::vector<Tensor>& parts,
                  const std::vector<double>& coeffs);

// ---- reductions ----
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor flatten(const Tensor& a);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t from, std::size_t to);

// Broadcast add of a 1-D bias along `axis` of a.
Tensor add_bias(const Tensor& a, const Tensor& bias, std::size_t axis);

// ---- lookup ----
// table: [V x d]; out: [ids.size() x d]. Gradient scatter-adds into the table.
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

// ---- gradient routing ----
Tensor stop_gradient(const Tensor& a);
// Forward is exactly `value`; backward routes the output gradient to
// `grad_path` unchanged. quantize() uses this for its straight-through pass.
Tensor straight_through(const Tensor& value, const Tensor& grad_path);

// ---- linear algebra ----
Tensor transpose(const Tensor& a);  // 2-D
Tensor matmul(const Tensor& a, const Tensor& b);

// x: [B x C x H x W], w: [O x C x kh x kw] -> [B x O x H' x W'],
// H' = (H + 2*pad - kh)/stride + 1. No bias term.
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

// Nearest-neighbour 2x upsampling of [B x C x H x W].
Tensor upsample_nearest2x(const Tensor& x);

// ---- normalization ----
// x: [B x C x H x W]; gamma, beta: [C]. Per-(sample, group) statistics.
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps);
// x: [L x d]; gamma, beta: [d]. Per-row statistics.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps);

// Row-wise softmax of a 2-D tensor.
Tensor softmax_rows(const Tensor& a);

// softmax(q k^T / sqrt(d)) v with q: [Lq x d], k: [Lk x d], v: [Lk x dv].
// The optional additive logit mask is [Lq x Lk] (use a large negative value
// to exclude a key).
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& logit_mask);

// ---- composites ----
Tensor mse(const Tensor& a, const Tensor& b);  // mean((a-b)^2)

}  // namespace tivode
