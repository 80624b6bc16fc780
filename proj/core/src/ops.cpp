#include "tivode/ops.hpp"

#include <cmath>
#include <cstring>

#include "op_common.hpp"

namespace tivode {

using detail::AxisSplit;
using detail::attach;
using detail::node_of;
using detail::require_same_shape;
using detail::split_axis;
using detail::tracked;

// ---------------------------------------------------------------------------
// elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "add");
  if (tracked(a) || tracked(b)) {
    int pa = node_of(a), pb = node_of(b);
    attach(y, [pa, pb](std::span<const double> g, Tape& tape) {
      tape.accumulate(pa, g);
      tape.accumulate(pb, g);
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "sub");
  if (tracked(a) || tracked(b)) {
    int pa = node_of(a), pb = node_of(b);
    attach(y, [pa, pb](std::span<const double> g, Tape& tape) {
      tape.accumulate(pa, g);
      if (pb >= 0) {
        std::vector<double> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = -g[i];
        tape.accumulate(pb, gb);
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "mul");
  if (tracked(a) || tracked(b)) {
    int pa = node_of(a), pb = node_of(b);
    Tensor sa = a, sb = b;  // saved forward values
    attach(y, [pa, pb, sa, sb](std::span<const double> g, Tape& tape) {
      if (pa >= 0) {
        const auto& bv2 = sb.values();
        std::vector<double> ga(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * bv2[i];
        tape.accumulate(pa, ga);
      }
      if (pb >= 0) {
        const auto& av2 = sa.values();
        std::vector<double> gb(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] = g[i] * av2[i];
        tape.accumulate(pb, gb);
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "scale");
  if (tracked(a)) {
    int pa = a.node;
    attach(y, [pa, c](std::span<const double> g, Tape& tape) {
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * c;
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, double c) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + c;
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "add_scalar");
  if (tracked(a)) {
    int pa = a.node;
    attach(y, [pa](std::span<const double> g, Tape& tape) { tape.accumulate(pa, g); });
  }
  return y;
}

Tensor tanh(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  Tensor y = Tensor::from(std::move(out), a.shape());
  if (tracked(a)) {
    int pa = a.node;
    Tensor sy = y;
    attach(y, [pa, sy](std::span<const double> g, Tape& tape) {
      const auto& yv = sy.values();
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * (1.0 - yv[i] * yv[i]);
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-av[i]));
  Tensor y = Tensor::from(std::move(out), a.shape());
  if (tracked(a)) {
    int pa = a.node;
    Tensor sy = y;
    attach(y, [pa, sy](std::span<const double> g, Tape& tape) {
      const auto& yv = sy.values();
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * yv[i] * (1.0 - yv[i]);
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor silu(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] / (1.0 + std::exp(-av[i]));
  }
  Tensor y = Tensor::from(std::move(out), a.shape());
  if (tracked(a)) {
    int pa = a.node;
    Tensor sa = a;
    attach(y, [pa, sa](std::span<const double> g, Tape& tape) {
      const auto& xv = sa.values();
      std::vector<double> ga(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-xv[i]));
        ga[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
      }
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor add_scaled(const Tensor& base, const std::vector<Tensor>& parts,
                  const std::vector<double>& coeffs) {
  if (parts.size() != coeffs.size()) {
    throw ContractError("add_scaled: " + std::to_string(parts.size()) + " parts but " +
                        std::to_string(coeffs.size()) + " coefficients");
  }
  for (const Tensor& p : parts) require_same_shape(base, p, "add_scaled");
  std::vector<double> out(base.values().begin(), base.values().end());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& pv = parts[pi].values();
    const double c = coeffs[pi];
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += c * pv[i];
  }
  Tensor y = Tensor::from(std::move(out), base.shape());
  check_finite(y, "add_scaled");
  bool any = tracked(base);
  for (const Tensor& p : parts) any = any || tracked(p);
  if (any) {
    int pb = node_of(base);
    std::vector<int> pnodes;
    for (const Tensor& p : parts) pnodes.push_back(node_of(p));
    attach(y, [pb, pnodes, coeffs](std::span<const double> g, Tape& tape) {
      tape.accumulate(pb, g);
      std::vector<double> gp;
      for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
        if (pnodes[pi] < 0) continue;
        gp.resize(g.size());
        const double c = coeffs[pi];
        for (std::size_t i = 0; i < g.size(); ++i) gp[i] = c * g[i];
        tape.accumulate(pnodes[pi], gp);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  const auto& av = a.values();
  double acc = 0.0;
  for (double v : av) acc += v;
  Tensor y = Tensor::scalar(acc);
  check_finite(y, "sum");
  if (tracked(a)) {
    int pa = a.node;
    std::size_t n = av.size();
    attach(y, [pa, n](std::span<const double> g, Tape& tape) {
      std::vector<double> ga(n, g[0]);
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor mean(const Tensor& a) {
  const auto& av = a.values();
  if (av.empty()) throw ContractError("mean of empty tensor");
  double acc = 0.0;
  for (double v : av) acc += v;
  Tensor y = Tensor::scalar(acc / static_cast<double>(av.size()));
  check_finite(y, "mean");
  if (tracked(a)) {
    int pa = a.node;
    std::size_t n = av.size();
    attach(y, [pa, n](std::span<const double> g, Tape& tape) {
      std::vector<double> ga(n, g[0] / static_cast<double>(n));
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.size()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  }
  Tensor y = Tensor::from(a.values(), std::move(shape));
  if (tracked(a)) {
    int pa = a.node;
    attach(y, [pa](std::span<const double> g, Tape& tape) { tape.accumulate(pa, g); });
  }
  return y;
}

Tensor flatten(const Tensor& a) { return reshape(a, {a.size()}); }

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& base = parts[0].shape();
  Shape out_shape = base;
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != base.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " +
                           shape_str(base));
    }
    for (std::size_t i = 0; i < base.size(); ++i) {
      if (i != axis && p.shape()[i] != base[i]) {
        throw DimensionError("concat: shape mismatch off-axis " + shape_str(p.shape()) +
                             " vs " + shape_str(base));
      }
    }
    total += p.shape()[axis];
  }
  out_shape[axis] = total;

  AxisSplit sp = split_axis(out_shape, axis);
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;  // running offset along the axis
  for (const Tensor& p : parts) {
    const auto& pv = p.values();
    std::size_t plen = p.shape()[axis];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::memcpy(out.data() + (o * sp.len + offset) * sp.inner,
                  pv.data() + o * plen * sp.inner, plen * sp.inner * sizeof(double));
    }
    offset += plen;
  }
  Tensor y = Tensor::from(std::move(out), out_shape);

  bool any = false;
  for (const Tensor& p : parts) any = any || tracked(p);
  if (any) {
    std::vector<int> pnodes;
    std::vector<std::size_t> plens;
    for (const Tensor& p : parts) {
      pnodes.push_back(node_of(p));
      plens.push_back(p.shape()[axis]);
    }
    attach(y, [pnodes, plens, sp](std::span<const double> g, Tape& tape) {
      std::size_t offset = 0;
      for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
        std::size_t plen = plens[pi];
        if (pnodes[pi] >= 0) {
          std::vector<double> gp(sp.outer * plen * sp.inner);
          for (std::size_t o = 0; o < sp.outer; ++o) {
            std::memcpy(gp.data() + o * plen * sp.inner,
                        g.data() + (o * sp.len + offset) * sp.inner,
                        plen * sp.inner * sizeof(double));
          }
          tape.accumulate(pnodes[pi], gp);
        }
        offset += plen;
      }
    });
  }
  return y;
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t from, std::size_t to) {
  AxisSplit sp = split_axis(a.shape(), axis);
  if (from >= to || to > sp.len) {
    throw DimensionError("slice [" + std::to_string(from) + "," + std::to_string(to) +
                         ") out of range on axis " + std::to_string(axis) + " of " +
                         shape_str(a.shape()));
  }
  std::size_t slen = to - from;
  Shape out_shape = a.shape();
  out_shape[axis] = slen;
  const auto& av = a.values();
  std::vector<double> out(sp.outer * slen * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o) {
    std::memcpy(out.data() + o * slen * sp.inner, av.data() + (o * sp.len + from) * sp.inner,
                slen * sp.inner * sizeof(double));
  }
  Tensor y = Tensor::from(std::move(out), out_shape);
  if (tracked(a)) {
    int pa = a.node;
    std::size_t asize = a.size();
    attach(y, [pa, sp, from, slen, asize](std::span<const double> g, Tape& tape) {
      std::vector<double> ga(asize, 0.0);
      for (std::size_t o = 0; o < sp.outer; ++o) {
        std::memcpy(ga.data() + (o * sp.len + from) * sp.inner, g.data() + o * slen * sp.inner,
                    slen * sp.inner * sizeof(double));
      }
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor add_bias(const Tensor& a, const Tensor& bias, std::size_t axis) {
  AxisSplit sp = split_axis(a.shape(), axis);
  if (bias.rank() != 1 || bias.dim(0) != sp.len) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match axis " +
                         std::to_string(axis) + " of " + shape_str(a.shape()));
  }
  const auto& av = a.values();
  const auto& bv = bias.values();
  std::vector<double> out(av.size());
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t c = 0; c < sp.len; ++c) {
      const double b = bv[c];
      const double* src = av.data() + (o * sp.len + c) * sp.inner;
      double* dst = out.data() + (o * sp.len + c) * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] = src[i] + b;
    }
  }
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "add_bias");
  if (tracked(a) || tracked(bias)) {
    int pa = node_of(a), pb = node_of(bias);
    attach(y, [pa, pb, sp](std::span<const double> g, Tape& tape) {
      tape.accumulate(pa, g);
      if (pb >= 0) {
        std::vector<double> gb(sp.len, 0.0);
        for (std::size_t o = 0; o < sp.outer; ++o) {
          for (std::size_t c = 0; c < sp.len; ++c) {
            const double* src = g.data() + (o * sp.len + c) * sp.inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < sp.inner; ++i) acc += src[i];
            gb[c] += acc;
          }
        }
        tape.accumulate(pb, gb);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// lookup

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  }
  std::size_t vocab = table.dim(0), d = table.dim(1);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError("embedding id " + std::to_string(id) + " out of range [0," +
                          std::to_string(vocab) + ")");
    }
  }
  const auto& tv = table.values();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::memcpy(out.data() + i * d, tv.data() + static_cast<std::size_t>(ids[i]) * d,
                d * sizeof(double));
  }
  Tensor y = Tensor::from(std::move(out), {ids.size(), d});
  if (tracked(table)) {
    int pt = table.node;
    std::size_t tsize = table.size();
    std::vector<int> saved_ids = ids;
    attach(y, [pt, tsize, saved_ids, d](std::span<const double> g, Tape& tape) {
      std::vector<double> gt(tsize, 0.0);
      for (std::size_t i = 0; i < saved_ids.size(); ++i) {
        double* dst = gt.data() + static_cast<std::size_t>(saved_ids[i]) * d;
        const double* src = g.data() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
      tape.accumulate(pt, gt);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// gradient routing

Tensor stop_gradient(const Tensor& a) {
  Tensor y = a;   // shares the buffer: forward-equal bit for bit
  y.node = -1;    // never tracked
  y.tape_id = 0;
  return y;
}

Tensor straight_through(const Tensor& value, const Tensor& grad_path) {
  require_same_shape(value, grad_path, "straight_through");
  Tensor y = value;
  y.node = -1;
  y.tape_id = 0;
  if (tracked(grad_path)) {
    int pp = grad_path.node;
    attach(y, [pp](std::span<const double> g, Tape& tape) { tape.accumulate(pp, g); });
  }
  return y;
}

// ---------------------------------------------------------------------------
// upsampling

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 4) {
    throw DimensionError("upsample_nearest2x expects [B x C x H x W], got " +
                         shape_str(x.shape()));
  }
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const auto& xv = x.values();
  std::vector<double> out(B * C * 4 * H * W);
  std::size_t H2 = 2 * H, W2 = 2 * W;
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* src = xv.data() + bc * H * W;
    double* dst = out.data() + bc * H2 * W2;
    for (std::size_t i = 0; i < H2; ++i) {
      for (std::size_t j = 0; j < W2; ++j) {
        dst[i * W2 + j] = src[(i / 2) * W + (j / 2)];
      }
    }
  }
  Tensor y = Tensor::from(std::move(out), {B, C, H2, W2});
  if (tracked(x)) {
    int px = x.node;
    attach(y, [px, B, C, H, W, H2, W2](std::span<const double> g, Tape& tape) {
      std::vector<double> gx(B * C * H * W, 0.0);
      for (std::size_t bc = 0; bc < B * C; ++bc) {
        const double* src = g.data() + bc * H2 * W2;
        double* dst = gx.data() + bc * H * W;
        for (std::size_t i = 0; i < H2; ++i) {
          for (std::size_t j = 0; j < W2; ++j) {
            dst[(i / 2) * W + (j / 2)] += src[i * W2 + j];
          }
        }
      }
      tape.accumulate(px, gx);
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// composites

Tensor mse(const Tensor& a, const Tensor& b) {
  Tensor d = sub(a, b);
  return mean(mul(d, d));
}

}  // namespace tivode
