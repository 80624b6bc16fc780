#include <Eigen/Dense>
#include <cmath>
#include <cstring>

#include "op_common.hpp"
#include "tivode/ops.hpp"

namespace tivode {

using detail::attach;
using detail::node_of;
using detail::require_same_shape;
using detail::tracked;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a 2-D tensor, got " + shape_str(t.shape()));
  }
}

struct ConvDims {
  std::size_t B, C, H, W, O, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) {
    throw DimensionError("conv2d expects x [B x C x H x W], w [O x C x kh x kw], got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  if (x.dim(1) != w.dim(1)) {
    throw DimensionError("conv2d: channel mismatch " + shape_str(x.shape()) + " vs " +
                         shape_str(w.shape()));
  }
  if (stride < 1 || pad < 0) throw ContractError("conv2d: stride must be >=1 and pad >=0");
  ConvDims d{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0};
  std::ptrdiff_t ho = (static_cast<std::ptrdiff_t>(d.H) + 2 * pad - static_cast<std::ptrdiff_t>(d.kh));
  std::ptrdiff_t wo = (static_cast<std::ptrdiff_t>(d.W) + 2 * pad - static_cast<std::ptrdiff_t>(d.kw));
  if (ho < 0 || wo < 0) {
    throw DimensionError("conv2d: kernel larger than padded input");
  }
  d.Ho = static_cast<std::size_t>(ho) / stride + 1;
  d.Wo = static_cast<std::size_t>(wo) / stride + 1;
  return d;
}

// Writes the [C*kh*kw x Ho*Wo] patch matrix for one sample into `col`.
void im2col(const double* x, const ConvDims& d, int stride, int pad, double* col) {
  const std::size_t cols = d.Ho * d.Wo;
  for (std::size_t c = 0; c < d.C; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        for (std::size_t oi = 0; oi < d.Ho; ++oi) {
          std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi) * stride - pad +
                              static_cast<std::ptrdiff_t>(ki);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.H)) {
            std::memset(row + oi * d.Wo, 0, d.Wo * sizeof(double));
            continue;
          }
          const double* src = x + (c * d.H + static_cast<std::size_t>(ii)) * d.W;
          for (std::size_t oj = 0; oj < d.Wo; ++oj) {
            std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj) * stride - pad +
                                static_cast<std::ptrdiff_t>(kj);
            row[oi * d.Wo + oj] =
                (jj < 0 || jj >= static_cast<std::ptrdiff_t>(d.W)) ? 0.0 : src[jj];
          }
        }
      }
    }
  }
}

// Scatter-adds a [C*kh*kw x Ho*Wo] patch-gradient matrix back onto one sample.
void col2im_add(const double* col, const ConvDims& d, int stride, int pad, double* gx) {
  const std::size_t cols = d.Ho * d.Wo;
  for (std::size_t c = 0; c < d.C; ++c) {
    for (std::size_t ki = 0; ki < d.kh; ++ki) {
      for (std::size_t kj = 0; kj < d.kw; ++kj) {
        const double* row = col + ((c * d.kh + ki) * d.kw + kj) * cols;
        for (std::size_t oi = 0; oi < d.Ho; ++oi) {
          std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi) * stride - pad +
                              static_cast<std::ptrdiff_t>(ki);
          if (ii < 0 || ii >= static_cast<std::ptrdiff_t>(d.H)) continue;
          double* dst = gx + (c * d.H + static_cast<std::size_t>(ii)) * d.W;
          for (std::size_t oj = 0; oj < d.Wo; ++oj) {
            std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj) * stride - pad +
                                static_cast<std::ptrdiff_t>(kj);
            if (jj >= 0 && jj < static_cast<std::ptrdiff_t>(d.W)) {
              dst[jj] += row[oi * d.Wo + oj];
            }
          }
        }
      }
    }
  }
}

}  // namespace

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  }
  Tensor y = Tensor::from(std::move(out), {n, m});
  if (tracked(a)) {
    int pa = a.node;
    attach(y, [pa, m, n](std::span<const double> g, Tape& tape) {
      std::vector<double> ga(m * n);
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < m; ++i) ga[i * n + j] = g[j * m + i];
      }
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  {
    CMapMat A(a.values().data(), m, k);
    CMapMat B(b.values().data(), k, n);
    MapMat Y(out.data(), m, n);
    Y.noalias() = A * B;
  }
  Tensor y = Tensor::from(std::move(out), {m, n});
  check_finite(y, "matmul");
  if (tracked(a) || tracked(b)) {
    int pa = node_of(a), pb = node_of(b);
    Tensor sa = a, sb = b;
    attach(y, [pa, pb, sa, sb, m, k, n](std::span<const double> g, Tape& tape) {
      CMapMat G(g.data(), m, n);
      if (pa >= 0) {
        std::vector<double> ga(m * k);
        CMapMat B(sb.values().data(), k, n);
        MapMat GA(ga.data(), m, k);
        GA.noalias() = G * B.transpose();
        tape.accumulate(pa, ga);
      }
      if (pb >= 0) {
        std::vector<double> gb(k * n);
        CMapMat A(sa.values().data(), m, k);
        MapMat GB(gb.data(), k, n);
        GB.noalias() = A.transpose() * G;
        tape.accumulate(pb, gb);
      }
    });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  ConvDims d = conv_dims(x, w, stride, pad);
  const std::size_t patch = d.C * d.kh * d.kw;
  const std::size_t cols = d.Ho * d.Wo;
  std::vector<double> out(d.B * d.O * cols);
  std::vector<double> col(patch * cols);
  const auto& xv = x.values();
  CMapMat W(w.values().data(), d.O, patch);
  for (std::size_t b = 0; b < d.B; ++b) {
    im2col(xv.data() + b * d.C * d.H * d.W, d, stride, pad, col.data());
    CMapMat Col(col.data(), patch, cols);
    MapMat Y(out.data() + b * d.O * cols, d.O, cols);
    Y.noalias() = W * Col;
  }
  Tensor y = Tensor::from(std::move(out), {d.B, d.O, d.Ho, d.Wo});
  check_finite(y, "conv2d");
  if (tracked(x) || tracked(w)) {
    int px = node_of(x), pw = node_of(w);
    Tensor sx = x, sw = w;
    attach(y, [px, pw, sx, sw, d, stride, pad, patch, cols](std::span<const double> g,
                                                            Tape& tape) {
      // The patch matrix is rebuilt per sample instead of saved: it is the
      // largest intermediate and cheap to recompute.
      const auto& xv = sx.values();
      std::vector<double> col(patch * cols);
      std::vector<double> gw(sw.size(), 0.0);
      std::vector<double> gx;
      if (px >= 0) gx.assign(sx.size(), 0.0);
      MapMat GW(gw.data(), d.O, patch);
      CMapMat W(sw.values().data(), d.O, patch);
      std::vector<double> gcol(patch * cols);
      for (std::size_t b = 0; b < d.B; ++b) {
        CMapMat G(g.data() + b * d.O * cols, d.O, cols);
        if (pw >= 0) {
          im2col(xv.data() + b * d.C * d.H * d.W, d, stride, pad, col.data());
          CMapMat Col(col.data(), patch, cols);
          GW.noalias() += G * Col.transpose();
        }
        if (px >= 0) {
          MapMat GCol(gcol.data(), patch, cols);
          GCol.noalias() = W.transpose() * G;
          col2im_add(gcol.data(), d, stride, pad, gx.data() + b * d.C * d.H * d.W);
        }
      }
      if (pw >= 0) tape.accumulate(pw, gw);
      if (px >= 0) tape.accumulate(px, gx);
    });
  }
  return y;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  if (x.rank() != 4) {
    throw DimensionError("group_norm expects [B x C x H x W], got " + shape_str(x.shape()));
  }
  std::size_t B = x.dim(0), C = x.dim(1), H = x.dim(2), Wd = x.dim(3);
  if (groups < 1 || C % static_cast<std::size_t>(groups) != 0) {
    throw DimensionError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C) {
    throw DimensionError("group_norm: gamma/beta must be [C]");
  }
  std::size_t G = static_cast<std::size_t>(groups);
  std::size_t cg = C / G;           // channels per group
  std::size_t gsz = cg * H * Wd;    // elements per (sample, group)
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  std::vector<double> mu(B * G), istd(B * G);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const double* src = xv.data() + (b * C + g * cg) * H * Wd;
      double m = 0.0;
      for (std::size_t i = 0; i < gsz; ++i) m += src[i];
      m /= static_cast<double>(gsz);
      double var = 0.0;
      for (std::size_t i = 0; i < gsz; ++i) {
        double dv = src[i] - m;
        var += dv * dv;
      }
      var /= static_cast<double>(gsz);
      double is = 1.0 / std::sqrt(var + eps);
      mu[b * G + g] = m;
      istd[b * G + g] = is;
      double* dst = out.data() + (b * C + g * cg) * H * Wd;
      for (std::size_t c = 0; c < cg; ++c) {
        double ga = gv[g * cg + c], be = bv[g * cg + c];
        const double* s = src + c * H * Wd;
        double* o = dst + c * H * Wd;
        for (std::size_t i = 0; i < H * Wd; ++i) o[i] = ga * (s[i] - m) * is + be;
      }
    }
  }
  Tensor y = Tensor::from(std::move(out), x.shape());
  check_finite(y, "group_norm");
  if (tracked(x) || tracked(gamma) || tracked(beta)) {
    int px = node_of(x), pg = node_of(gamma), pb = node_of(beta);
    Tensor sx = x, sgamma = gamma;
    attach(y, [px, pg, pb, sx, sgamma, B, C, G, cg, H, Wd, gsz, mu, istd](
                  std::span<const double> grad, Tape& tape) {
      const auto& xv = sx.values();
      const auto& gv = sgamma.values();
      std::vector<double> gx, ggamma, gbeta;
      if (px >= 0) gx.assign(xv.size(), 0.0);
      if (pg >= 0) ggamma.assign(C, 0.0);
      if (pb >= 0) gbeta.assign(C, 0.0);
      std::vector<double> xhat(gsz), dxhat(gsz);
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t g = 0; g < G; ++g) {
          const double m = mu[b * G + g], is = istd[b * G + g];
          const double* src = xv.data() + (b * C + g * cg) * H * Wd;
          const double* go = grad.data() + (b * C + g * cg) * H * Wd;
          for (std::size_t c = 0; c < cg; ++c) {
            double ga = gv[g * cg + c];
            for (std::size_t i = 0; i < H * Wd; ++i) {
              std::size_t k = c * H * Wd + i;
              xhat[k] = (src[k] - m) * is;
              dxhat[k] = go[k] * ga;
            }
          }
          if (pg >= 0 || pb >= 0) {
            for (std::size_t c = 0; c < cg; ++c) {
              double sg = 0.0, sb = 0.0;
              for (std::size_t i = 0; i < H * Wd; ++i) {
                std::size_t k = c * H * Wd + i;
                sg += go[k] * xhat[k];
                sb += go[k];
              }
              if (pg >= 0) ggamma[g * cg + c] += sg;
              if (pb >= 0) gbeta[g * cg + c] += sb;
            }
          }
          if (px >= 0) {
            double mean_dx = 0.0, mean_dxx = 0.0;
            for (std::size_t k = 0; k < gsz; ++k) {
              mean_dx += dxhat[k];
              mean_dxx += dxhat[k] * xhat[k];
            }
            mean_dx /= static_cast<double>(gsz);
            mean_dxx /= static_cast<double>(gsz);
            double* dst = gx.data() + (b * C + g * cg) * H * Wd;
            for (std::size_t k = 0; k < gsz; ++k) {
              dst[k] = is * (dxhat[k] - mean_dx - xhat[k] * mean_dxx);
            }
          }
        }
      }
      if (px >= 0) tape.accumulate(px, gx);
      if (pg >= 0) tape.accumulate(pg, ggamma);
      if (pb >= 0) tape.accumulate(pb, gbeta);
    });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(x, "layer_norm");
  std::size_t L = x.dim(0), d = x.dim(1);
  if (gamma.rank() != 1 || gamma.dim(0) != d || beta.rank() != 1 || beta.dim(0) != d) {
    throw DimensionError("layer_norm: gamma/beta must be [d]");
  }
  const auto& xv = x.values();
  const auto& gv = gamma.values();
  const auto& bv = beta.values();
  std::vector<double> out(xv.size());
  std::vector<double> mu(L), istd(L);
  for (std::size_t r = 0; r < L; ++r) {
    const double* src = xv.data() + r * d;
    double m = 0.0;
    for (std::size_t j = 0; j < d; ++j) m += src[j];
    m /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      double dv = src[j] - m;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    mu[r] = m;
    istd[r] = is;
    double* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = gv[j] * (src[j] - m) * is + bv[j];
  }
  Tensor y = Tensor::from(std::move(out), x.shape());
  check_finite(y, "layer_norm");
  if (tracked(x) || tracked(gamma) || tracked(beta)) {
    int px = node_of(x), pg = node_of(gamma), pb = node_of(beta);
    Tensor sx = x, sgamma = gamma;
    attach(y, [px, pg, pb, sx, sgamma, L, d, mu, istd](std::span<const double> grad,
                                                       Tape& tape) {
      const auto& xv = sx.values();
      const auto& gv = sgamma.values();
      std::vector<double> gx, ggamma, gbeta;
      if (px >= 0) gx.assign(xv.size(), 0.0);
      if (pg >= 0) ggamma.assign(d, 0.0);
      if (pb >= 0) gbeta.assign(d, 0.0);
      std::vector<double> xhat(d), dxhat(d);
      for (std::size_t r = 0; r < L; ++r) {
        const double m = mu[r], is = istd[r];
        const double* src = xv.data() + r * d;
        const double* go = grad.data() + r * d;
        double mean_dx = 0.0, mean_dxx = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
          xhat[j] = (src[j] - m) * is;
          dxhat[j] = go[j] * gv[j];
          mean_dx += dxhat[j];
          mean_dxx += dxhat[j] * xhat[j];
          if (pg >= 0) ggamma[j] += go[j] * xhat[j];
          if (pb >= 0) gbeta[j] += go[j];
        }
        mean_dx /= static_cast<double>(d);
        mean_dxx /= static_cast<double>(d);
        if (px >= 0) {
          double* dst = gx.data() + r * d;
          for (std::size_t j = 0; j < d; ++j) {
            dst[j] = is * (dxhat[j] - mean_dx - xhat[j] * mean_dxx);
          }
        }
      }
      if (px >= 0) tape.accumulate(px, gx);
      if (pg >= 0) tape.accumulate(pg, ggamma);
      if (pb >= 0) tape.accumulate(pb, gbeta);
    });
  }
  return y;
}

Tensor softmax_rows(const Tensor& a) {
  require_2d(a, "softmax_rows");
  std::size_t R = a.dim(0), C = a.dim(1);
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t r = 0; r < R; ++r) {
    const double* src = av.data() + r * C;
    double* dst = out.data() + r * C;
    double mx = src[0];
    for (std::size_t j = 1; j < C; ++j) mx = std::max(mx, src[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < C; ++j) {
      dst[j] = std::exp(src[j] - mx);
      z += dst[j];
    }
    for (std::size_t j = 0; j < C; ++j) dst[j] /= z;
  }
  Tensor y = Tensor::from(std::move(out), a.shape());
  check_finite(y, "softmax_rows");
  if (tracked(a)) {
    int pa = a.node;
    Tensor sy = y;
    attach(y, [pa, sy, R, C](std::span<const double> g, Tape& tape) {
      const auto& yv = sy.values();
      std::vector<double> ga(yv.size());
      for (std::size_t r = 0; r < R; ++r) {
        const double* yr = yv.data() + r * C;
        const double* gr = g.data() + r * C;
        double dot = 0.0;
        for (std::size_t j = 0; j < C; ++j) dot += gr[j] * yr[j];
        double* dst = ga.data() + r * C;
        for (std::size_t j = 0; j < C; ++j) dst[j] = yr[j] * (gr[j] - dot);
      }
      tape.accumulate(pa, ga);
    });
  }
  return y;
}

namespace {

Tensor attention_impl(const Tensor& q, const Tensor& k, const Tensor& v,
                      const Tensor* logit_mask) {
  require_2d(q, "scaled_dot_attention");
  require_2d(k, "scaled_dot_attention");
  require_2d(v, "scaled_dot_attention");
  if (q.dim(1) != k.dim(1)) {
    throw DimensionError("scaled_dot_attention: q/k feature dims differ, " +
                         shape_str(q.shape()) + " vs " + shape_str(k.shape()));
  }
  if (k.dim(0) != v.dim(0)) {
    throw DimensionError("scaled_dot_attention: k/v length mismatch, " + shape_str(k.shape()) +
                         " vs " + shape_str(v.shape()));
  }
  Tensor logits = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  if (logit_mask) {
    if (logit_mask->shape() != logits.shape()) {
      throw DimensionError("scaled_dot_attention: mask " + shape_str(logit_mask->shape()) +
                           " does not match logits " + shape_str(logits.shape()));
    }
    logits = add(logits, *logit_mask);
  }
  return matmul(softmax_rows(logits), v);
}

}  // namespace

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return attention_impl(q, k, v, nullptr);
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& logit_mask) {
  return attention_impl(q, k, v, &logit_mask);
}

}  // namespace tivode
