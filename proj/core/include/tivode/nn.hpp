// Small trainable layer structs shared by the encoder/decoder, the fusion
// transformer and the dynamics network. Each layer owns its parameter
// tensors, applies itself through the op layer (so gradients record), and
// can round-trip through a Checkpoint under a name prefix.
#pragma once

#include <string>
#include <vector>

#include "tivode/ops.hpp"
#include "tivode/rng.hpp"
#include "tivode/serialize.hpp"
#include "tivode/tensor.hpp"

namespace tivode {

namespace nn {

// He-style fan-in init for weights feeding a SiLU/ReLU-like nonlinearity.
inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  return randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

inline void load_named(const Checkpoint& ck, const std::string& name, Tensor& into) {
  const Tensor& t = ck.get(name);
  if (t.shape() != into.shape()) {
    throw FormatError("checkpoint tensor '" + name + "' has shape " + shape_str(t.shape()) +
                      ", expected " + shape_str(into.shape()));
  }
  into = t;
}

struct Conv2d {
  Tensor w;  // [O x C x k x k]
  Tensor b;  // [O]
  int stride = 1;
  int pad = 1;

  static Conv2d make(std::size_t in, std::size_t out, std::size_t k, int stride, int pad,
                     Rng& rng) {
    Conv2d c;
    c.w = kaiming({out, in, k, k}, in * k * k, rng);
    c.b = Tensor::zeros({out});
    c.stride = stride;
    c.pad = pad;
    return c;
  }

  Tensor operator()(const Tensor& x) const { return add_bias(conv2d(x, w, stride, pad), b, 1); }

  void params(std::vector<Tensor*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
  void save(Checkpoint& ck, const std::string& p) const {
    ck.put(p + ".w", w);
    ck.put(p + ".b", b);
  }
  void load(const Checkpoint& ck, const std::string& p) {
    load_named(ck, p + ".w", w);
    load_named(ck, p + ".b", b);
  }
};

struct GroupNorm {
  Tensor gamma, beta;  // [C]
  int groups = 8;
  double eps = 1e-5;

  static GroupNorm make(std::size_t channels, int groups) {
    GroupNorm g;
    g.gamma = Tensor::full({channels}, 1.0);
    g.beta = Tensor::zeros({channels});
    g.groups = groups;
    return g;
  }

  Tensor operator()(const Tensor& x) const { return group_norm(x, gamma, beta, groups, eps); }

  void params(std::vector<Tensor*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void save(Checkpoint& ck, const std::string& p) const {
    ck.put(p + ".gamma", gamma);
    ck.put(p + ".beta", beta);
  }
  void load(const Checkpoint& ck, const std::string& p) {
    load_named(ck, p + ".gamma", gamma);
    load_named(ck, p + ".beta", beta);
  }
};

struct Linear {
  Tensor w;  // [in x out]
  Tensor b;  // [out]

  static Linear make(std::size_t in, std::size_t out, Rng& rng) {
    Linear l;
    l.w = randn({in, out}, rng, std::sqrt(1.0 / static_cast<double>(in)));
    l.b = Tensor::zeros({out});
    return l;
  }

  // x: [L x in] -> [L x out]
  Tensor operator()(const Tensor& x) const { return add_bias(matmul(x, w), b, 1); }

  void params(std::vector<Tensor*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
  void save(Checkpoint& ck, const std::string& p) const {
    ck.put(p + ".w", w);
    ck.put(p + ".b", b);
  }
  void load(const Checkpoint& ck, const std::string& p) {
    load_named(ck, p + ".w", w);
    load_named(ck, p + ".b", b);
  }
};

struct LayerNorm {
  Tensor gamma, beta;  // [d]
  double eps = 1e-5;

  static LayerNorm make(std::size_t d) {
    LayerNorm l;
    l.gamma = Tensor::full({d}, 1.0);
    l.beta = Tensor::zeros({d});
    return l;
  }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, eps); }

  void params(std::vector<Tensor*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void save(Checkpoint& ck, const std::string& p) const {
    ck.put(p + ".gamma", gamma);
    ck.put(p + ".beta", beta);
  }
  void load(const Checkpoint& ck, const std::string& p) {
    load_named(ck, p + ".gamma", gamma);
    load_named(ck, p + ".beta", beta);
  }
};

}  // namespace nn

}  // namespace tivode
