// Adam with optional global gradient-norm clipping. Parameters are raw
// Tensor pointers registered in a fixed order; moments are serialized so a
// resumed run continues bit-exactly.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tivode/nn.hpp"
#include "tivode/serialize.hpp"
#include "tivode/tensor.hpp"

namespace tivode {

class Adam {
 public:
  Adam() = default;
  Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void attach(std::vector<Tensor*> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (Tensor* p : params_) {
      m_.push_back(Tensor::zeros(p->shape()));
      v_.push_back(Tensor::zeros(p->shape()));
    }
    t_ = 0;
  }

  std::size_t step_count() const { return t_; }
  const std::vector<Tensor*>& params() const { return params_; }

  // Applies one update from the tape's gradients. clip > 0 rescales all
  // gradients when their joint L2 norm exceeds clip.
  void step(const Tape& tape, double clip) {
    if (params_.empty()) throw ContractError("Adam::step with no parameters attached");
    std::vector<Tensor> grads;
    grads.reserve(params_.size());
    double norm_sq = 0.0;
    for (Tensor* p : params_) {
      Tensor g = tape.grad(*p);
      for (double x : g.values()) norm_sq += x * x;
      grads.push_back(std::move(g));
    }
    double scale = 1.0;
    const double norm = std::sqrt(norm_sq);
    if (clip > 0.0 && norm > clip) scale = clip / norm;

    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& pv = params_[i]->mutable_values();
      auto& mv = m_[i].mutable_values();
      auto& vv = v_[i].mutable_values();
      const auto& gv = grads[i].values();
      for (std::size_t j = 0; j < pv.size(); ++j) {
        const double g = gv[j] * scale;
        mv[j] = b1_ * mv[j] + (1.0 - b1_) * g;
        vv[j] = b2_ * vv[j] + (1.0 - b2_) * g * g;
        const double mhat = mv[j] / c1;
        const double vhat = vv[j] / c2;
        pv[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  // Moments and step counter. Parameter tensors themselves are saved by
  // their owning modules.
  void save(Checkpoint& ck, const std::string& prefix) const {
    ck.put(prefix + ".t", Tensor::scalar(static_cast<double>(t_)));
    for (std::size_t i = 0; i < m_.size(); ++i) {
      ck.put(prefix + ".m" + std::to_string(i), m_[i]);
      ck.put(prefix + ".v" + std::to_string(i), v_[i]);
    }
  }

  void load(const Checkpoint& ck, const std::string& prefix) {
    t_ = static_cast<std::size_t>(ck.get(prefix + ".t").item());
    for (std::size_t i = 0; i < m_.size(); ++i) {
      nn::load_named(ck, prefix + ".m" + std::to_string(i), m_[i]);
      nn::load_named(ck, prefix + ".v" + std::to_string(i), v_[i]);
    }
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  double lr_ = 3e-4, b1_ = 0.9, b2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
};

}  // namespace tivode
