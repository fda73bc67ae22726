#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "msat/nn/autodiff.hpp"

namespace msat::nn {

template <typename T>
struct NamedParam {
  std::string name;
  Var<T> var;
  bool decay = false;  // weight decay applies to affine weight matrices only
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

template <typename T>
void zero_grads(ParamList<T>& params) {
  for (auto& p : params) p.var.zero_grad();
}

template <typename T>
double global_grad_norm(ParamList<T>& params) {
  double sq = 0;
  for (auto& p : params) {
    const auto& g = p.var.grad();
    for (T v : g.flat()) sq += static_cast<double>(v) * static_cast<double>(v);
  }
  return std::sqrt(sq);
}

// Scales all gradients so the global norm does not exceed max_norm.
template <typename T>
double clip_grad_norm(ParamList<T>& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm && norm > 0) {
    const T s = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      for (T& v : p.var.grad().flat()) v *= s;
    }
  }
  return norm;
}

// Adam with decoupled weight decay on the marked parameters.
template <typename T>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
  };

  AdamW(ParamList<T>* params, Options opts = {}) : params_(params), opts_(opts) {
    for (auto& p : *params_) {
      slots_.push_back({Tensor<T>(p.var.value().shape()), Tensor<T>(p.var.value().shape())});
    }
  }

  // One update with the given learning rate; zeroes gradients afterwards.
  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opts_.beta2, t_);
    for (size_t i = 0; i < params_->size(); ++i) {
      auto& p = (*params_)[i];
      auto& value = p.var.mutable_value();
      const auto& grad = p.var.grad();
      T* m = slots_[i].m.data();
      T* v = slots_[i].v.data();
      T* w = value.data();
      const T* g = grad.data();
      const int64_t n = value.numel();
      for (int64_t j = 0; j < n; ++j) {
        m[j] = static_cast<T>(opts_.beta1 * m[j] + (1.0 - opts_.beta1) * g[j]);
        v[j] = static_cast<T>(opts_.beta2 * v[j] + (1.0 - opts_.beta2) * g[j] * g[j]);
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        double upd = lr * mhat / (std::sqrt(vhat) + opts_.eps);
        if (p.decay) upd += lr * opts_.weight_decay * w[j];
        w[j] = static_cast<T>(w[j] - upd);
      }
    }
    zero_grads(*params_);
  }

  int64_t steps_taken() const { return t_; }

 private:
  struct Slot {
    Tensor<T> m, v;
  };
  ParamList<T>* params_;
  Options opts_;
  std::vector<Slot> slots_;
  int64_t t_ = 0;
};

// Linear warmup to a flat plateau: lr(step) = base * min(step / warmup, 1).
inline double warmup_lr(double base_lr, int64_t step, int64_t warmup_steps) {
  if (step >= warmup_steps) return base_lr;
  return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
}

// Initialization helpers. Affine weights are N(0, 0.02); biases zero.
template <typename T>
Tensor<T> normal_init(std::vector<int64_t> shape, Rng& rng, double std_dev = 0.02) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.flat()) v = static_cast<T>(rng.normal() * std_dev);
  return t;
}

}  // namespace msat::nn
