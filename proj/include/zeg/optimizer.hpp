#pragma once

// AdamW with decoupled weight decay: w <- w - lr*wd*w, then the bias-corrected
// Adam update. Only trainable parameters acquire optimizer state.

#include "zeg/nn.hpp"

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

namespace zeg {

struct AdamWConfig {
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
class AdamW {
 public:
  struct Moments {
    NDArray<S> m;
    NDArray<S> v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::int64_t steps() const { return t_; }

  void step(const ParameterList<S>& params) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const S lr = static_cast<S>(cfg_.lr), decay = static_cast<S>(cfg_.lr * cfg_.weight_decay);
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S inv_c1 = static_cast<S>(1.0 / c1), inv_sqrt_c2 = static_cast<S>(1.0 / std::sqrt(c2));
    const S eps = static_cast<S>(cfg_.eps);
    for (auto* p : params) {
      if (!p->trainable) continue;
      if (!p->has_grad()) throw std::logic_error("optimizer: trainable parameter '" + p->name + "' has no gradient");
      auto it = state_.find(p->name);
      if (it == state_.end()) {
        it = state_.emplace(p->name, Moments{NDArray<S>(p->value.shape), NDArray<S>(p->value.shape)}).first;
      }
      auto& [m, v] = it->second;
      auto w = p->value.data.array();
      const auto grad = p->grad.data.array();
      if (decay != S(0)) w -= decay * w;
      m.data.array() = b1 * m.data.array() + (S(1) - b1) * grad;
      v.data.array() = b2 * v.data.array() + (S(1) - b2) * grad.square();
      w -= lr * (m.data.array() * inv_c1) / ((v.data.array().sqrt() * inv_sqrt_c2) + eps);
    }
  }

  bool has_state(const std::string& name) const { return state_.count(name) > 0; }
  std::size_t state_size() const { return state_.size(); }
  const Moments& moments(const std::string& name) const { return state_.at(name); }

 private:
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

template <typename S>
void zero_grad(const ParameterList<S>& params) {
  for (auto* p : params) p->zero_grad();
}

}  // namespace zeg
