#pragma once

#include <cmath>
#include <vector>

#include "stq/tensor.hpp"

namespace stq {

struct AdamConfig {
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
};

// Adam state for one parameter tensor.
class Adam {
 public:
  Adam() = default;
  explicit Adam(const Shape& shape, AdamConfig cfg = {}) : cfg_(cfg), m_(shape, 0.0), v_(shape, 0.0) {}

  void step(Tensor& param, const Tensor& grad, Real lr) {
    require_same_shape(param, grad, "adam");
    ++t_;
    const Real c1 = 1 - std::pow(cfg_.beta1, static_cast<Real>(t_));
    const Real c2 = 1 - std::pow(cfg_.beta2, static_cast<Real>(t_));
    for (std::size_t i = 0; i < param.numel(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1 - cfg_.beta2) * grad[i] * grad[i];
      if (lr == 0) continue;
      param[i] -= lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.eps);
    }
  }

  long steps() const { return t_; }

 private:
  AdamConfig cfg_;
  Tensor m_, v_;
  long t_ = 0;
};

}  // namespace stq
