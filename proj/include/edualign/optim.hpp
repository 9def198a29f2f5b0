#pragma once

#include <cmath>
#include <vector>

#include "edualign/model.hpp"

namespace edualign::optim {

// Adam with bias correction and decoupled weight decay. Constants are fixed
// project-wide: beta1 0.9, beta2 0.999, eps 1e-8.
class Adam {
 public:
  explicit Adam(const model::ModelParameters& params, double weight_decay = 0.0)
      : weight_decay_(weight_decay) {
    for (const model::Tensor& t : params.tensors()) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void step(model::ModelParameters& params, const model::Gradients& g,
            double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < m_.size(); ++i) {
      std::vector<float>& p = params.tensors()[i].v;
      const std::vector<double>& grad = g.by_tensor[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m_[i][j] = kBeta1 * m_[i][j] + (1.0 - kBeta1) * grad[j];
        v_[i][j] = kBeta2 * v_[i][j] + (1.0 - kBeta2) * grad[j] * grad[j];
        const double mhat = m_[i][j] / bc1;
        const double vhat = v_[i][j] / bc2;
        const double pj = static_cast<double>(p[j]);
        p[j] = static_cast<float>(
            pj - lr * (mhat / (std::sqrt(vhat) + kEps) + weight_decay_ * pj));
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;
  double weight_decay_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace edualign::optim
