#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "addex/tensor.hpp"

namespace addex {

enum class OptimizerKind { kAdam, kSgd };

inline const char* to_string(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "sgd"; }

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::kAdam;
  if (s == "sgd") return OptimizerKind::kSgd;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

/// In-place update of a fixed parameter list. Adam uses (0.9, 0.999, 1e-8)
/// with bias correction; SGD is a plain step along the negative gradient.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, std::vector<Tensor*> params)
      : kind_(kind), lr_(learning_rate), params_(std::move(params)) {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
    for (Tensor* p : params_) {
      m_.emplace_back(p->shape, 0.0);
      v_.emplace_back(p->shape, 0.0);
    }
  }

  void step(const std::vector<Tensor>& grads) {
    if (grads.size() != params_.size()) throw std::invalid_argument("optimizer: gradient count mismatch");
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor& p = *params_[k];
      require_same_shape(p, grads[k], "optimizer step");
      const std::vector<double>& g = grads[k].data;
      if (kind_ == OptimizerKind::kSgd) {
        for (std::size_t i = 0; i < g.size(); ++i) p.data[i] -= lr_ * g[i];
        continue;
      }
      std::vector<double>& m = m_[k].data;
      std::vector<double>& v = v_[k].data;
      for (std::size_t i = 0; i < g.size(); ++i) {
        m[i] = kBeta1 * m[i] + (1.0 - kBeta1) * g[i];
        v[i] = kBeta2 * v[i] + (1.0 - kBeta2) * g[i] * g[i];
        p.data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + kEps);
      }
    }
  }

 private:
  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-8;

  OptimizerKind kind_;
  double lr_;
  std::vector<Tensor*> params_;
  std::vector<Tensor> m_, v_;
  long t_ = 0;
};

}  // namespace addex
