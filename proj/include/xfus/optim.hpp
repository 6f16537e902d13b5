// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "xfus/tensor.hpp"

namespace xfus {

enum class OptKind : std::uint8_t { sgd = 0, adam = 1 };

const char* to_string(OptKind k);
OptKind opt_kind_from_string(std::string_view s);

/// Deterministic first-order update over a NamedTensorMap. `direction` is -1
/// for descent on a loss and +1 for ascent on an objective. Adam state is
/// keyed by parameter name and created lazily on first sight.
class Optimizer {
 public:
  Optimizer(OptKind kind, double lr, double beta1 = 0.9, double beta2 = 0.999,
            double eps = 1e-8)
      : kind_(kind), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) fail(ErrorKind::InvalidArgument, "learning rate must be positive");
  }

  void step(NamedTensorMap& params, const NamedTensorMap& grads, double direction) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    NamedTensorMap next;
    for (const auto& [name, p] : params) {
      const Tensor& g = grads.at(name);
      if (!p.same_shape(g)) {
        fail(ErrorKind::ShapeMismatch,
             "gradient for '" + name + "' has shape " + shape_str(g.shape()));
      }
      std::vector<double> out(p.numel());
      auto pd = p.data();
      auto gd = g.data();
      if (kind_ == OptKind::sgd) {
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = pd[i] + direction * lr_ * gd[i];
        }
      } else {
        auto& m = m_[name];
        auto& v = v_[name];
        if (m.empty()) m.assign(p.numel(), 0.0);
        if (v.empty()) v.assign(p.numel(), 0.0);
        for (std::size_t i = 0; i < out.size(); ++i) {
          m[i] = beta1_ * m[i] + (1.0 - beta1_) * gd[i];
          v[i] = beta2_ * v[i] + (1.0 - beta2_) * gd[i] * gd[i];
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          out[i] = pd[i] + direction * lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
      }
      next.set(name, Tensor::from_data(p.shape(), std::move(out), p.dtype()));
    }
    params = std::move(next);
  }

 private:
  OptKind kind_;
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace xfus
