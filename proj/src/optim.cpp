// SPDX-License-Identifier: Apache-2.0
#include "ca3d/optim.hpp"

#include <cmath>

#include "ca3d/error.hpp"

namespace ca3d {

Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  std::vector<float> data(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.uniform(-bound, bound);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

AdamW::AdamW(std::vector<NamedParam> params, AdamWOptions options)
    : params_(std::move(params)), options_(options) {
  if (!(options_.lr > 0.0)) fail(ErrorCode::kInvalidArgument, "adamw: learning rate must be positive");
  if (options_.weight_decay < 0.0) fail(ErrorCode::kInvalidArgument, "adamw: weight decay must be non-negative");
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0f);
  }
}

void AdamW::step(bool allow_missing) {
  if (!allow_missing) {
    for (const auto& p : params_) {
      if (!p.tensor.has_grad()) fail(ErrorCode::kInvalidArgument, "adamw: parameter '" + p.name + "' has no gradient");
    }
  }
  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double lr = options_.lr, wd = options_.weight_decay, eps = options_.eps;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    auto data = t.mutable_data();
    const bool has = t.has_grad();
    const auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = has ? grad[j] : 0.0;
      m[j] = static_cast<float>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<float>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      const double p = data[j];
      data[j] = static_cast<float>(p - lr * (wd * p + mhat / (std::sqrt(vhat) + eps)));
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

}  // namespace ca3d
