// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ca3d/rng.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d {

struct NamedParam {
  std::string name;
  Tensor tensor;
};

/// Fan-in scaled uniform init, bound 1/sqrt(fan_in).
Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng);

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// AdamW with decoupled weight decay:
///   p <- p - lr * (wd * p + m_hat / (sqrt(v_hat) + eps))
class AdamW {
 public:
  AdamW(std::vector<NamedParam> params, AdamWOptions options);

  /// Applies one update. Throws if a parameter has no gradient; pass
  /// `allow_missing` to treat missing gradients as zero.
  void step(bool allow_missing = false);
  void zero_grad();

  std::int64_t step_count() const { return step_; }
  const AdamWOptions& options() const { return options_; }
  void set_lr(double lr) { options_.lr = lr; }
  const std::vector<NamedParam>& params() const { return params_; }
  const std::vector<float>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<float>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedParam> params_;
  AdamWOptions options_;
  std::vector<std::vector<float>> m_, v_;
  std::int64_t step_ = 0;
};

}  // namespace ca3d
