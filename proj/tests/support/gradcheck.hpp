// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ca3d/rng.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d::testing {

Tensor randn(const Shape& shape, Rng& rng, float scale = 1.0f, bool requires_grad = false);
Tensor uniform(const Shape& shape, Rng& rng, float lo, float hi, bool requires_grad = false);

struct GradCheckResult {
  /// ||analytic - numeric|| / max(||analytic||, ||numeric||) over checked entries.
  double rel_err = 0.0;
  std::size_t entries = 0;
  double analytic_norm = 0.0;
};

/// Checks d/dx of sum(f(x) * r) for a fixed random r against central
/// differences with step h. Inputs become leaves with requires_grad set; at
/// most max_entries entries per input are perturbed.
GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           Rng& rng, double h = 1e-3, std::size_t max_entries = 48);

/// Scalar loss version: `loss` must rebuild the graph from the current
/// parameter values on each call. Checks only the listed (tensor, index)
/// entries.
struct ParamEntry {
  Tensor tensor;
  std::int64_t index = 0;
};
GradCheckResult scalar_grad_check(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                                  const std::vector<ParamEntry>& entries, double h);

struct NamedCheck {
  std::string name;
  GradCheckResult result;
};

/// Every differentiable primitive on at least five shapes each.
std::vector<NamedCheck> primitive_grad_suite(std::uint64_t seed);

/// Tiny UNet (base 8, 8x8 input): the diffusion loss against 20 random
/// parameter entries.
GradCheckResult tiny_unet_grad_check(std::uint64_t seed);

}  // namespace ca3d::testing
