// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "ca3d/tensor.hpp"

// Differentiable primitives. Every op validates shapes and throws
// ca3d::Error(kShape) naming itself and the offending shapes.
namespace ca3d::ops {

// Elementwise with numpy-style broadcasting (right-aligned).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor square(const Tensor& a);
Tensor silu(const Tensor& a);

// a: [M, K], b: [K, N].
Tensor matmul(const Tensor& a, const Tensor& b);
// a: [B, M, K], b: [B, K, N].
Tensor bmm(const Tensor& a, const Tensor& b);
// a: [B, M, K], b: [B, N, K]; computes a @ b^T per batch.
Tensor bmm_nt(const Tensor& a, const Tensor& b);
// x: [..., in], w: [in, out], bias: [out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// x: [B, C, H, W], w: [O, C, k, k], bias: [O] or undefined. Zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
// x: [B, C, D, H, W], w: [O, C, k, k, k], stride 1, zero padding.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, int padding);
// Nearest-neighbour 2x upsample of the last two axes of [B, C, H, W].
Tensor upsample_nearest2x(const Tensor& x);
// Non-overlapping mean pooling of the last two axes by `factor`.
Tensor avg_pool2d(const Tensor& x, int factor);

Tensor softmax_lastdim(const Tensor& x);
// x: [B, C, ...]; statistics per (sample, group) over channels-in-group and all
// trailing axes. gamma/beta: [C].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<int>& perm);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t length);
// Mean over one axis, which is removed from the shape.
Tensor mean_axis(const Tensor& x, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
// mean((a - b)^2) as a scalar.
Tensor mse(const Tensor& a, const Tensor& b);

}  // namespace ca3d::ops
