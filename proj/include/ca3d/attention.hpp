// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "ca3d/optim.hpp"
#include "ca3d/rng.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d::attention {

struct CACAConfig {
  double sigma = 5.0;
  int heads = 4;
  /// When false the column bias is dropped (equivalent to sigma = infinity).
  bool use_bias = true;

  void validate(std::int64_t channels) const;
};

/// Entry (i, j) = -(col(i) - col(j))^2 / (2 sigma^2), col(i) = i mod w.
/// Returned row-major with N = h * w. An infinite sigma yields all zeros.
std::vector<float> column_bias(std::int64_t h, std::int64_t w, double sigma);

/// Shared constant tensor [N, N], built once per (h, w, sigma).
Tensor column_bias_tensor(std::int64_t h, std::int64_t w, double sigma);

/// softmax(q k^T / sqrt(d) + bias) over keys. q: [B, Nq, d], k: [B, Nk, d],
/// bias: [Nq, Nk] or undefined. Returns [B, Nq, Nk].
Tensor attention_probs(const Tensor& q, const Tensor& k, const Tensor& bias);

/// Scaled dot-product attention; v: [B, Nk, dv]. Returns [B, Nq, dv].
Tensor scaled_dot_product(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias);

inline Tensor standard_cross_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  return scaled_dot_product(q, k, v, Tensor());
}

/// Query/key/value projections (c x c, applied as tokens @ W + b) and an
/// optional output projection.
struct AttentionWeights {
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;

  static AttentionWeights create(std::int64_t channels, bool output_projection, Rng& rng);
  std::int64_t channels() const { return wq.dim(0); }
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Multi-head cross-attention on token sequences. tar: [B, N, c],
/// ref: [B, M, c], bias: [N, M] or undefined. Output [B, N, c], passed
/// through the output projection when the weights carry one.
Tensor multihead_cross_attention(const Tensor& tar, const Tensor& ref, const AttentionWeights& w, int heads,
                                 const Tensor& bias);

/// [B, c, h, w] -> [B, h*w, c] (row-major spatial flattening).
Tensor grid_to_tokens(const Tensor& grid);
/// [B, h*w, c] -> [B, c, h, w].
Tensor tokens_to_grid(const Tensor& tokens, std::int64_t h, std::int64_t w);

/// Column-aware cross-attention: queries from the target grid, keys and
/// values from the reference grid, column bias added before the softmax.
/// f_tar, f_ref: [B, c, h, w]. Returns [B, c, h, w].
Tensor caca(const Tensor& f_tar, const Tensor& f_ref, const AttentionWeights& w, const CACAConfig& config);

/// Attention probabilities used inside caca, [B * heads, N, N].
Tensor caca_probs(const Tensor& f_tar, const Tensor& f_ref, const AttentionWeights& w, const CACAConfig& config);

struct InjectWeights {
  AttentionWeights attn;  // no output projection; the zero conv plays that role
  Tensor zero_w;          // [c, c, 1, 1]
  Tensor zero_b;          // [c]

  static InjectWeights create(std::int64_t channels, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// Depth-pools a refined volume [B, c, D, H, W] to `slabs` slabs and
/// flattens it to [B, slabs*H*W, c] tokens.
Tensor volume_tokens(const Tensor& f3d, int slabs);

/// f_caca + ZeroConv(Attention(f_caca, f3d, f3d)). f_caca: [B, c, h, w];
/// f3d: refined volume [B, c, D, H', W'] or undefined for an all-zero volume.
Tensor inject_3d(const Tensor& f_caca, const Tensor& f3d, const InjectWeights& w, int heads, int slabs = 4);

}  // namespace ca3d::attention
