// SPDX-License-Identifier: Apache-2.0
#include "ca3d/attention.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "ca3d/error.hpp"
#include "ca3d/ops.hpp"

namespace ca3d::attention {

void CACAConfig::validate(std::int64_t channels) const {
  if (!(sigma > 0.0)) fail(ErrorCode::kInvalidArgument, "caca: sigma must be positive");
  if (heads < 1 || channels % heads != 0) {
    fail(ErrorCode::kInvalidArgument,
         "caca: " + std::to_string(channels) + " channels not divisible by " + std::to_string(heads) + " heads");
  }
}

std::vector<float> column_bias(std::int64_t h, std::int64_t w, double sigma) {
  if (h < 1 || w < 1) fail(ErrorCode::kInvalidArgument, "column_bias: empty grid");
  if (!(sigma > 0.0)) fail(ErrorCode::kInvalidArgument, "column_bias: sigma must be positive");
  const std::int64_t n = h * w;
  std::vector<float> bias(static_cast<std::size_t>(n * n), 0.0f);
  if (std::isinf(sigma)) return bias;
  const double denom = 2.0 * sigma * sigma;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      const double d = static_cast<double>(i % w - j % w);
      bias[i * n + j] = d == 0.0 ? 0.0f : static_cast<float>(-(d * d) / denom);
    }
  }
  return bias;
}

Tensor column_bias_tensor(std::int64_t h, std::int64_t w, double sigma) {
  static std::mutex mu;
  static std::map<std::tuple<std::int64_t, std::int64_t, double>, Tensor> cache;
  std::lock_guard<std::mutex> lock(mu);
  const auto key = std::make_tuple(h, w, sigma);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  Tensor t = Tensor::from_data({h * w, h * w}, column_bias(h, w, sigma));
  cache.emplace(key, t);
  return t;
}

Tensor attention_probs(const Tensor& q, const Tensor& k, const Tensor& bias) {
  if (!q.defined() || !k.defined() || q.rank() != 3 || k.rank() != 3 || q.dim(2) != k.dim(2) ||
      q.dim(0) != k.dim(0)) {
    fail(ErrorCode::kShape, "attention: query " + (q.defined() ? shape_str(q.shape()) : "?") + " and key " +
                                (k.defined() ? shape_str(k.shape()) : "?") + " disagree on batch or head dim");
  }
  const float scale = 1.0f / std::sqrt(static_cast<float>(q.dim(2)));
  Tensor logits = ops::scale(ops::bmm_nt(q, k), scale);
  if (bias.defined()) {
    if (bias.rank() != 2 || bias.dim(0) != q.dim(1) || bias.dim(1) != k.dim(1)) {
      fail(ErrorCode::kShape, "attention: bias " + shape_str(bias.shape()) + " does not match " +
                                  std::to_string(q.dim(1)) + " queries x " + std::to_string(k.dim(1)) + " keys");
    }
    logits = ops::add(logits, bias);
  }
  return ops::softmax_lastdim(logits);
}

Tensor scaled_dot_product(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& bias) {
  if (!v.defined() || v.rank() != 3 || v.dim(0) != k.dim(0) || v.dim(1) != k.dim(1)) {
    fail(ErrorCode::kShape, "attention: value " + (v.defined() ? shape_str(v.shape()) : "?") +
                                " does not match key " + shape_str(k.shape()));
  }
  return ops::bmm(attention_probs(q, k, bias), v);
}

AttentionWeights AttentionWeights::create(std::int64_t c, bool output_projection, Rng& rng) {
  AttentionWeights w;
  w.wq = init_uniform({c, c}, c, rng);
  w.bq = init_uniform({c}, c, rng);
  w.wk = init_uniform({c, c}, c, rng);
  w.bk = init_uniform({c}, c, rng);
  w.wv = init_uniform({c, c}, c, rng);
  w.bv = init_uniform({c}, c, rng);
  if (output_projection) {
    w.wo = init_uniform({c, c}, c, rng);
    w.bo = init_uniform({c}, c, rng);
  }
  return w;
}

void AttentionWeights::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".wq", wq});
  out.push_back({prefix + ".bq", bq});
  out.push_back({prefix + ".wk", wk});
  out.push_back({prefix + ".bk", bk});
  out.push_back({prefix + ".wv", wv});
  out.push_back({prefix + ".bv", bv});
  if (wo.defined()) {
    out.push_back({prefix + ".wo", wo});
    out.push_back({prefix + ".bo", bo});
  }
}

namespace {

// [B, N, c] -> [B*heads, N, c/heads]
Tensor split_heads(const Tensor& x, int heads) {
  const auto b = x.dim(0), n = x.dim(1), c = x.dim(2);
  if (heads == 1) return x;
  Tensor t = ops::reshape(x, {b, n, heads, c / heads});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {b * heads, n, c / heads});
}

Tensor merge_heads(const Tensor& x, std::int64_t batch, int heads) {
  if (heads == 1) return x;
  const auto n = x.dim(1), dk = x.dim(2);
  Tensor t = ops::reshape(x, {batch, heads, n, dk});
  t = ops::permute(t, {0, 2, 1, 3});
  return ops::reshape(t, {batch, n, heads * dk});
}

void check_tokens(const Tensor& tar, const Tensor& ref, const AttentionWeights& w, int heads) {
  if (!tar.defined() || !ref.defined() || tar.rank() != 3 || ref.rank() != 3 || tar.dim(0) != ref.dim(0) ||
      tar.dim(2) != ref.dim(2) || tar.dim(2) != w.channels()) {
    fail(ErrorCode::kShape, "cross-attention: target tokens " + (tar.defined() ? shape_str(tar.shape()) : "?") +
                                " and reference tokens " + (ref.defined() ? shape_str(ref.shape()) : "?") +
                                " incompatible with width " + std::to_string(w.channels()));
  }
  if (heads < 1 || tar.dim(2) % heads != 0) {
    fail(ErrorCode::kShape, "cross-attention: " + std::to_string(tar.dim(2)) + " channels not divisible by " +
                                std::to_string(heads) + " heads");
  }
}

}  // namespace

Tensor multihead_cross_attention(const Tensor& tar, const Tensor& ref, const AttentionWeights& w, int heads,
                                 const Tensor& bias) {
  check_tokens(tar, ref, w, heads);
  const auto batch = tar.dim(0);
  Tensor q = split_heads(ops::linear(tar, w.wq, w.bq), heads);
  Tensor k = split_heads(ops::linear(ref, w.wk, w.bk), heads);
  Tensor v = split_heads(ops::linear(ref, w.wv, w.bv), heads);
  Tensor out = merge_heads(scaled_dot_product(q, k, v, bias), batch, heads);
  if (w.wo.defined()) out = ops::linear(out, w.wo, w.bo);
  return out;
}

Tensor grid_to_tokens(const Tensor& grid) {
  if (!grid.defined() || grid.rank() != 4) fail(ErrorCode::kShape, "grid_to_tokens: expected [B, c, h, w]");
  const auto b = grid.dim(0), c = grid.dim(1), hw = grid.dim(2) * grid.dim(3);
  return ops::permute(ops::reshape(grid, {b, c, hw}), {0, 2, 1});
}

Tensor tokens_to_grid(const Tensor& tokens, std::int64_t h, std::int64_t w) {
  if (!tokens.defined() || tokens.rank() != 3 || tokens.dim(1) != h * w) {
    fail(ErrorCode::kShape, "tokens_to_grid: cannot fold tokens into " + std::to_string(h) + "x" + std::to_string(w));
  }
  const auto b = tokens.dim(0), c = tokens.dim(2);
  return ops::reshape(ops::permute(tokens, {0, 2, 1}), {b, c, h, w});
}

namespace {

void check_grids(const Tensor& f_tar, const Tensor& f_ref) {
  if (!f_tar.defined() || !f_ref.defined() || f_tar.rank() != 4 || f_tar.shape() != f_ref.shape()) {
    fail(ErrorCode::kShape, "caca: target grid " + (f_tar.defined() ? shape_str(f_tar.shape()) : "?") +
                                " and reference grid " + (f_ref.defined() ? shape_str(f_ref.shape()) : "?") +
                                " must match");
  }
}

Tensor bias_for(const Tensor& f_tar, const CACAConfig& config) {
  if (!config.use_bias || std::isinf(config.sigma)) return Tensor();
  return column_bias_tensor(f_tar.dim(2), f_tar.dim(3), config.sigma);
}

}  // namespace

Tensor caca(const Tensor& f_tar, const Tensor& f_ref, const AttentionWeights& w, const CACAConfig& config) {
  check_grids(f_tar, f_ref);
  config.validate(f_tar.dim(1));
  Tensor out = multihead_cross_attention(grid_to_tokens(f_tar), grid_to_tokens(f_ref), w, config.heads,
                                         bias_for(f_tar, config));
  return tokens_to_grid(out, f_tar.dim(2), f_tar.dim(3));
}

Tensor caca_probs(const Tensor& f_tar, const Tensor& f_ref, const AttentionWeights& w, const CACAConfig& config) {
  check_grids(f_tar, f_ref);
  config.validate(f_tar.dim(1));
  Tensor q = split_heads(ops::linear(grid_to_tokens(f_tar), w.wq, w.bq), config.heads);
  Tensor k = split_heads(ops::linear(grid_to_tokens(f_ref), w.wk, w.bk), config.heads);
  return attention_probs(q, k, bias_for(f_tar, config));
}

InjectWeights InjectWeights::create(std::int64_t c, Rng& rng) {
  InjectWeights w;
  w.attn = AttentionWeights::create(c, false, rng);
  w.zero_w = Tensor::zeros({c, c, 1, 1}, true);
  w.zero_b = Tensor::zeros({c}, true);
  return w;
}

void InjectWeights::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  attn.collect(prefix + ".attn", out);
  out.push_back({prefix + ".zero_w", zero_w});
  out.push_back({prefix + ".zero_b", zero_b});
}

Tensor volume_tokens(const Tensor& f3d, int slabs) {
  if (!f3d.defined() || f3d.rank() != 5) fail(ErrorCode::kShape, "volume_tokens: expected [B, c, D, H, W]");
  const auto b = f3d.dim(0), c = f3d.dim(1), d = f3d.dim(2), h = f3d.dim(3), w = f3d.dim(4);
  if (slabs < 1 || d % slabs != 0) {
    fail(ErrorCode::kShape, "volume_tokens: depth " + std::to_string(d) + " not divisible into " +
                                std::to_string(slabs) + " slabs");
  }
  Tensor pooled = ops::mean_axis(ops::reshape(f3d, {b, c, slabs, d / slabs, h, w}), 3);
  return ops::permute(ops::reshape(pooled, {b, c, slabs * h * w}), {0, 2, 1});
}

Tensor inject_3d(const Tensor& f_caca, const Tensor& f3d, const InjectWeights& w, int heads, int slabs) {
  if (!f_caca.defined() || f_caca.rank() != 4) fail(ErrorCode::kShape, "inject_3d: expected [B, c, h, w]");
  const auto b = f_caca.dim(0), c = f_caca.dim(1), h = f_caca.dim(2), wd = f_caca.dim(3);
  if (c != w.attn.channels()) {
    fail(ErrorCode::kShape, "inject_3d: feature width " + std::to_string(c) + " but weights expect " +
                                std::to_string(w.attn.channels()));
  }
  if (!f3d.defined()) {
    // Zero volume tokens make every key equal, so attention returns the value
    // bias for each query.
    Tensor attended = ops::reshape(w.attn.bv, {1, c, 1, 1});
    return ops::add(f_caca, ops::conv2d(attended, w.zero_w, w.zero_b, 1, 0));
  }
  if (f3d.rank() != 5 || f3d.dim(0) != b || f3d.dim(1) != c) {
    fail(ErrorCode::kShape, "inject_3d: volume " + shape_str(f3d.shape()) + " does not match features " +
                                shape_str(f_caca.shape()));
  }
  Tensor attended = multihead_cross_attention(grid_to_tokens(f_caca), volume_tokens(f3d, slabs), w.attn, heads,
                                              Tensor());
  return ops::add(f_caca, ops::conv2d(tokens_to_grid(attended, h, wd), w.zero_w, w.zero_b, 1, 0));
}

}  // namespace ca3d::attention
