// SPDX-License-Identifier: Apache-2.0
#include "gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ca3d/attention.hpp"
#include "ca3d/diffusion.hpp"
#include "ca3d/ops.hpp"
#include "ca3d/unet.hpp"

namespace ca3d::testing {

Tensor randn(const Shape& shape, Rng& rng, float scale, bool requires_grad) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

Tensor uniform(const Shape& shape, Rng& rng, float lo, float hi, bool requires_grad) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  std::vector<float> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(v), requires_grad);
}

namespace {

double dot(const Tensor& a, const Tensor& r) {
  double s = 0.0;
  const auto x = a.data(), y = r.data();
  for (std::size_t i = 0; i < x.size(); ++i) s += static_cast<double>(x[i]) * y[i];
  return s;
}

GradCheckResult summarize(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0, na = 0, nn = 0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  GradCheckResult r;
  r.entries = analytic.size();
  r.analytic_norm = std::sqrt(na);
  const double denom = std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  r.rel_err = std::sqrt(diff) / denom;
  return r;
}

}  // namespace

GradCheckResult grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, std::vector<Tensor> inputs,
                           Rng& rng, double h, std::size_t max_entries) {
  for (auto& x : inputs) {
    x = x.detach();
    x.set_requires_grad(true);
  }
  const Tensor out = f(inputs);
  const Tensor r = randn(out.shape(), rng);
  ops::sum(ops::mul(out, r)).backward();

  std::vector<double> analytic, numeric;
  NoGradGuard ng;
  for (auto& x : inputs) {
    const auto n = static_cast<std::size_t>(x.numel());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    if (n > max_entries) {
      for (std::size_t i = 0; i < max_entries; ++i) std::swap(idx[i], idx[i + rng.below(n - i)]);
      idx.resize(max_entries);
    }
    const auto g = x.has_grad() ? x.grad() : std::span<const float>();
    for (const auto i : idx) {
      auto data = x.mutable_data();
      const float orig = data[i];
      data[i] = static_cast<float>(orig + h);
      const double hi = static_cast<double>(data[i]);
      const double lp = dot(f(inputs), r);
      data[i] = static_cast<float>(orig - h);
      const double lo = static_cast<double>(data[i]);
      const double lm = dot(f(inputs), r);
      data[i] = orig;
      numeric.push_back((lp - lm) / (hi - lo));
      analytic.push_back(g.empty() ? 0.0 : g[i]);
    }
  }
  return summarize(analytic, numeric);
}

GradCheckResult scalar_grad_check(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                                  const std::vector<ParamEntry>& entries, double h) {
  for (auto p : params) p.zero_grad();
  loss().backward();
  std::vector<double> analytic, numeric;
  for (const auto& e : entries) analytic.push_back(e.tensor.has_grad() ? e.tensor.grad()[e.index] : 0.0);
  NoGradGuard ng;
  for (const auto& e : entries) {
    Tensor t = e.tensor;
    auto data = t.mutable_data();
    const float orig = data[e.index];
    data[e.index] = static_cast<float>(orig + h);
    const double hi = data[e.index];
    const double lp = loss().item();
    data[e.index] = static_cast<float>(orig - h);
    const double lo = data[e.index];
    const double lm = loss().item();
    data[e.index] = orig;
    numeric.push_back((lp - lm) / (hi - lo));
  }
  return summarize(analytic, numeric);
}

std::vector<NamedCheck> primitive_grad_suite(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<NamedCheck> out;
  auto run = [&](const std::string& name, const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 std::vector<Tensor> in, double h = 1e-3) {
    out.push_back({name, grad_check(f, std::move(in), rng, h)});
  };
  using V = const std::vector<Tensor>&;

  const std::vector<std::pair<Shape, Shape>> binary_shapes = {
      {{2, 3, 4}, {2, 3, 4}}, {{2, 3, 4}, {4}},    {{2, 3, 4}, {3, 1}},
      {{5}, {5}},             {{2, 3, 1, 1}, {2, 3, 1, 1}}, {{3, 2, 2}, {1, 2, 2}}, {{2, 3, 2, 2}, {2, 3, 1, 1}}};
  for (const auto& [sa, sb] : binary_shapes) {
    const std::string tag = "[" + std::to_string(sa.size()) + "d/" + std::to_string(sb.size()) + "d]";
    run("add" + tag, [](V x) { return ops::add(x[0], x[1]); }, {randn(sa, rng), randn(sb, rng)});
    run("sub" + tag, [](V x) { return ops::sub(x[0], x[1]); }, {randn(sa, rng), randn(sb, rng)});
    run("mul" + tag, [](V x) { return ops::mul(x[0], x[1]); }, {randn(sa, rng), randn(sb, rng)});
  }

  const std::vector<Shape> unary_shapes = {{2, 3, 4}, {7}, {3, 5}, {2, 2, 2, 2}, {1, 6, 1}};
  for (const auto& s : unary_shapes) {
    run("scale", [](V x) { return ops::scale(x[0], -1.7f); }, {randn(s, rng)});
    run("add_scalar", [](V x) { return ops::add_scalar(x[0], 0.3f); }, {randn(s, rng)});
    run("square", [](V x) { return ops::square(x[0]); }, {randn(s, rng)});
    run("silu", [](V x) { return ops::silu(x[0]); }, {randn(s, rng)});
    run("softmax_lastdim", [](V x) { return ops::softmax_lastdim(x[0]); }, {randn(s, rng)});
    run("sum", [](V x) { return ops::sum(x[0]); }, {randn(s, rng)});
    run("mean", [](V x) { return ops::mean(x[0]); }, {randn(s, rng)});
    run("mse", [](V x) { return ops::mse(x[0], x[1]); }, {randn(s, rng), randn(s, rng)});
    run("reshape", [](V x) { return ops::reshape(x[0], {static_cast<std::int64_t>(x[0].numel())}); },
        {randn(s, rng)});
  }
  for (const auto& [s, axis] : std::vector<std::pair<Shape, int>>{
           {{2, 3, 4}, 2}, {{3, 4}, 0}, {{2, 3, 4}, 1}, {{2, 2, 2, 2}, 3}, {{1, 6, 1}, 1}}) {
    run("mean_axis", [axis](V x) { return ops::mean_axis(x[0], axis); }, {randn(s, rng)});
  }

  for (const auto& [m, k, n] : std::vector<std::array<std::int64_t, 3>>{{2, 3, 4}, {1, 5, 1}, {4, 4, 4}, {3, 1, 2},
                                                                         {6, 2, 5}}) {
    run("matmul", [](V x) { return ops::matmul(x[0], x[1]); }, {randn({m, k}, rng), randn({k, n}, rng)});
    run("bmm", [](V x) { return ops::bmm(x[0], x[1]); }, {randn({2, m, k}, rng), randn({2, k, n}, rng)});
    run("bmm_nt", [](V x) { return ops::bmm_nt(x[0], x[1]); }, {randn({3, m, k}, rng), randn({3, n, k}, rng)});
    run("linear", [](V x) { return ops::linear(x[0], x[1], x[2]); },
        {randn({2, m, k}, rng), randn({k, n}, rng), randn({n}, rng)});
  }

  struct ConvCase {
    Shape x, w;
    int stride, pad;
  };
  for (const auto& c : std::vector<ConvCase>{{{1, 1, 3, 3}, {1, 1, 3, 3}, 1, 1},
                                             {{2, 3, 5, 4}, {4, 3, 3, 3}, 1, 1},
                                             {{2, 2, 6, 6}, {3, 2, 3, 3}, 2, 1},
                                             {{1, 3, 4, 4}, {2, 3, 1, 1}, 1, 0},
                                             {{2, 2, 5, 5}, {2, 2, 3, 3}, 1, 0},
                                             {{1, 2, 8, 8}, {3, 2, 3, 3}, 2, 1}}) {
    run("conv2d", [c](V x) { return ops::conv2d(x[0], x[1], x[2], c.stride, c.pad); },
        {randn(c.x, rng), randn(c.w, rng, 0.5f), randn({c.w[0]}, rng)});
  }
  for (const auto& [xs, ws, pad] : std::vector<std::tuple<Shape, Shape, int>>{
           {{1, 1, 3, 3, 3}, {1, 1, 3, 3, 3}, 1},
           {{2, 2, 4, 3, 3}, {3, 2, 3, 3, 3}, 1},
           {{1, 3, 3, 4, 2}, {2, 3, 1, 1, 1}, 0},
           {{1, 2, 4, 4, 4}, {2, 2, 3, 3, 3}, 0},
           {{2, 1, 2, 3, 4}, {2, 1, 3, 3, 3}, 1}}) {
    run("conv3d", [pad](V x) { return ops::conv3d(x[0], x[1], x[2], pad); },
        {randn(xs, rng), randn(ws, rng, 0.5f), randn({ws[0]}, rng)});
  }

  for (const auto& s : std::vector<Shape>{{1, 1, 2, 2}, {2, 3, 3, 4}, {1, 2, 4, 4}, {2, 1, 1, 3}, {1, 4, 2, 5}}) {
    run("upsample_nearest2x", [](V x) { return ops::upsample_nearest2x(x[0]); }, {randn(s, rng)});
  }
  for (const auto& [s, f] : std::vector<std::pair<Shape, int>>{
           {{1, 1, 4, 4}, 2}, {{2, 3, 4, 6}, 2}, {{1, 2, 6, 6}, 3}, {{2, 1, 8, 8}, 4}, {{1, 2, 3, 3}, 1}}) {
    run("avg_pool2d", [f](V x) { return ops::avg_pool2d(x[0], f); }, {randn(s, rng)});
  }

  for (const auto& [s, g] : std::vector<std::pair<Shape, int>>{
           {{2, 4, 3, 3}, 2}, {{1, 6, 2, 2}, 3}, {{2, 4, 5}, 4}, {{1, 2, 2, 2, 2}, 1}, {{3, 8, 2, 1}, 4}}) {
    run("group_norm", [g](V x) { return ops::group_norm(x[0], g, x[1], x[2]); },
        {randn(s, rng), randn({s[1]}, rng), randn({s[1]}, rng)});
  }

  for (const auto& [s, p] : std::vector<std::pair<Shape, std::vector<int>>>{{{2, 3, 4}, {2, 0, 1}},
                                                                            {{2, 3}, {1, 0}},
                                                                            {{2, 3, 2, 2}, {0, 2, 3, 1}},
                                                                            {{1, 2, 3, 4}, {3, 2, 1, 0}},
                                                                            {{4, 1, 2}, {1, 2, 0}}}) {
    run("permute", [p](V x) { return ops::permute(x[0], p); }, {randn(s, rng)});
  }
  for (const auto& [sa, sb, axis] : std::vector<std::tuple<Shape, Shape, int>>{{{2, 3, 4}, {2, 1, 4}, 1},
                                                                               {{2, 3}, {4, 3}, 0},
                                                                               {{1, 2, 3, 3}, {1, 3, 3, 3}, 1},
                                                                               {{2, 2, 2}, {2, 2, 3}, 2},
                                                                               {{3}, {2}, 0}}) {
    run("concat", [axis](V x) { return ops::concat({x[0], x[1]}, axis); }, {randn(sa, rng), randn(sb, rng)});
  }
  for (const auto& [s, axis, start, len] : std::vector<std::tuple<Shape, int, int, int>>{
           {{2, 3, 4}, 1, 1, 2}, {{5}, 0, 0, 3}, {{2, 4, 2}, 2, 1, 1}, {{3, 3}, 0, 2, 1}, {{2, 6, 2, 2}, 1, 2, 4}}) {
    run("slice", [axis, start, len](V x) { return ops::slice(x[0], axis, start, len); }, {randn(s, rng)});
  }

  // Composite attention pieces built from the primitives above.
  for (const auto& [b, nq, nk, d] : std::vector<std::array<std::int64_t, 4>>{{1, 3, 3, 2}, {2, 4, 6, 3},
                                                                             {1, 6, 6, 4}, {2, 2, 5, 1},
                                                                             {1, 8, 8, 2}}) {
    const Tensor bias = attention::column_bias_tensor(1, nq == nk ? nq : 1, 2.0);
    const bool use_bias = nq == nk;
    run("attention_probs",
        [bias, use_bias](V x) { return attention::attention_probs(x[0], x[1], use_bias ? bias : Tensor()); },
        {randn({b, nq, d}, rng), randn({b, nk, d}, rng)});
  }
  return out;
}

GradCheckResult tiny_unet_grad_check(std::uint64_t seed) {
  unet::UNetConfig cfg;
  cfg.image_size = 8;
  cfg.base_channels = 8;
  cfg.channel_mults = {1, 2};
  cfg.res_blocks = 1;
  cfg.groups = 4;
  cfg.heads = 2;
  cfg.refine_hidden = 4;
  cfg.volume_slabs = 2;
  unet::UNet model(cfg, seed);
  const auto params = model.parameters();

  // Open the zero gates so gradients reach every branch.
  Rng rng(seed + 1);
  for (const auto& p : params) {
    if (p.name.find("zero_") != std::string::npos || p.name.find("direction_table") != std::string::npos) {
      Tensor t = p.tensor;
      for (auto& v : t.mutable_data()) v = 0.1f * rng.normal();
    }
  }

  diffusion::TrainBatch batch;
  batch.ref = uniform({2, 1, 8, 8}, rng, 0.0f, 1.0f);
  batch.tar = uniform({2, 1, 8, 8}, rng, 0.0f, 1.0f);
  batch.d = {diffusion::Direction::kCCtoMLO, diffusion::Direction::kMLOtoCC};
  const auto sched = diffusion::make_schedule(50);
  const std::uint64_t loss_seed = seed + 2;
  auto loss = [&]() {
    Rng r(loss_seed);
    return diffusion::training_loss(model, batch, sched, 0.0, r).loss;
  };

  // 20 random entries drawn from tensors that receive a gradient.
  std::vector<Tensor> tensors;
  for (const auto& p : params) tensors.push_back(p.tensor);
  for (auto t : tensors) t.zero_grad();
  loss().backward();
  std::vector<Tensor> live;
  for (const auto& t : tensors) {
    if (!t.has_grad()) continue;
    double n = 0;
    for (float g : t.grad()) n += std::abs(g);
    if (n > 0) live.push_back(t);
  }
  std::vector<ParamEntry> entries;
  for (int i = 0; i < 20; ++i) {
    const Tensor& t = live[rng.below(live.size())];
    entries.push_back({t, static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t.numel())))});
  }
  return scalar_grad_check(loss, tensors, entries, 1e-2);
}

}  // namespace ca3d::testing
