// SPDX-License-Identifier: Apache-2.0
#include "ca3d/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "ca3d/error.hpp"
#include "ca3d/ops.hpp"

namespace ca3d::diffusion {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T) fail(ErrorCode::kInvalidArgument, "schedule: timestep " + std::to_string(t) + " outside [0, " +
                                                            std::to_string(T) + "]");
  return t == 0 ? 1.0 : alpha_bars[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) fail(ErrorCode::kInvalidArgument, "make_schedule: T must be at least 1");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    fail(ErrorCode::kInvalidArgument, "make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  double ab = 1.0;
  for (int i = 0; i < T; ++i) {
    const double beta = T == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(T - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    ab *= 1.0 - beta;
    s.alpha_bars.push_back(ab);
  }
  return s;
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched) {
  if (!z0.defined() || !eps.defined() || z0.shape() != eps.shape()) {
    fail(ErrorCode::kShape, "q_sample: noise shape does not match the latent shape");
  }
  const double ab = sched.alpha_bar(t);
  return ops::add(ops::scale(z0, static_cast<float>(std::sqrt(ab))),
                  ops::scale(eps, static_cast<float>(std::sqrt(1.0 - ab))));
}

Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched) {
  if (!z0.defined() || !eps.defined() || z0.shape() != eps.shape()) {
    fail(ErrorCode::kShape, "q_sample: noise shape does not match the latent shape");
  }
  const auto b = z0.dim(0);
  if (static_cast<std::int64_t>(t.size()) != b) fail(ErrorCode::kShape, "q_sample: one timestep per item required");
  std::vector<float> a(static_cast<std::size_t>(b)), s(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    const double ab = sched.alpha_bar(t[i]);
    a[i] = static_cast<float>(std::sqrt(ab));
    s[i] = static_cast<float>(std::sqrt(1.0 - ab));
  }
  Shape coef_shape(static_cast<std::size_t>(z0.rank()), 1);
  coef_shape[0] = b;
  return ops::add(ops::mul(z0, Tensor::from_data(coef_shape, std::move(a))),
                  ops::mul(eps, Tensor::from_data(coef_shape, std::move(s))));
}

std::string direction_name(Direction d) { return d == Direction::kCCtoMLO ? "cc2mlo" : "mlo2cc"; }

Direction parse_direction(const std::string& name) {
  if (name == "cc2mlo") return Direction::kCCtoMLO;
  if (name == "mlo2cc") return Direction::kMLOtoCC;
  fail(ErrorCode::kUsage, "unknown direction '" + name + "' (expected cc2mlo or mlo2cc)");
}

std::vector<float> sinusoidal_embedding(int t, std::int64_t dim) {
  if (dim < 2 || dim % 2) fail(ErrorCode::kInvalidArgument, "sinusoidal_embedding: dim must be even");
  const std::int64_t half = dim / 2;
  std::vector<float> out(static_cast<std::size_t>(dim));
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double a = static_cast<double>(t) * freq;
    out[i] = static_cast<float>(std::sin(a));
    out[half + i] = static_cast<float>(std::cos(a));
  }
  return out;
}

ConditionParams ConditionParams::create(std::int64_t sin_dim, std::int64_t emb_dim, Rng& rng) {
  ConditionParams p;
  p.sin_dim = sin_dim;
  p.emb_dim = emb_dim;
  p.w1 = init_uniform({sin_dim, emb_dim}, sin_dim, rng);
  p.b1 = init_uniform({emb_dim}, sin_dim, rng);
  p.w2 = init_uniform({emb_dim, emb_dim}, emb_dim, rng);
  p.b2 = init_uniform({emb_dim}, emb_dim, rng);
  p.direction_table = Tensor::zeros({3, emb_dim}, true);
  return p;
}

void ConditionParams::collect(const std::string& prefix, std::vector<NamedParam>& out) const {
  out.push_back({prefix + ".w1", w1});
  out.push_back({prefix + ".b1", b1});
  out.push_back({prefix + ".w2", w2});
  out.push_back({prefix + ".b2", b2});
  out.push_back({prefix + ".direction_table", direction_table});
}

Tensor cond_embedding(std::span<const int> t, std::span<const Direction> d, const std::vector<bool>& null_cond,
                      const ConditionParams& params) {
  const auto b = static_cast<std::int64_t>(t.size());
  if (b == 0 || d.size() != t.size() || null_cond.size() != t.size()) {
    fail(ErrorCode::kShape, "cond_embedding: timestep, direction and null lists must have equal non-zero length");
  }
  std::vector<float> sin_rows;
  sin_rows.reserve(static_cast<std::size_t>(b * params.sin_dim));
  std::vector<float> onehot(static_cast<std::size_t>(b * 3), 0.0f);
  for (std::int64_t i = 0; i < b; ++i) {
    const auto row = sinusoidal_embedding(t[i], params.sin_dim);
    sin_rows.insert(sin_rows.end(), row.begin(), row.end());
    const int di = static_cast<int>(d[i]);
    if (di != 0 && di != 1) fail(ErrorCode::kInvalidArgument, "cond_embedding: direction must be 0 or 1");
    onehot[i * 3 + (null_cond[i] ? 2 : di)] = 1.0f;
  }
  Tensor s = Tensor::from_data({b, params.sin_dim}, std::move(sin_rows));
  Tensor t_emb = ops::linear(ops::silu(ops::linear(s, params.w1, params.b1)), params.w2, params.b2);
  Tensor d_emb = ops::matmul(Tensor::from_data({b, 3}, std::move(onehot)), params.direction_table);
  return ops::add(t_emb, d_emb);
}

Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double s) {
  if (!eps_cond.defined() || !eps_uncond.defined() || eps_cond.shape() != eps_uncond.shape()) {
    fail(ErrorCode::kShape, "cfg_combine: conditional " + (eps_cond.defined() ? shape_str(eps_cond.shape()) : "?") +
                                " vs unconditional " + (eps_uncond.defined() ? shape_str(eps_uncond.shape()) : "?"));
  }
  const auto& c = eps_cond.data();
  const auto& u = eps_uncond.data();
  std::vector<float> out(c.size());
  const float sf = static_cast<float>(s);
  for (std::size_t i = 0; i < c.size(); ++i) out[i] = u[i] + sf * (c[i] - u[i]);
  if (s == 1.0) out.assign(c.begin(), c.end());
  if (s == 0.0) out.assign(u.begin(), u.end());
  return Tensor::from_data(eps_cond.shape(), std::move(out));
}

namespace {

Tensor gaussian_like(const Shape& shape, Rng& rng) {
  std::vector<float> v(static_cast<std::size_t>(shape_numel(shape)));
  rng.fill_normal(v);
  return Tensor::from_data(shape, std::move(v));
}

// Zeroes the items of a [B, ...] tensor whose flag is set.
Tensor mask_items(const Tensor& x, const std::vector<bool>& zero) {
  std::vector<float> v = x.to_vector();
  const auto per = x.numel() / x.dim(0);
  for (std::int64_t i = 0; i < x.dim(0); ++i) {
    if (zero[i]) std::fill_n(v.begin() + i * per, per, 0.0f);
  }
  return Tensor::from_data(x.shape(), std::move(v));
}

}  // namespace

LossOutput training_loss(Denoiser& model, const TrainBatch& batch, const NoiseSchedule& sched, double mask_prob,
                         Rng& rng) {
  if (!batch.tar.defined() || batch.tar.dim(0) == 0) fail(ErrorCode::kInvalidArgument, "training_loss: empty batch");
  if (!batch.ref.defined() || batch.ref.shape() != batch.tar.shape() ||
      static_cast<std::int64_t>(batch.d.size()) != batch.tar.dim(0)) {
    fail(ErrorCode::kShape, "training_loss: reference, target and direction counts disagree");
  }
  if (mask_prob < 0.0 || mask_prob > 1.0) fail(ErrorCode::kInvalidArgument, "training_loss: mask_prob outside [0, 1]");
  const auto b = batch.tar.dim(0);
  LossOutput out;
  std::vector<bool> null_cond(static_cast<std::size_t>(b));
  for (std::int64_t i = 0; i < b; ++i) {
    out.t.push_back(1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.T))));
    null_cond[i] = mask_prob > 0.0 && rng.uniform_double() < mask_prob;
    out.null_count += null_cond[i] ? 1 : 0;
  }
  Tensor eps = gaussian_like(batch.tar.shape(), rng);
  Tensor eps_ref = gaussian_like(batch.ref.shape(), rng);

  DenoiseInput in;
  in.t = out.t;
  in.d = batch.d;
  in.null_cond = null_cond;
  in.z_t = q_sample(batch.tar, in.t, eps, sched);
  in.z_ref = out.null_count ? mask_items(batch.ref, null_cond) : batch.ref;
  in.z_ref_noisy = mask_items(q_sample(batch.ref, in.t, eps_ref, sched), null_cond);
  out.loss = ops::mse(model.predict_noise(in), eps);
  return out;
}

std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) {
    fail(ErrorCode::kUsage, "sampling steps " + std::to_string(steps) + " must lie in [1, T=" + std::to_string(T) + "]");
  }
  std::vector<int> ts;
  for (int i = steps - 1; i >= 0; --i) {
    ts.push_back(static_cast<int>((static_cast<std::int64_t>(i) + 1) * T / steps));
  }
  return ts;
}

Tensor sample(Denoiser& model, const Tensor& z_ref, const std::vector<Direction>& d, const NoiseSchedule& sched,
              const SamplerOptions& options) {
  if (!z_ref.defined() || z_ref.rank() != 4 || static_cast<std::int64_t>(d.size()) != z_ref.dim(0)) {
    fail(ErrorCode::kShape, "sample: expected [B, 1, H, W] references and one direction per item");
  }
  const auto ts = sampling_timesteps(sched.T, options.steps);
  NoGradGuard no_grad;
  Rng rng(options.seed);
  const auto b = z_ref.dim(0);
  const auto per = z_ref.numel() / b;
  const bool guided = !options.cond_only;

  Tensor z = gaussian_like(z_ref.shape(), rng);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    // Reference noised to the synchronised timestep.
    Tensor z_ref_noisy = q_sample(z_ref, t, gaussian_like(z_ref.shape(), rng), sched);

    DenoiseInput in;
    in.t.assign(static_cast<std::size_t>(guided ? 2 * b : b), t);
    in.d = d;
    in.null_cond.assign(static_cast<std::size_t>(b), false);
    if (guided) {
      const Tensor zeros = Tensor::zeros(z_ref.shape());
      in.d.insert(in.d.end(), d.begin(), d.end());
      in.null_cond.resize(static_cast<std::size_t>(2 * b), true);
      in.z_t = ops::concat({z, z}, 0);
      in.z_ref = ops::concat({z_ref, zeros}, 0);
      in.z_ref_noisy = ops::concat({z_ref_noisy, zeros}, 0);
    } else {
      in.z_t = z;
      in.z_ref = z_ref;
      in.z_ref_noisy = z_ref_noisy;
    }
    Tensor eps = model.predict_noise(in);
    if (guided) eps = cfg_combine(ops::slice(eps, 0, 0, b), ops::slice(eps, 0, b, b), options.guidance);

    const double ab = sched.alpha_bar(t), ab_prev = sched.alpha_bar(t_prev);
    const double sa = std::sqrt(ab), s1 = std::sqrt(1.0 - ab);
    const double sa_prev = std::sqrt(ab_prev), s1_prev = std::sqrt(1.0 - ab_prev);
    std::vector<float> next(static_cast<std::size_t>(z.numel()));
    const auto& zd = z.data();
    const auto& ed = eps.data();
    for (std::size_t j = 0; j < next.size(); ++j) {
      double x0 = (zd[j] - s1 * ed[j]) / sa;
      double e = ed[j];
      if (options.clip_denoised) {
        const double c = std::clamp(x0, static_cast<double>(options.clip_lo), static_cast<double>(options.clip_hi));
        if (c != x0) {
          x0 = c;
          e = (zd[j] - sa * x0) / s1;
        }
      }
      next[j] = static_cast<float>(sa_prev * x0 + s1_prev * e);
    }
    z = Tensor::from_data(z.shape(), std::move(next));
  }
  (void)per;
  return z;
}

}  // namespace ca3d::diffusion
