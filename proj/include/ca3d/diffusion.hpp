// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ca3d/optim.hpp"
#include "ca3d/rng.hpp"
#include "ca3d/tensor.hpp"

namespace ca3d::diffusion {

/// Linear beta schedule. Timesteps are 1-based: betas[t-1] belongs to step t,
/// and alpha_bar(0) == 1 by convention.
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0, beta_end = 0.0;
  std::vector<double> betas, alphas, alpha_bars;

  double alpha_bar(int t) const;
};

inline constexpr int kDefaultSteps = 1000;
inline constexpr double kBetaStart = 8.5e-4;
inline constexpr double kBetaEnd = 0.012;

NoiseSchedule make_schedule(int T, double beta_start = kBetaStart, double beta_end = kBetaEnd);

/// sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, t in [0, T] (t = 0 returns z0).
Tensor q_sample(const Tensor& z0, int t, const Tensor& eps, const NoiseSchedule& sched);
/// Per-item timesteps along dim 0.
Tensor q_sample(const Tensor& z0, std::span<const int> t, const Tensor& eps, const NoiseSchedule& sched);

/// 0: CC -> MLO (reference CC, target MLO); 1: MLO -> CC.
enum class Direction : int { kCCtoMLO = 0, kMLOtoCC = 1 };

std::string direction_name(Direction d);
Direction parse_direction(const std::string& name);

/// [sin(t f_0..f_{k-1}), cos(t f_0..f_{k-1})], f_i = 10000^(-i/k), k = dim/2.
std::vector<float> sinusoidal_embedding(int t, std::int64_t dim);

/// Timestep MLP plus a learned direction table with rows {d=0, d=1, null}.
struct ConditionParams {
  std::int64_t sin_dim = 0, emb_dim = 0;
  Tensor w1, b1, w2, b2;
  Tensor direction_table;  // [3, emb_dim], zero-initialised

  static ConditionParams create(std::int64_t sin_dim, std::int64_t emb_dim, Rng& rng);
  void collect(const std::string& prefix, std::vector<NamedParam>& out) const;
};

/// c_emb = MLP(sinusoid(t)) + table[d or null]; one row per batch item.
Tensor cond_embedding(std::span<const int> t, std::span<const Direction> d, const std::vector<bool>& null_cond,
                      const ConditionParams& params);

/// eps_uncond + s (eps_cond - eps_uncond).
Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double s);

struct DenoiseInput {
  Tensor z_t;                 // [B, 1, H, W]
  std::vector<int> t;         // per item, 1..T
  std::vector<Direction> d;   // per item
  std::vector<bool> null_cond;
  Tensor z_ref;               // clean reference latent, zero where null
  Tensor z_ref_noisy;         // reference noised to t, zero where null
};

class Denoiser {
 public:
  virtual ~Denoiser() = default;
  virtual Tensor predict_noise(const DenoiseInput& in) = 0;
};

struct TrainBatch {
  Tensor ref;                 // [B, 1, H, W]
  Tensor tar;                 // [B, 1, H, W]
  std::vector<Direction> d;
};

struct LossOutput {
  Tensor loss;
  std::int64_t null_count = 0;
  std::vector<int> t;
};

/// Noise-prediction MSE with classifier-free-guidance condition dropout.
LossOutput training_loss(Denoiser& model, const TrainBatch& batch, const NoiseSchedule& sched, double mask_prob,
                         Rng& rng);

/// Evenly spaced descending timesteps, e.g. T=200, steps=50 -> 200, 196, ..., 4.
std::vector<int> sampling_timesteps(int T, int steps);

struct SamplerOptions {
  int steps = 50;
  double guidance = 3.0;
  std::uint64_t seed = 0;
  /// Skip the unconditional branch entirely.
  bool cond_only = false;
  /// Clamp the predicted clean latent each step.
  bool clip_denoised = true;
  float clip_lo = 0.0f, clip_hi = 1.0f;
};

/// Deterministic (eta = 0) non-Markovian reverse process with classifier-free
/// guidance. z_ref: clean reference latents [B, 1, H, W]. Returns the
/// denoised target latents.
Tensor sample(Denoiser& model, const Tensor& z_ref, const std::vector<Direction>& d, const NoiseSchedule& sched,
              const SamplerOptions& options);

}  // namespace ca3d::diffusion
