// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "ca3d/diffusion.hpp"
#include "ca3d/unet.hpp"

namespace ca3d {

/// Every tunable for training and inference. Text form: `key = value`
/// lines, `#` starts a comment.
struct RunConfig {
  std::uint64_t seed = 0;
  // diffusion
  int T = 200;
  double beta_start = diffusion::kBetaStart;
  double beta_end = diffusion::kBetaEnd;
  double mask_prob = 0.1;
  double guidance = 3.0;
  int sample_steps = 50;
  bool clip_denoised = true;
  // optimisation
  double lr = 1e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm, 0 disables
  int batch_size = 16;
  std::int64_t train_steps = 2000;
  int log_every = 50;
  // model (image_size, sigma and the ablation switches live here too)
  unet::UNetConfig model;

  void validate() const;
  diffusion::NoiseSchedule schedule() const;
  diffusion::SamplerOptions sampler(std::uint64_t seed) const;
};

/// Unknown keys, malformed values and failed validation throw
/// ErrorCode::kUsage naming the line.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// All fields, defaults included, in a fixed order.
std::string emit_config(const RunConfig& config);

}  // namespace ca3d
