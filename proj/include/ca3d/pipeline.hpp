// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "ca3d/config.hpp"
#include "ca3d/geometry.hpp"
#include "ca3d/metrics.hpp"
#include "ca3d/unet.hpp"

namespace ca3d::pipeline {

/// Parameters are stored as `param.<name>` float records next to a
/// `meta.config` text record (the full RunConfig) and `meta.step`.
void save_checkpoint(const std::filesystem::path& path, const RunConfig& config, const unet::UNet& model,
                     std::int64_t step);

struct LoadedModel {
  RunConfig config;
  std::int64_t step = 0;
  std::unique_ptr<unet::UNet> model;
};

LoadedModel load_checkpoint(const std::filesystem::path& path);

/// Stacks single-channel images into [B, 1, H, W].
Tensor stack_images(const std::vector<const geometry::Image*>& images);
std::vector<geometry::Image> unstack_images(const Tensor& batch);

struct LogEntry {
  std::int64_t step = 0;
  double loss = 0.0;
  double wallclock_ms = 0.0;
};

std::string format_log_line(const LogEntry& e);

struct TrainResult {
  std::unique_ptr<unet::UNet> model;
  std::vector<LogEntry> log;
  std::int64_t steps = 0;
};

/// Runs `steps` optimisation steps over `pairs`. Batch item i translates in
/// direction i % 2. The step-0 loss is logged alone; later entries hold the
/// mean loss of the preceding log_every steps. A non-finite loss throws
/// ErrorCode::kNumerical.
TrainResult train(const std::vector<geometry::ViewPair>& pairs, const RunConfig& config, std::int64_t steps,
                  const std::function<void(const LogEntry&)>& on_log = {});

struct TranslateOptions {
  int steps = 50;
  double guidance = 3.0;
  std::uint64_t seed = 0;
  bool clip_denoised = true;
  int batch = 16;
};

/// Samples targets for each reference. Chunk k of `batch` references uses
/// sampler seed (seed, k).
std::vector<geometry::Image> translate(unet::UNet& model, const diffusion::NoiseSchedule& sched,
                                       const std::vector<const geometry::Image*>& refs, diffusion::Direction d,
                                       const TranslateOptions& options);

enum class EvalMode {
  kModel,  // translate with the model
  kSelf,   // compare ground truth with itself (diagnostic)
  kCopy,   // prediction = the reference view
};

struct DirectionReport {
  diffusion::Direction direction;
  metrics::MetricReport report;
};

std::vector<DirectionReport> evaluate(unet::UNet* model, const diffusion::NoiseSchedule& sched,
                                      const std::vector<geometry::ViewPair>& pairs,
                                      const std::vector<diffusion::Direction>& directions, EvalMode mode,
                                      const TranslateOptions& options);

/// One block per report in the given order: `id\tpsnr\tssim` per pair, then
/// MEAN and STD. A block ends at its STD line.
std::string format_eval(const std::vector<DirectionReport>& reports);

}  // namespace ca3d::pipeline
