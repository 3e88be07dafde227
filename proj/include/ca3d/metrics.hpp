// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ca3d/geometry.hpp"

namespace ca3d::metrics {

inline constexpr double kPsnrCap = 99.0;

/// 10 log10(1 / MSE) for images in [0, 1]; kPsnrCap when MSE is 0.
double psnr(const geometry::Image& a, const geometry::Image& b);
double mse(const geometry::Image& a, const geometry::Image& b);

struct SsimOptions {
  int window = 7;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Mean SSIM over all fully contained Gaussian windows (per channel, then
/// averaged).
double ssim(const geometry::Image& a, const geometry::Image& b, const SsimOptions& options = {});

struct MetricReport {
  std::vector<std::uint64_t> ids;
  std::vector<double> psnr, ssim;

  void add(std::uint64_t id, double psnr_db, double ssim_value);
  std::size_t count() const { return ids.size(); }
  double mean_psnr() const;
  double mean_ssim() const;
  /// Population standard deviations.
  double std_psnr() const;
  double std_ssim() const;
  /// `id\tpsnr\tssim` per sample, then MEAN and STD lines.
  std::string format() const;
};

}  // namespace ca3d::metrics
