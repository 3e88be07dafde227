// SPDX-License-Identifier: Apache-2.0
#include "ca3d/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "ca3d/error.hpp"

namespace ca3d::metrics {

namespace {

void check_same(const char* op, const geometry::Image& a, const geometry::Image& b) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width || a.data.size() != b.data.size()) {
    fail(ErrorCode::kShape, std::string(op) + ": image shapes differ (" + std::to_string(a.channels) + "x" +
                                std::to_string(a.height) + "x" + std::to_string(a.width) + " vs " +
                                std::to_string(b.channels) + "x" + std::to_string(b.height) + "x" +
                                std::to_string(b.width) + ")");
  }
  if (a.data.empty()) fail(ErrorCode::kShape, std::string(op) + ": empty image");
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

}  // namespace

double mse(const geometry::Image& a, const geometry::Image& b) {
  check_same("mse", a, b);
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    s += d * d;
  }
  return s / static_cast<double>(a.data.size());
}

double psnr(const geometry::Image& a, const geometry::Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const geometry::Image& a, const geometry::Image& b, const SsimOptions& o) {
  check_same("ssim", a, b);
  if (o.window < 1 || o.window % 2 == 0) fail(ErrorCode::kInvalidArgument, "ssim: window must be odd and positive");
  if (o.window > a.height || o.window > a.width) {
    fail(ErrorCode::kInvalidArgument, "ssim: window " + std::to_string(o.window) + " exceeds the image size");
  }
  if (!(o.sigma > 0.0)) fail(ErrorCode::kInvalidArgument, "ssim: sigma must be positive");
  const int k = o.window, r = k / 2;
  std::vector<double> w(static_cast<std::size_t>(k * k));
  double wsum = 0.0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double v = std::exp(-((i - r) * (i - r) + (j - r) * (j - r)) / (2.0 * o.sigma * o.sigma));
      w[i * k + j] = v;
      wsum += v;
    }
  }
  for (auto& v : w) v /= wsum;
  const double c1 = (o.k1 * o.dynamic_range) * (o.k1 * o.dynamic_range);
  const double c2 = (o.k2 * o.dynamic_range) * (o.k2 * o.dynamic_range);

  double total = 0.0;
  std::int64_t windows = 0;
  for (std::int64_t c = 0; c < a.channels; ++c) {
    for (std::int64_t y = 0; y + k <= a.height; ++y) {
      for (std::int64_t x = 0; x + k <= a.width; ++x) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (int i = 0; i < k; ++i) {
          for (int j = 0; j < k; ++j) {
            const double wt = w[i * k + j];
            const double va = a.at(c, y + i, x + j), vb = b.at(c, y + i, x + j);
            ma += wt * va;
            mb += wt * vb;
            saa += wt * va * va;
            sbb += wt * vb * vb;
            sab += wt * va * vb;
          }
        }
        const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        ++windows;
      }
    }
  }
  return total / static_cast<double>(windows);
}

void MetricReport::add(std::uint64_t id, double psnr_db, double ssim_value) {
  ids.push_back(id);
  psnr.push_back(psnr_db);
  ssim.push_back(ssim_value);
}

double MetricReport::mean_psnr() const { return mean_of(psnr); }
double MetricReport::mean_ssim() const { return mean_of(ssim); }
double MetricReport::std_psnr() const { return std_of(psnr); }
double MetricReport::std_ssim() const { return std_of(ssim); }

std::string MetricReport::format() const {
  std::string out;
  char buf[128];
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%llu\t%.6f\t%.6f\n", static_cast<unsigned long long>(ids[i]), psnr[i], ssim[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "MEAN\t%.6f\t%.6f\n", mean_psnr(), mean_ssim());
  out += buf;
  std::snprintf(buf, sizeof buf, "STD\t%.6f\t%.6f\n", std_psnr(), std_ssim());
  out += buf;
  return out;
}

}  // namespace ca3d::metrics
