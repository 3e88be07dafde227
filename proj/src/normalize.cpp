// SPDX-License-Identifier: Apache-2.0
#include "ca3d/normalize.hpp"

#include <algorithm>
#include <cmath>

#include "ca3d/error.hpp"

namespace ca3d::data {

double percentile(std::vector<float> values, double p) {
  if (values.empty()) fail(ErrorCode::kInvalidArgument, "percentile: empty input");
  std::sort(values.begin(), values.end());
  const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return static_cast<double>(values[lo]) + frac * (static_cast<double>(values[hi]) - values[lo]);
}

std::vector<float> normalize_truncation(std::span<const float> img, double p_lo, double p_hi) {
  if (!(p_lo >= 0.0 && p_lo < p_hi && p_hi <= 100.0)) {
    fail(ErrorCode::kInvalidArgument, "normalize_truncation: need 0 <= p_lo < p_hi <= 100");
  }
  std::vector<float> nonzero;
  for (float v : img) {
    if (!std::isfinite(v)) fail(ErrorCode::kNumerical, "normalize_truncation: non-finite pixel");
    if (v != 0.0f) nonzero.push_back(v);
  }
  std::vector<float> out(img.begin(), img.end());
  if (nonzero.empty()) return out;
  const double lo = percentile(nonzero, p_lo);
  const double hi = percentile(std::move(nonzero), p_hi);
  const double range = hi - lo;
  for (auto& v : out) {
    if (range <= 0.0) {
      v = 0.0f;
      continue;
    }
    const double c = std::clamp(static_cast<double>(v), lo, hi);
    v = static_cast<float>((c - lo) / range);
  }
  return out;
}

}  // namespace ca3d::data
