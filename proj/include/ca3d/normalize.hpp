// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>
#include <vector>

namespace ca3d::data {

/// Linear-interpolated percentile (numpy "linear" rule) of `values`, p in [0, 100].
double percentile(std::vector<float> values, double p);

/// Clips to the [p_lo, p_hi] percentiles of the nonzero pixels and rescales
/// that window to [0, 1]. All-zero inputs are returned unchanged; a
/// degenerate window (v_lo == v_hi) maps everything to 0.
std::vector<float> normalize_truncation(std::span<const float> img, double p_lo = 1.0, double p_hi = 99.0);

}  // namespace ca3d::data
