// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ca3d::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct GeometryOptions {
  std::uint64_t seed = 0;
  /// Added to the MLO angle used by the code under test. The expected values
  /// stay at 45 degrees, so a nonzero value makes projection checks fail.
  double theta_perturbation = 0.0;
};

/// Matrix identities, point projections, adjoint round trips, the
/// column-correlation statistic and a column-bias spot value.
std::vector<Check> geometry_suite(const GeometryOptions& options);

bool all_passed(const std::vector<Check>& checks);
/// One `PASS name (detail)` or `FAIL ...` line per check.
std::string format_checks(const std::vector<Check>& checks);

}  // namespace ca3d::verify
