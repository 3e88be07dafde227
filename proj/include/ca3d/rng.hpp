// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace ca3d {

/// Counter-based generator: output i is splitmix64(key + (i+1) * golden).
///
/// The stream is fully determined by (key, counter), so any draw can be
/// reproduced on any platform without depending on std:: distribution
/// implementations. Normals use Box-Muller on two consecutive uniforms.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : key_(seed) {}

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 24 bits of mantissa.
  float uniform();
  double uniform_double();
  float uniform(float lo, float hi) { return lo + (hi - lo) * uniform(); }
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);
  float normal();
  void fill_normal(std::vector<float>& out);
  /// Derives an independent child stream.
  Rng fork(std::uint64_t stream) const;

  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  float spare_ = 0.0f;
};

std::uint64_t splitmix64(std::uint64_t x);

}  // namespace ca3d
