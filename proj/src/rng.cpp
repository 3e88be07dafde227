// SPDX-License-Identifier: Apache-2.0
#include "ca3d/rng.hpp"

#include <cmath>
#include <numbers>

namespace ca3d {

namespace {
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ULL;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x ^= x >> 30;
  x *= 0xBF58476D1CE4E5B9ULL;
  x ^= x >> 27;
  x *= 0x94D049BB133111EBULL;
  x ^= x >> 31;
  return x;
}

std::uint64_t Rng::next_u64() {
  ++counter_;
  return splitmix64(key_ + counter_ * kGolden);
}

float Rng::uniform() {
  return static_cast<float>(next_u64() >> 40) * 0x1.0p-24f;
}

double Rng::uniform_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  // Lemire's multiply-shift; the bias is below 2^-64 * n and irrelevant here.
  const unsigned __int128 m =
      static_cast<unsigned __int128>(next_u64()) * static_cast<unsigned __int128>(n);
  return static_cast<std::uint64_t>(m >> 64);
}

float Rng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  double u1 = uniform_double();
  const double u2 = uniform_double();
  if (u1 < 1e-300) u1 = 1e-300;
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double a = 2.0 * std::numbers::pi * u2;
  spare_ = static_cast<float>(r * std::sin(a));
  has_spare_ = true;
  return static_cast<float>(r * std::cos(a));
}

void Rng::fill_normal(std::vector<float>& out) {
  for (auto& v : out) v = normal();
}

Rng Rng::fork(std::uint64_t stream) const {
  return Rng(splitmix64(key_ ^ splitmix64(stream + kGolden)));
}

}  // namespace ca3d
