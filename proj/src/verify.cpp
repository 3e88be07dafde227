// SPDX-License-Identifier: Apache-2.0
#include "ca3d/verify.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "ca3d/attention.hpp"
#include "ca3d/geometry.hpp"
#include "ca3d/rng.hpp"

namespace ca3d::verify {

namespace {

using geometry::Image;
using geometry::Mat3;
using geometry::Vec3;
using geometry::View;
using geometry::Volume3D;

constexpr double kPointTol = 1e-6;
constexpr double kRoundTripTol = 1e-5;
constexpr double kAdjointTol = 1e-4;
constexpr int kPoints = 1000;

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double max_abs_diff(const Mat3& a, const Mat3& b) {
  double m = 0.0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) m = std::max(m, std::abs(a[i][j] - b[i][j]));
  return m;
}

Mat3 identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

Check tolerance_check(std::string name, double err, double tol) {
  return {std::move(name), err <= tol, fmt("max err %.3g", err)};
}

std::vector<Vec3> random_points(Rng& rng) {
  std::vector<Vec3> pts(kPoints);
  for (auto& p : pts) p = {rng.uniform_double() * 64 - 32, rng.uniform_double() * 64 - 32, rng.uniform_double() * 64 - 32};
  return pts;
}

double corr(const std::vector<double>& a, const std::vector<double>& b) {
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

std::vector<double> column_sums(const Image& img) {
  std::vector<double> s(img.width, 0.0);
  for (std::int64_t y = 0; y < img.height; ++y)
    for (std::int64_t x = 0; x < img.width; ++x) s[x] += img.at(0, y, x);
  return s;
}

}  // namespace

std::vector<Check> geometry_suite(const GeometryOptions& options) {
  const double theta = geometry::kMloAngle + options.theta_perturbation;
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  Rng rng(options.seed);
  std::vector<Check> out;

  const Mat3 P = geometry::projection_matrix();
  const Mat3 R = geometry::rotation_matrix(theta);
  out.push_back(tolerance_check("projection_idempotent", max_abs_diff(geometry::multiply(P, P), P), kPointTol));
  out.push_back(tolerance_check("rotation_orthonormal",
                                max_abs_diff(geometry::multiply(geometry::transpose(R), R), identity()), kPointTol));
  out.push_back(tolerance_check("rotation_determinant", std::abs(geometry::determinant(R) - 1.0), kPointTol));

  // Closed forms at the nominal angle: CC (x, y, 0), MLO (x, (y - z)/sqrt 2, 0).
  const auto pts = random_points(rng);
  double cc_err = 0, mlo_err = 0, mat_err = 0;
  for (const auto& p : pts) {
    const Vec3 cc = geometry::project_point(p, View::kCC, theta);
    const Vec3 mlo = geometry::project_point(p, View::kMLO, theta);
    cc_err = std::max({cc_err, std::abs(cc.x - p.x), std::abs(cc.y - p.y), std::abs(cc.z)});
    mlo_err = std::max({mlo_err, std::abs(mlo.x - p.x), std::abs(mlo.y - (p.y - p.z) * inv_sqrt2), std::abs(mlo.z)});
    const Vec3 pc = geometry::apply(P, p);
    const Vec3 pm = geometry::apply(P, geometry::apply(R, p));
    mat_err = std::max({mat_err, std::abs(cc.x - pc.x), std::abs(cc.y - pc.y), std::abs(cc.z - pc.z),
                        std::abs(mlo.x - pm.x), std::abs(mlo.y - pm.y), std::abs(mlo.z - pm.z)});
  }
  out.push_back(tolerance_check("point_projection_cc", cc_err, kPointTol));
  out.push_back(tolerance_check("point_projection_mlo", mlo_err, kPointTol));
  out.push_back(tolerance_check("point_projection_matrix_form", mat_err, kPointTol));

  const std::int64_t d = 16, h = 16, w = 12;
  for (const View view : {View::kCC, View::kMLO}) {
    double rt_err = 0.0, adj_err = 0.0;
    for (int k = 0; k < 20; ++k) {
      Image img(1, h, w);
      for (auto& x : img.data) x = rng.uniform();
      const Image back = geometry::project_volume(geometry::back_project(img, view, d, theta), view, theta);
      for (std::size_t i = 0; i < img.data.size(); ++i)
        rt_err = std::max(rt_err, static_cast<double>(std::abs(back.data[i] - img.data[i])));

      Volume3D vol(1, d, h, w);
      for (auto& x : vol.data) x = rng.uniform();
      const Image pv = geometry::project_volume(vol, view, theta);
      const Volume3D bi = geometry::back_project(img, view, d, theta);
      double lhs = 0.0, rhs = 0.0;
      for (std::size_t i = 0; i < img.data.size(); ++i) lhs += static_cast<double>(pv.data[i]) * img.data[i];
      for (std::size_t i = 0; i < vol.data.size(); ++i) rhs += static_cast<double>(vol.data[i]) * bi.data[i];
      adj_err = std::max(adj_err, std::abs(lhs - rhs / static_cast<double>(d)) / std::max(1.0, std::abs(lhs)));
    }
    const std::string tag = view == View::kCC ? "cc" : "mlo";
    out.push_back(tolerance_check("round_trip_" + tag, rt_err, kRoundTripTol));
    out.push_back(tolerance_check("adjoint_" + tag, adj_err, kAdjointTol));
  }

  {
    double paired = 0.0, shuffled = 0.0;
    const int phantoms = 50;
    for (int i = 0; i < phantoms; ++i) {
      geometry::PhantomSpec ps;
      ps.seed = options.seed ^ static_cast<std::uint64_t>(i);
      const auto pair = geometry::make_pair(geometry::phantom_generate(ps));
      const auto cc = column_sums(pair.cc);
      const auto mlo = column_sums(pair.mlo);
      auto perm = mlo;
      for (std::size_t j = perm.size() - 1; j > 0; --j) std::swap(perm[j], perm[rng.below(j + 1)]);
      paired += corr(cc, mlo);
      shuffled += corr(cc, perm);
    }
    paired /= phantoms;
    shuffled /= phantoms;
    char buf[96];
    std::snprintf(buf, sizeof buf, "paired %.4f vs shuffled %.4f", paired, shuffled);
    out.push_back({"column_correlation", paired > shuffled, buf});
  }

  {
    const auto bias = attention::column_bias(1, 6, 5.0);
    const double v = bias[0 * 6 + 5];
    out.push_back({"column_bias_delta5_sigma5", std::abs(v + 0.5) <= 1e-7, fmt("bias %.9g", v)});
  }
  return out;
}

bool all_passed(const std::vector<Check>& checks) {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

std::string format_checks(const std::vector<Check>& checks) {
  std::string out;
  for (const auto& c : checks) out += std::string(c.passed ? "PASS " : "FAIL ") + c.name + " (" + c.detail + ")\n";
  return out;
}

}  // namespace ca3d::verify
