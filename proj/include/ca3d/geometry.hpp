// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <numbers>
#include <vector>

namespace ca3d::geometry {

enum class View : int { kCC = 0, kMLO = 1 };

inline constexpr double kMloAngle = std::numbers::pi / 4.0;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

using Mat3 = std::array<std::array<double, 3>, 3>;

Mat3 projection_matrix();
/// Rotation about the x-axis.
Mat3 rotation_matrix(double theta);
Vec3 apply(const Mat3& m, const Vec3& v);
Mat3 multiply(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& m);
double determinant(const Mat3& m);

/// Orthographic view model: CC drops z; MLO rotates by theta about x first.
struct ProjectionModel {
  double theta = kMloAngle;

  Mat3 P() const { return projection_matrix(); }
  Mat3 R() const { return rotation_matrix(theta); }
  Vec3 project(const Vec3& p, View view) const;
};

/// CC: (x, y, z) -> (x, y, 0). MLO: (x, y, z) -> (x, y cos t - z sin t, 0),
/// which is (x, (y - z)/sqrt(2), 0) at the default 45 degrees.
Vec3 project_point(const Vec3& p, View view, double theta = kMloAngle);

/// c x H x W grid; x is the column (chest wall at x = W-1), y the row.
struct Image {
  std::int64_t channels = 1, height = 0, width = 0;
  std::vector<float> data;

  Image() = default;
  Image(std::int64_t c, std::int64_t h, std::int64_t w) : channels(c), height(h), width(w), data(c * h * w, 0.0f) {}
  float& at(std::int64_t c, std::int64_t y, std::int64_t x) { return data[(c * height + y) * width + x]; }
  float at(std::int64_t c, std::int64_t y, std::int64_t x) const { return data[(c * height + y) * width + x]; }
};

/// c x D x H x W grid with unit voxel spacing, origin at the corner voxel.
struct Volume3D {
  std::int64_t channels = 1, depth = 0, height = 0, width = 0;
  std::vector<float> data;

  Volume3D() = default;
  Volume3D(std::int64_t c, std::int64_t d, std::int64_t h, std::int64_t w)
      : channels(c), depth(d), height(h), width(w), data(c * d * h * w, 0.0f) {}
  float& at(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data[((c * depth + z) * height + y) * width + x];
  }
  float at(std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data[((c * depth + z) * height + y) * width + x];
  }
};

/// Discretised ray operator for one view: an H x (D*H) matrix mapping a
/// (z, y) slice of the volume to one image column. Shared by every x.
///
/// CC rays are the z-columns (weight 1 each). MLO rays sample D points along
/// the theta-rotated depth axis through the volume centre with bilinear
/// weights; the resulting rows are then orthonormalised (scaled to squared
/// norm D) so that projection and back-projection are exact adjoints and
/// project(back_project(img)) == img.
class RayOperator {
 public:
  RayOperator(View view, std::int64_t depth, std::int64_t height, double theta = kMloAngle);

  View view() const { return view_; }
  std::int64_t depth() const { return depth_; }
  std::int64_t height() const { return height_; }
  /// Row-major H x (D*H), column index z*H + y.
  const std::vector<double>& matrix() const { return matrix_; }
  /// Uncorrected bilinear ray sums, same layout (identical to matrix() for CC).
  const std::vector<double>& raw_matrix() const { return raw_; }

  static std::shared_ptr<const RayOperator> cached(View view, std::int64_t depth, std::int64_t height,
                                                   double theta = kMloAngle);

 private:
  View view_;
  std::int64_t depth_, height_;
  std::vector<double> raw_;
  std::vector<double> matrix_;
};

/// Mean-aggregates along the view's depth rays: H x W image per channel.
Image project_volume(const Volume3D& v, View view, double theta = kMloAngle);

/// Replicates each pixel along its ray (no 1/D scaling). Adjoint constant:
/// <project(v), img> == (1/D) <v, back_project(img)>.
Volume3D back_project(const Image& img, View view, std::int64_t depth, double theta = kMloAngle);

/// Back-projects both views and concatenates along channels: the first c
/// channels come from CC, the next c from MLO.
Volume3D build_feature_volume(const Image& lat_cc, const Image& lat_mlo, std::int64_t depth);

struct PhantomSpec {
  std::int64_t size = 32;
  double radius = 12.0;
  /// Shift of the semi-sphere centre along z (the CC ray axis), in voxels.
  /// Off-axis support moves rows between the two views.
  double depth_offset = 4.0;
  std::int64_t blob_count = 6;
  double base_intensity = 1.0;
  double blob_intensity_min = 0.4;
  double blob_intensity_max = 1.2;
  double blob_sigma_min = 1.2;
  double blob_sigma_max = 2.8;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Semi-sphere of base intensity attached to the chest-wall face x = W, plus
/// Gaussian bumps whose centres lie inside the support. Background is 0.
Volume3D phantom_generate(const PhantomSpec& spec);

struct ViewPair {
  Image cc;
  Image mlo;
  std::uint64_t sample_id = 0;
  std::uint64_t phantom_seed = 0;
};

/// Percentile bounds for the truncation normalisation applied to each view.
struct PairNormalization {
  double p_lo = 1.0;
  double p_hi = 99.0;
  bool enabled = true;
};

/// Projects both views. MLO pixels whose ray misses the support are zeroed,
/// negatives are clamped, then each view is normalised.
ViewPair make_pair(const Volume3D& v, const PairNormalization& norm = {});

}  // namespace ca3d::geometry
