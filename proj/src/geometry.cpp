// SPDX-License-Identifier: Apache-2.0
#include "ca3d/geometry.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>

#include "ca3d/error.hpp"
#include "ca3d/normalize.hpp"
#include "ca3d/rng.hpp"

namespace ca3d::geometry {

Mat3 projection_matrix() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 0}}}; }

Mat3 rotation_matrix(double theta) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
}

Vec3 apply(const Mat3& m, const Vec3& v) {
  return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z, m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
          m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

Mat3 multiply(const Mat3& a, const Mat3& b) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) r[i][j] += a[i][k] * b[k][j];
  return r;
}

Mat3 transpose(const Mat3& m) {
  Mat3 r{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[i][j] = m[j][i];
  return r;
}

double determinant(const Mat3& m) {
  return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
         m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

Vec3 ProjectionModel::project(const Vec3& p, View view) const { return project_point(p, view, theta); }

Vec3 project_point(const Vec3& p, View view, double theta) {
  if (view == View::kCC) return {p.x, p.y, 0.0};
  return {p.x, std::cos(theta) * p.y - std::sin(theta) * p.z, 0.0};
}

RayOperator::RayOperator(View view, std::int64_t depth, std::int64_t height, double theta)
    : view_(view), depth_(depth), height_(height) {
  if (depth < 1 || height < 1) fail(ErrorCode::kInvalidArgument, "ray operator: empty grid");
  const std::int64_t cols = depth * height;
  raw_.assign(static_cast<std::size_t>(height * cols), 0.0);
  if (view == View::kCC) {
    for (std::int64_t r = 0; r < height; ++r)
      for (std::int64_t z = 0; z < depth; ++z) raw_[r * cols + z * height + r] = 1.0;
    matrix_ = raw_;
    return;
  }

  const double c = std::cos(theta), s = std::sin(theta);
  const double yc = 0.5 * static_cast<double>(height - 1);
  const double zc = 0.5 * static_cast<double>(depth - 1);
  for (std::int64_t r = 0; r < height; ++r) {
    const double u = static_cast<double>(r) - yc;
    for (std::int64_t k = 0; k < depth; ++k) {
      const double t = static_cast<double>(k) - zc;
      // Inverse rotation of the detector-frame point (u, t) into the volume.
      const double y = yc + c * u + s * t;
      const double z = zc - s * u + c * t;
      const double y0 = std::floor(y), z0 = std::floor(z);
      const double fy = y - y0, fz = z - z0;
      const double w[2][2] = {{(1 - fz) * (1 - fy), (1 - fz) * fy}, {fz * (1 - fy), fz * fy}};
      for (int dz = 0; dz < 2; ++dz) {
        for (int dy = 0; dy < 2; ++dy) {
          const auto zi = static_cast<std::int64_t>(z0) + dz;
          const auto yi = static_cast<std::int64_t>(y0) + dy;
          if (zi < 0 || zi >= depth || yi < 0 || yi >= height || w[dz][dy] == 0.0) continue;
          raw_[r * cols + zi * height + yi] += w[dz][dy];
        }
      }
    }
  }

  // Orthonormalise rows: M = sqrt(D) (A A^T)^{-1/2}, matrix = M A.
  using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const MatD> a(raw_.data(), height, cols);
  const MatD gram = a * a.transpose();
  Eigen::SelfAdjointEigenSolver<MatD> eig(gram);
  const auto& ev = eig.eigenvalues();
  if (ev.minCoeff() <= 1e-9 * ev.maxCoeff()) {
    fail(ErrorCode::kNumerical, "ray operator: MLO ray matrix is rank deficient for this grid");
  }
  const MatD inv_sqrt =
      eig.eigenvectors() * ev.cwiseSqrt().cwiseInverse().asDiagonal() * eig.eigenvectors().transpose();
  matrix_.assign(raw_.size(), 0.0);
  Eigen::Map<MatD>(matrix_.data(), height, cols) = std::sqrt(static_cast<double>(depth)) * inv_sqrt * a;
}

std::shared_ptr<const RayOperator> RayOperator::cached(View view, std::int64_t depth, std::int64_t height,
                                                       double theta) {
  static std::mutex mu;
  static std::map<std::tuple<int, std::int64_t, std::int64_t, double>, std::shared_ptr<const RayOperator>> cache;
  const auto key = std::make_tuple(static_cast<int>(view), depth, height, view == View::kCC ? 0.0 : theta);
  std::lock_guard<std::mutex> lock(mu);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto op = std::make_shared<const RayOperator>(view, depth, height, theta);
  cache.emplace(key, op);
  return op;
}

namespace {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void check_finite(const std::vector<float>& data, const char* what) {
  for (float v : data) {
    if (!std::isfinite(v)) fail(ErrorCode::kNumerical, std::string(what) + ": non-finite input");
  }
}

}  // namespace

Image project_volume(const Volume3D& v, View view, double theta) {
  check_finite(v.data, "project_volume");
  const auto op = RayOperator::cached(view, v.depth, v.height, theta);
  Eigen::Map<const MatD> a(op->matrix().data(), v.height, v.depth * v.height);
  Image out(v.channels, v.height, v.width);
  const std::int64_t slab = v.depth * v.height * v.width;
  const double inv_d = 1.0 / static_cast<double>(v.depth);
  for (std::int64_t c = 0; c < v.channels; ++c) {
    const MatD vol = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                         v.data.data() + c * slab, v.depth * v.height, v.width)
                         .cast<double>();
    const MatD img = inv_d * (a * vol);
    for (std::int64_t i = 0; i < v.height * v.width; ++i) {
      out.data[c * v.height * v.width + i] = static_cast<float>(img.data()[i]);
    }
  }
  return out;
}

Volume3D back_project(const Image& img, View view, std::int64_t depth, double theta) {
  check_finite(img.data, "back_project");
  if (depth < 1) fail(ErrorCode::kInvalidArgument, "back_project: depth must be positive");
  const auto op = RayOperator::cached(view, depth, img.height, theta);
  Eigen::Map<const MatD> a(op->matrix().data(), img.height, depth * img.height);
  Volume3D out(img.channels, depth, img.height, img.width);
  const std::int64_t plane = img.height * img.width;
  const std::int64_t slab = depth * plane;
  for (std::int64_t c = 0; c < img.channels; ++c) {
    const MatD im = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                        img.data.data() + c * plane, img.height, img.width)
                        .cast<double>();
    const MatD vol = a.transpose() * im;
    for (std::int64_t i = 0; i < slab; ++i) out.data[c * slab + i] = static_cast<float>(vol.data()[i]);
  }
  return out;
}

Volume3D build_feature_volume(const Image& lat_cc, const Image& lat_mlo, std::int64_t depth) {
  if (lat_cc.channels != lat_mlo.channels || lat_cc.height != lat_mlo.height || lat_cc.width != lat_mlo.width) {
    fail(ErrorCode::kShape, "build_feature_volume: CC map is " + std::to_string(lat_cc.channels) + "x" +
                                std::to_string(lat_cc.height) + "x" + std::to_string(lat_cc.width) + " but MLO map is " +
                                std::to_string(lat_mlo.channels) + "x" + std::to_string(lat_mlo.height) + "x" +
                                std::to_string(lat_mlo.width));
  }
  const Volume3D cc = back_project(lat_cc, View::kCC, depth);
  const Volume3D mlo = back_project(lat_mlo, View::kMLO, depth);
  Volume3D out(2 * lat_cc.channels, depth, lat_cc.height, lat_cc.width);
  std::copy(cc.data.begin(), cc.data.end(), out.data.begin());
  std::copy(mlo.data.begin(), mlo.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(cc.data.size()));
  return out;
}

void PhantomSpec::validate() const {
  if (size < 1) fail(ErrorCode::kInvalidArgument, "phantom: grid size must be positive");
  if (!(radius > 0.0)) fail(ErrorCode::kInvalidArgument, "phantom: radius must be positive");
  if (radius > static_cast<double>(size)) {
    fail(ErrorCode::kInvalidArgument, "phantom: radius " + std::to_string(radius) + " exceeds grid size " +
                                          std::to_string(size));
  }
  if (!std::isfinite(depth_offset)) fail(ErrorCode::kInvalidArgument, "phantom: depth_offset must be finite");
  if (blob_count < 0) fail(ErrorCode::kInvalidArgument, "phantom: negative blob count");
  if (!(base_intensity > 0.0 && blob_intensity_min > 0.0 && blob_intensity_min <= blob_intensity_max &&
        blob_sigma_min > 0.0 && blob_sigma_min <= blob_sigma_max)) {
    fail(ErrorCode::kInvalidArgument, "phantom: intensity and size ranges must be positive and ordered");
  }
}

Volume3D phantom_generate(const PhantomSpec& spec) {
  spec.validate();
  const std::int64_t n = spec.size;
  const double r = spec.radius;
  // Flat face on the chest-wall side of the last voxel column.
  const double cx = static_cast<double>(n) - 0.5;
  const double cy = 0.5 * static_cast<double>(n - 1);
  const double cz = 0.5 * static_cast<double>(n - 1) + spec.depth_offset;

  struct Blob {
    double x, y, z, sigma, amp;
  };
  Rng rng(spec.seed);
  std::vector<Blob> blobs;
  for (std::int64_t i = 0; i < spec.blob_count; ++i) {
    Blob b{};
    // Rejection-sample a centre inside the semi-sphere, kept off its surface.
    const double inner = 0.85 * r;
    do {
      b.x = cx - inner * rng.uniform_double();
      b.y = cy + inner * (2.0 * rng.uniform_double() - 1.0);
      b.z = cz + inner * (2.0 * rng.uniform_double() - 1.0);
    } while ((b.x - cx) * (b.x - cx) + (b.y - cy) * (b.y - cy) + (b.z - cz) * (b.z - cz) > inner * inner);
    b.sigma = spec.blob_sigma_min + (spec.blob_sigma_max - spec.blob_sigma_min) * rng.uniform_double();
    b.amp = spec.blob_intensity_min + (spec.blob_intensity_max - spec.blob_intensity_min) * rng.uniform_double();
    blobs.push_back(b);
  }

  Volume3D v(1, n, n, n);
  for (std::int64_t z = 0; z < n; ++z) {
    for (std::int64_t y = 0; y < n; ++y) {
      for (std::int64_t x = 0; x < n; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy,
                     dz = static_cast<double>(z) - cz;
        if (dx * dx + dy * dy + dz * dz > r * r) continue;
        double val = spec.base_intensity;
        for (const auto& b : blobs) {
          const double ex = static_cast<double>(x) - b.x, ey = static_cast<double>(y) - b.y,
                       ez = static_cast<double>(z) - b.z;
          val += b.amp * std::exp(-(ex * ex + ey * ey + ez * ez) / (2.0 * b.sigma * b.sigma));
        }
        v.at(0, z, y, x) = static_cast<float>(val);
      }
    }
  }
  return v;
}

namespace {

// Pixels whose uncorrected ray meets no nonzero voxel. The orthonormalised
// MLO operator spreads a little signal into them.
void zero_outside_support(const Volume3D& v, View view, Image& img) {
  const auto op = RayOperator::cached(view, v.depth, v.height);
  const auto& raw = op->raw_matrix();
  const std::int64_t n = v.depth * v.height;
  for (std::int64_t c = 0; c < v.channels; ++c) {
    for (std::int64_t x = 0; x < v.width; ++x) {
      for (std::int64_t r = 0; r < v.height; ++r) {
        bool hit = false;
        for (std::int64_t j = 0; j < n && !hit; ++j) {
          if (raw[r * n + j] == 0.0) continue;
          hit = v.at(c, j / v.height, j % v.height, x) != 0.0f;
        }
        if (!hit) img.at(c, r, x) = 0.0f;
      }
    }
  }
}

}  // namespace

ViewPair make_pair(const Volume3D& v, const PairNormalization& norm) {
  ViewPair pair;
  pair.cc = project_volume(v, View::kCC);
  pair.mlo = project_volume(v, View::kMLO);
  zero_outside_support(v, View::kMLO, pair.mlo);
  for (Image* img : {&pair.cc, &pair.mlo}) {
    for (auto& p : img->data) p = std::max(p, 0.0f);
    if (norm.enabled) img->data = data::normalize_truncation(img->data, norm.p_lo, norm.p_hi);
  }
  return pair;
}

}  // namespace ca3d::geometry
