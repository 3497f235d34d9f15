// Copyright 2026 The beamsplat Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "beamsplat/splat.hpp"

#include "beamsplat/parallel.hpp"

#include <unsupported/Eigen/AutoDiff>

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace beamsplat {

namespace {

constexpr double kCovFloor = 1e-7;

/// Covariance of the Gaussian restricted to the plane through its mean with
/// normal `d`, spanned by (n1, n2): the Schur complement of the view axis in
/// the rotated covariance. Evaluated in double without inverting the scales,
/// so needle-thin Gaussians stay finite.
template <typename S>
Mat2d plane_covariance(const Mat3<S>& rotation, const Vec3<S>& scale, const Vec3<S>& n1, const Vec3<S>& n2,
                       const Vec3<S>& d) {
  Mat3d basis;
  basis << n1.template cast<double>(), n2.template cast<double>(), d.template cast<double>();
  const Mat3d a = basis.transpose() * rotation.template cast<double>();
  const Vec3d s2 = scale.template cast<double>().cwiseAbs2();
  const Mat3d cov = a * s2.asDiagonal() * a.transpose();
  Mat2d out = cov.topLeftCorner<2, 2>();
  if (cov(2, 2) > 0.0) out -= cov.topRightCorner<2, 1>() * cov.bottomLeftCorner<1, 2>() / cov(2, 2);
  out(0, 1) = out(1, 0) = 0.5 * (out(0, 1) + out(1, 0));
  out(0, 0) = std::max(out(0, 0), 0.0);
  out(1, 1) = std::max(out(1, 1), 0.0);
  return out;
}

template <typename S>
Mat2<S> inverse2(const Mat2<S>& m) {
  const S det = m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0);
  Mat2<S> inv;
  inv << m(1, 1), -m(0, 1), -m(1, 0), m(0, 0);
  return inv / det;
}

/// Upper bound on the azimuth offset between two directions that are at most
/// `angle` apart, both within the sensor's elevation band.
double azimuth_reach(double angle, const SensorSpec& spec) {
  const double c = std::cos(std::min(std::max(spec.f_up, spec.f_down) + angle, 0.5 * kPi - 1e-6));
  const double s = std::sin(0.5 * angle) / c;
  return s >= 1.0 ? kPi : 2.0 * std::asin(s);
}

// Face frame: forward axis, in-plane horizontal axis (increasing azimuth), up.
struct FaceAxes {
  Vec3d forward, across, up;
};

FaceAxes face_axes(int face) {
  const double a = 0.5 * kPi * face;
  return {Vec3d(std::cos(a), std::sin(a), 0.0), Vec3d(-std::sin(a), std::cos(a), 0.0), Vec3d::UnitZ()};
}

/// Face-plane footprint of a Gaussian under the affine (EWA) approximation.
/// R is the real scalar, T may be an autodiff type over it.
template <typename R, typename T>
void pseudo_footprint(const Vec3<T>& mean, const Mat3<T>& rotation, const Vec3<T>& scale, int face,
                      Eigen::Matrix<T, 2, 1>& center, Mat2<T>& cov) {
  const FaceAxes ax = face_axes(face);
  Mat3<T> w;
  for (int j = 0; j < 3; ++j) {
    w(0, j) = T(static_cast<R>(ax.across(j)));
    w(1, j) = T(static_cast<R>(ax.up(j)));
    w(2, j) = T(static_cast<R>(ax.forward(j)));
  }
  const Vec3<T> p = w * mean;
  const T z = p(2);
  center << p(0) / z, p(1) / z;
  Eigen::Matrix<T, 2, 3> j;
  j << T(R(1)) / z, T(R(0)), -p(0) / (z * z), T(R(0)), T(R(1)) / z, -p(1) / (z * z);
  const Mat3<T> sigma = rotation * scale.cwiseProduct(scale).asDiagonal() * rotation.transpose();
  const Eigen::Matrix<T, 2, 3> jw = j * w;
  cov = jw * sigma * jw.transpose();
  cov(0, 0) += T(static_cast<R>(kCovFloor));
  cov(1, 1) += T(static_cast<R>(kCovFloor));
}

template <typename R, typename T>
T pseudo_radius2(const Vec3<T>& mean, const Mat3<T>& rotation, const Vec3<T>& scale, int face, const Vec3<R>& ray) {
  Eigen::Matrix<T, 2, 1> center;
  Mat2<T> cov;
  pseudo_footprint<R, T>(mean, rotation, scale, face, center, cov);
  const FaceAxes ax = face_axes(face);
  const Vec3d r = ray.template cast<double>();
  const double z = r.dot(ax.forward);
  Eigen::Matrix<T, 2, 1> delta;
  delta(0) = T(static_cast<R>(r.dot(ax.across) / z)) - center(0);
  delta(1) = T(static_cast<R>(r.dot(ax.up) / z)) - center(1);
  const T det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
  return (cov(1, 1) * delta(0) * delta(0) - (cov(0, 1) + cov(1, 0)) * delta(0) * delta(1) +
          cov(0, 0) * delta(1) * delta(1)) /
         det;
}

double azimuth_of(const Vec3d& v) { return std::atan2(v.y(), v.x()); }

}  // namespace

int face_of(double azimuth) {
  const double a = azimuth + 0.25 * kPi;
  int f = static_cast<int>(std::floor(a / (0.5 * kPi)));
  return ((f % 4) + 4) % 4;
}

// --------------------------------------------------------------- projection

template <typename S>
bool ProjectedGaussian<S>::covers(int row, int col, int width) const {
  if (row < row_lo || row > row_hi) return false;
  if (2 * col_half + 1 >= width) return true;
  int d = std::abs(col - col_center) % width;
  d = std::min(d, width - d);
  return d <= col_half;
}

template <typename S>
std::pair<Vec3<S>, Vec3<S>> micro_plane_basis(const Vec3<S>& d) {
  if (std::abs(d.norm() - S(1)) > S(1e-6)) throw DomainError("micro_plane_basis: direction is not unit length");
  Vec3<S> n1 = Vec3<S>::UnitZ().cross(d);
  if (n1.norm() < S(1e-6)) n1 = Vec3<S>::UnitX().cross(d);
  n1.normalize();
  Vec3<S> n2 = d.cross(n1);
  n2.normalize();
  return {n1, n2};
}

template <typename S>
std::optional<ProjectedGaussian<S>> project_gaussian(const SensorGaussian<S>& g, Eigen::Index index,
                                                     const SensorSpec& spec, const RenderOptions& opt,
                                                     CullStats* stats) {
  ProjectedGaussian<S> p;
  p.index = index;
  p.distance = g.mean.norm();
  const double dist = static_cast<double>(p.distance);
  if (!(dist >= spec.range_min && dist <= spec.range_max)) {
    if (stats) ++stats->out_of_range;
    return std::nullopt;
  }
  p.direction = g.mean / p.distance;
  std::tie(p.n1, p.n2) = micro_plane_basis<S>(p.direction);
  const RangeCoord rc = project_point(g.mean.template cast<double>(), spec);
  p.h = rc.h;
  p.w = rc.w;

  const double k = opt.cutoff_sigma;
  const double elev = std::asin(std::clamp(static_cast<double>(p.direction.z()), -1.0, 1.0));
  const double row_pitch = dist * std::tan(spec.elevation_step());
  const double col_pitch = dist * std::cos(elev) * std::tan(spec.azimuth_step());
  double half_h = 0.0, half_w = 0.0;  // footprint half extents in meters (or radians on a face)

  if (opt.projection == ProjectionMode::kMicroPlane) {
    Mat2d c = plane_covariance<S>(g.rotation, g.scale, p.n1, p.n2, p.direction);
    c(0, 0) += kCovFloor;
    c(1, 1) += kCovFloor;
    p.cov2d = c.template cast<S>();
    half_w = k * std::sqrt(static_cast<double>(p.cov2d(0, 0)));
    half_h = k * std::sqrt(static_cast<double>(p.cov2d(1, 1)));
  } else {
    p.face = face_of(azimuth_of(p.direction.template cast<double>()));
    const Vec3d fwd = face_axes(p.face).forward;
    if (g.mean.template cast<double>().dot(fwd) <= 1e-9) {
      if (stats) ++stats->behind_face;
      return std::nullopt;
    }
    pseudo_footprint<S, S>(g.mean, g.rotation, g.scale, p.face, p.face_center, p.cov2d);
    p.face_precision = inverse2<S>(p.cov2d);
    // Face-plane offsets are tangents, never smaller than the angles they
    // subtend, so dividing by angular pitch bounds the pixel reach.
    half_w = k * std::sqrt(static_cast<double>(p.cov2d(0, 0))) * dist * std::cos(elev);
    half_h = k * std::sqrt(static_cast<double>(p.cov2d(1, 1))) * dist;
  }
  if (!opt.compact_aabb) {
    const Mat2d c = p.cov2d.template cast<double>();
    const double half_tr = 0.5 * (c(0, 0) + c(1, 1));
    const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
    const double r = k * std::sqrt(half_tr + std::sqrt(std::max(0.0, half_tr * half_tr - det)));
    const double scale_r = opt.projection == ProjectionMode::kMicroPlane ? 1.0 : dist;
    half_w = half_h = r * scale_r;
    if (opt.projection == ProjectionMode::kPseudoPlane) half_w *= std::cos(elev);
  }
  auto pixels = [](double extent, double pitch) {
    const double v = std::ceil(extent / pitch);
    return v < 1e6 ? static_cast<int>(v) : 1000000;  // NaN takes the full box
  };
  int bh = pixels(half_h, row_pitch);
  int bw = pixels(half_w, col_pitch);

  // Nothing outside the divergence cone can receive weight.
  const int gate_rows = static_cast<int>(std::ceil(spec.divergence / spec.elevation_step())) + 1;
  const int gate_cols = static_cast<int>(std::ceil(azimuth_reach(spec.divergence, spec) / spec.azimuth_step())) + 1;
  bh = std::min(bh, gate_rows);
  bw = std::min(bw, gate_cols);

  const int rc_row = static_cast<int>(std::floor(p.h));
  const int rc_col = static_cast<int>(std::floor(p.w));
  p.row_lo = std::max(0, rc_row - bh);
  p.row_hi = std::min(spec.beams - 1, rc_row + bh);
  p.col_center = ((rc_col % spec.width) + spec.width) % spec.width;
  p.col_half = std::min(bw, spec.width);
  if (p.row_lo > p.row_hi) {
    if (stats) ++stats->empty_box;
    return std::nullopt;
  }
  if (stats) ++stats->kept;
  return p;
}

template <typename S>
Vec3<S> ray_offset(const Vec3<S>& ray, const Vec3<S>& direction, S distance) {
  return distance * (ray.dot(direction) * ray - direction);
}

template <typename S>
Eigen::Matrix<S, 2, 1> back_project_offset(const Vec3<S>& ray, const ProjectedGaussian<S>& g) {
  if (ray.dot(g.direction) <= S(0)) return Eigen::Matrix<S, 2, 1>::Zero();
  const Vec3<S> dx = ray_offset<S>(ray, g.direction, g.distance);
  return {dx.dot(g.n1), dx.dot(g.n2)};
}

namespace {

/// Micro-plane offset: the nearest-point offset projected onto the plane
/// normal to the view direction, c d - (c^2 / D^2) r with c = d.r.
template <typename S>
Vec3<S> plane_offset(const Vec3<S>& ray, const Vec3<S>& r, S dist2) {
  const S c = ray.dot(r);
  return c * ray - (c * c / dist2) * r;
}

template <typename S>
bool in_cone(const Vec3<S>& ray, const ProjectedGaussian<S>& p, const SensorSpec& spec) {
  const S cos_eps = ray.dot(p.direction);
  return cos_eps > S(0) && cos_eps >= static_cast<S>(std::cos(spec.divergence));
}

}  // namespace

template <typename S>
std::optional<S> kernel_radius2(const Vec3<S>& ray, const SensorGaussian<S>& g, const ProjectedGaussian<S>& p,
                                const SensorSpec& spec, ProjectionMode mode) {
  if (!in_cone(ray, p, spec)) return std::nullopt;
  if (mode == ProjectionMode::kMicroPlane) {
    const Vec3<S> u = plane_offset<S>(ray, g.mean, p.distance * p.distance);
    const Vec3<S> v = g.rotation.transpose() * u;
    return v.cwiseQuotient(g.scale).squaredNorm();
  }
  if (face_of(azimuth_of(ray.template cast<double>())) != p.face) return std::nullopt;
  const Eigen::Matrix<S, 2, 1> rc(ray.dot(face_axes(p.face).across.template cast<S>()),
                                  ray.dot(Vec3<S>::UnitZ()));
  const S z = ray.dot(face_axes(p.face).forward.template cast<S>());
  const Eigen::Matrix<S, 2, 1> delta = rc / z - p.face_center;
  return delta.dot(p.face_precision * delta);
}

// -------------------------------------------------------------- rasterizer

template <typename S>
RasterResult<S> rasterize(const std::vector<ProjectedGaussian<S>>& projected,
                          const std::vector<SensorGaussian<S>>& gaussians, const SensorSpec& spec,
                          const RenderOptions& opt) {
  spec.validate();
  if (opt.tile <= 0) throw DomainError("rasterize: tile size must be positive");
  const int H = spec.beams, W = spec.width, T = opt.tile;
  const int tiles_y = (H + T - 1) / T, tiles_x = (W + T - 1) / T;
  const S cutoff2 = static_cast<S>(opt.cutoff_sigma * opt.cutoff_sigma);
  const S min_t = static_cast<S>(opt.min_transmittance);

  std::vector<std::vector<std::int32_t>> lists(static_cast<std::size_t>(tiles_x * tiles_y));
  for (std::size_t j = 0; j < projected.size(); ++j) {
    const auto& p = projected[j];
    if (p.index < 0 || p.index >= static_cast<Eigen::Index>(gaussians.size()))
      throw DomainError("rasterize: projected index out of range");
    if (p.row_lo < 0 || p.row_hi >= H || p.col_half < 0 || p.col_center < 0 || p.col_center >= W)
      throw DomainError("rasterize: pixel box outside the image");
    std::vector<std::pair<int, int>> spans;
    if (2 * p.col_half + 1 >= W) {
      spans.emplace_back(0, W - 1);
    } else {
      const int c0 = p.col_center - p.col_half, c1 = p.col_center + p.col_half;
      if (c0 < 0) {
        spans.emplace_back(c0 + W, W - 1);
        spans.emplace_back(0, c1);
      } else if (c1 >= W) {
        spans.emplace_back(c0, W - 1);
        spans.emplace_back(0, c1 - W);
      } else {
        spans.emplace_back(c0, c1);
      }
    }
    for (int ty = p.row_lo / T; ty <= p.row_hi / T; ++ty) {
      int last_tx = -1;
      for (const auto& [a, b] : spans)
        for (int tx = a / T; tx <= b / T; ++tx) {
          if (tx == last_tx) continue;
          lists[static_cast<std::size_t>(ty * tiles_x + tx)].push_back(static_cast<std::int32_t>(j));
          last_tx = tx;
        }
    }
  }
  for (auto& l : lists) {
    std::sort(l.begin(), l.end(), [&](std::int32_t a, std::int32_t b) {
      const auto& pa = projected[static_cast<std::size_t>(a)];
      const auto& pb = projected[static_cast<std::size_t>(b)];
      if (pa.distance != pb.distance) return pa.distance < pb.distance;
      return a < b;
    });
    l.erase(std::unique(l.begin(), l.end()), l.end());
  }

  RasterResult<S> out;
  out.image = RangeImage::empty(spec);
  out.image.raydrop.setZero();
  const Mat3X<double> rays = pixel_center_rays(spec);

  struct TileOut {
    std::vector<TapeEntry<S>> entries;
    std::vector<std::uint32_t> counts;
  };
  std::vector<TileOut> tiles(lists.size());
  parallel_for(lists.size(), [&](std::size_t t) {
    const int ty = static_cast<int>(t) / tiles_x, tx = static_cast<int>(t) % tiles_x;
    TileOut& to = tiles[t];
    const int r0 = ty * T, r1 = std::min(H, r0 + T);
    const int c0 = tx * T, c1 = std::min(W, c0 + T);
    to.counts.assign(static_cast<std::size_t>((r1 - r0) * (c1 - c0)), 0);
    std::size_t local = 0;
    std::vector<std::int32_t> row_list;
    for (int row = r0; row < r1; ++row) {
      // Depth order is kept; only entries spanning this row remain.
      row_list.clear();
      for (std::int32_t j : lists[t]) {
        const auto& p = projected[static_cast<std::size_t>(j)];
        if (row >= p.row_lo && row <= p.row_hi) row_list.push_back(j);
      }
      for (int col = c0; col < c1; ++col, ++local) {
        const Vec3<S> ray = rays.col(row * W + col).template cast<S>();
        S trans = 1, depth = 0, inten = 0, drop = 0, acc = 0;
        std::uint32_t n = 0;
        for (std::int32_t j : row_list) {
          const auto& p = projected[static_cast<std::size_t>(j)];
          if (!p.covers(row, col, W)) continue;
          const auto& g = gaussians[static_cast<std::size_t>(p.index)];
          const auto q = kernel_radius2<S>(ray, g, p, spec, opt.projection);
          if (!q || *q > cutoff2) continue;
          const S a = g.opacity * std::exp(S(-0.5) * *q);
          const S w = a * trans;
          depth += w * p.distance;
          inten += w * g.intensity;
          drop += w * g.raydrop;
          acc += w;
          to.entries.push_back({j, a, trans, p.distance});
          ++n;
          trans *= S(1) - a;
          if (trans < min_t) break;
        }
        to.counts[local] = n;
        if (n > 0) {
          out.image.depth(row, col) = static_cast<double>(depth);
          out.image.intensity(row, col) = static_cast<double>(inten);
          out.image.raydrop(row, col) = static_cast<double>(drop);
          out.image.accum_alpha(row, col) = static_cast<double>(acc);
          out.image.valid(row, col) = true;
        }
      }
    }
  });

  // Merge tile-local lists into pixel-ordered compressed rows.
  ContributionTape<S>& tape = out.tape;
  tape.spec = spec;
  tape.projected = projected.size();
  tape.begin.assign(static_cast<std::size_t>(H * W) + 1, 0);
  std::vector<std::pair<std::size_t, std::size_t>> where(static_cast<std::size_t>(H * W));  // tile, offset
  for (std::size_t t = 0; t < tiles.size(); ++t) {
    const int ty = static_cast<int>(t) / tiles_x, tx = static_cast<int>(t) % tiles_x;
    const int r0 = ty * T, r1 = std::min(H, r0 + T);
    const int c0 = tx * T, c1 = std::min(W, c0 + T);
    std::size_t local = 0, offset = 0;
    for (int row = r0; row < r1; ++row)
      for (int col = c0; col < c1; ++col, ++local) {
        const std::size_t pix = static_cast<std::size_t>(row * W + col);
        tape.begin[pix + 1] = tiles[t].counts[local];
        where[pix] = {t, offset};
        offset += tiles[t].counts[local];
      }
  }
  for (std::size_t p = 0; p < where.size(); ++p) tape.begin[p + 1] += tape.begin[p];
  tape.entries.resize(tape.begin.back());
  for (std::size_t p = 0; p < where.size(); ++p) {
    const auto [t, offset] = where[p];
    const std::size_t n = tape.begin[p + 1] - tape.begin[p];
    std::copy_n(tiles[t].entries.begin() + static_cast<std::ptrdiff_t>(offset), n,
                tape.entries.begin() + static_cast<std::ptrdiff_t>(tape.begin[p]));
  }
  out.contributed.assign(projected.size(), 0);
  for (const auto& e : tape.entries) out.contributed[static_cast<std::size_t>(e.gaussian)] = 1;
  return out;
}

template <typename S>
int local_density(std::span<const TapeEntry<S>> entries, double blended_depth, const RenderOptions& opt) {
  int n = 0;
  for (const auto& e : entries) {
    if (std::abs(static_cast<double>(e.depth) - blended_depth) <= opt.density_band &&
        static_cast<double>(e.alpha) > opt.density_alpha)
      ++n;
  }
  return n;
}

template <typename S>
RangeImage apply_raydrop(const RangeImage& img, const ContributionTape<S>& tape, const RenderOptions& opt) {
  if (!(img.spec == tape.spec) || tape.begin.size() != static_cast<std::size_t>(img.spec.pixels()) + 1)
    throw DomainError("apply_raydrop: tape does not belong to this image");
  RangeImage out = img;
  const int W = img.cols();
  for (int row = 0; row < img.rows(); ++row)
    for (int col = 0; col < W; ++col) {
      const auto entries = tape.pixel(static_cast<std::size_t>(row * W + col));
      double blended = 0.0;
      for (const auto& e : entries) blended += static_cast<double>(e.alpha * e.transmittance * e.depth);
      if (std::abs(blended - img.depth(row, col)) > 1e-4 * (1.0 + std::abs(blended)))
        throw DomainError("apply_raydrop: tape does not belong to this image");
      const double d = img.depth(row, col);
      const bool dropped = img.raydrop(row, col) >= opt.raydrop_threshold ||
                           local_density<S>(entries, d, opt) < opt.density_threshold ||
                           d < img.spec.range_min || d > img.spec.range_max;
      if (dropped) {
        out.depth(row, col) = 0.0;
        out.intensity(row, col) = 0.0;
        out.valid(row, col) = false;
      }
    }
  return out;
}

// ------------------------------------------------------------------ backward

template <typename S>
SplatGrads<S> SplatGrads<S>::zeros(std::size_t n) {
  const auto m = static_cast<Eigen::Index>(n);
  SplatGrads g;
  g.mean = Mat3X<S>::Zero(3, m);
  g.rotation.assign(n, Mat3<S>::Zero());
  g.scale = Mat3X<S>::Zero(3, m);
  g.intensity = VecX<S>::Zero(m);
  g.raydrop = VecX<S>::Zero(m);
  g.opacity = VecX<S>::Zero(m);
  g.screen_abs = Eigen::Matrix<S, 2, Eigen::Dynamic>::Zero(2, m);
  return g;
}

PixelGrads PixelGrads::zeros(const SensorSpec& spec) {
  PixelGrads g;
  g.depth = Plane::Zero(spec.beams, spec.width);
  g.intensity = g.depth;
  g.raydrop = g.depth;
  g.accum_alpha = g.depth;
  return g;
}

namespace {

template <typename S>
struct EntryGrad {
  Vec3<S> mean = Vec3<S>::Zero();
  Mat3<S> rotation = Mat3<S>::Zero();
  Vec3<S> scale = Vec3<S>::Zero();
  S intensity = 0, raydrop = 0, opacity = 0;
  S screen_x = 0, screen_y = 0;
};

/// d(radius^2)/d(mean, rotation, scale) for the micro-plane kernel.
template <typename S>
void micro_kernel_grad(const Vec3<S>& ray, const SensorGaussian<S>& g, S dist, Vec3<S>& g_mean, Mat3<S>& g_rot,
                       Vec3<S>& g_scale) {
  const Vec3<S>& r = g.mean;
  const S d2 = dist * dist;
  const S c = ray.dot(r);
  const Vec3<S> u = c * ray - (c * c / d2) * r;
  const Vec3<S> v = g.rotation.transpose() * u;
  const Vec3<S> inv2 = g.scale.cwiseProduct(g.scale).cwiseInverse();
  const Vec3<S> gv = S(2) * v.cwiseProduct(inv2);
  for (int k = 0; k < 3; ++k) g_scale(k) = S(-2) * v(k) * v(k) * inv2(k) / g.scale(k);
  const Vec3<S> gu = g.rotation * gv;
  g_rot = u * gv.transpose();
  const S rg = r.dot(gu);
  g_mean = ray * ray.dot(gu) - (c * c / d2) * gu - (S(2) * c / d2 * ray - S(2) * c * c / (d2 * d2) * r) * rg;
}

template <typename S>
void pseudo_kernel_grad(const Vec3<S>& ray, const SensorGaussian<S>& g, int face, Vec3<S>& g_mean, Mat3<S>& g_rot,
                        Vec3<S>& g_scale) {
  using Deriv = Eigen::Matrix<S, 15, 1>;
  using AD = Eigen::AutoDiffScalar<Deriv>;
  Vec3<AD> m;
  Mat3<AD> rot;
  Vec3<AD> s;
  for (int i = 0; i < 3; ++i) m(i) = AD(g.mean(i), 15, i);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) rot(i, j) = AD(g.rotation(i, j), 15, 3 + 3 * i + j);
  for (int i = 0; i < 3; ++i) s(i) = AD(g.scale(i), 15, 12 + i);
  const AD q = pseudo_radius2<S, AD>(m, rot, s, face, ray);
  const Deriv& d = q.derivatives();
  g_mean = d.template head<3>();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) g_rot(i, j) = d(3 + 3 * i + j);
  g_scale = d.template tail<3>();
}

}  // namespace

template <typename S>
SplatGrads<S> rasterize_backward(const ContributionTape<S>& tape, const PixelGrads& up,
                                 const std::vector<ProjectedGaussian<S>>& projected,
                                 const std::vector<SensorGaussian<S>>& gaussians, const RenderOptions& opt) {
  const SensorSpec& spec = tape.spec;
  if (tape.projected != projected.size()) throw DomainError("rasterize_backward: tape does not match projection");
  if (up.depth.rows() != spec.beams || up.depth.cols() != spec.width)
    throw DomainError("rasterize_backward: gradient image shape mismatch");
  const int H = spec.beams, W = spec.width;
  const Mat3X<double> rays = pixel_center_rays(spec);
  std::vector<EntryGrad<S>> eg(tape.entries.size());

  parallel_for(static_cast<std::size_t>(H), [&](std::size_t row_index) {
    const int row = static_cast<int>(row_index);
    std::vector<S> vals;
    for (int col = 0; col < W; ++col) {
      const std::size_t pix = static_cast<std::size_t>(row * W + col);
      const std::size_t b = tape.begin[pix], e = tape.begin[pix + 1];
      if (b == e) continue;
      const S gd = static_cast<S>(up.depth(row, col));
      const S gi = static_cast<S>(up.intensity(row, col));
      const S gr = static_cast<S>(up.raydrop(row, col));
      const S ga = static_cast<S>(up.accum_alpha(row, col));
      if (gd == S(0) && gi == S(0) && gr == S(0) && ga == S(0)) continue;
      const Vec3<S> ray = rays.col(static_cast<Eigen::Index>(pix)).template cast<S>();
      const std::size_t n = e - b;
      vals.resize(n);
      for (std::size_t k = 0; k < n; ++k) {
        const auto& te = tape.entries[b + k];
        const auto& g = gaussians[static_cast<std::size_t>(projected[static_cast<std::size_t>(te.gaussian)].index)];
        vals[k] = gd * te.depth + gi * g.intensity + gr * g.raydrop + ga;
      }
      S suffix = 0;  // what lies behind entry k, per unit transmittance after it
      for (std::size_t k = n; k-- > 0;) {
        const auto& te = tape.entries[b + k];
        const auto& p = projected[static_cast<std::size_t>(te.gaussian)];
        const auto& g = gaussians[static_cast<std::size_t>(p.index)];
        EntryGrad<S>& out = eg[b + k];
        const S w = te.alpha * te.transmittance;
        const S g_alpha = te.transmittance * (vals[k] - suffix);
        suffix = te.alpha * vals[k] + (S(1) - te.alpha) * suffix;

        out.intensity = w * gi;
        out.raydrop = w * gr;
        const S kernel = g.opacity > S(0) ? te.alpha / g.opacity : S(0);
        out.opacity = g_alpha * kernel;
        // alpha = opacity * exp(-q / 2)
        const S g_q = g_alpha * te.alpha * S(-0.5);
        Vec3<S> dq_mean, dq_scale;
        Mat3<S> dq_rot;
        if (opt.projection == ProjectionMode::kMicroPlane) {
          micro_kernel_grad<S>(ray, g, p.distance, dq_mean, dq_rot, dq_scale);
        } else {
          pseudo_kernel_grad<S>(ray, g, p.face, dq_mean, dq_rot, dq_scale);
        }
        const Vec3<S> g_center = g_q * dq_mean;
        out.mean = g_center + (w * gd) * p.direction;
        out.rotation = g_q * dq_rot;
        out.scale = g_q * dq_scale;

        // Screen-space gradient of the mean, in normalized image units.
        const Vec3<S>& dir = p.direction;
        const S cphi = std::sqrt(dir.x() * dir.x() + dir.y() * dir.y());
        if (cphi > S(1e-9)) {
          const Vec3<S> d_phi(-dir.x() * dir.z() / cphi, -dir.y() * dir.z() / cphi, cphi);
          const Vec3<S> d_theta(-dir.y(), dir.x(), S(0));
          out.screen_y = std::abs(p.distance * d_phi.dot(g_center) * static_cast<S>(-0.5 * spec.fov()));
          out.screen_x = std::abs(p.distance * d_theta.dot(g_center) * static_cast<S>(-kPi));
        }
      }
    }
  });

  SplatGrads<S> g = SplatGrads<S>::zeros(projected.size());
  for (std::size_t i = 0; i < tape.entries.size(); ++i) {
    const auto j = static_cast<Eigen::Index>(tape.entries[i].gaussian);
    const EntryGrad<S>& e = eg[i];
    g.mean.col(j) += e.mean;
    g.rotation[static_cast<std::size_t>(j)] += e.rotation;
    g.scale.col(j) += e.scale;
    g.intensity(j) += e.intensity;
    g.raydrop(j) += e.raydrop;
    g.opacity(j) += e.opacity;
    g.screen_abs(0, j) += e.screen_x;
    g.screen_abs(1, j) += e.screen_y;
  }
  return g;
}

// ----------------------------------------------------------------------- PNG

namespace {

std::array<std::uint8_t, 3> turbo(double t) {
  t = std::clamp(t, 0.0, 1.0);
  const double r = 0.13572138 + t * (4.61539260 + t * (-42.66032258 + t * (132.13108234 + t * (-152.94239396 + t * 59.28637943))));
  const double g = 0.09140261 + t * (2.19418839 + t * (4.84296658 + t * (-14.18503333 + t * (4.27729857 + t * 2.82956604))));
  const double b = 0.10667330 + t * (12.64194608 + t * (-60.58204836 + t * (110.36276771 + t * (-89.90310912 + t * 27.34824973))));
  auto u8 = [](double v) { return static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(v, 0.0, 1.0))); };
  return {u8(r), u8(g), u8(b)};
}

}  // namespace

void save_png(const RangeImage& img, const std::filesystem::path& path) {
  const int H = img.rows(), W = img.cols();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(2 * H * W * 3), 0);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (!img.valid(r, c)) continue;
      const auto col = turbo(img.depth(r, c) / img.spec.range_max);
      std::copy(col.begin(), col.end(), rgb.begin() + static_cast<std::ptrdiff_t>(3 * (r * W + c)));
      const auto v = static_cast<std::uint8_t>(std::lround(255.0 * std::clamp(img.intensity(r, c), 0.0, 1.0)));
      const std::size_t o = static_cast<std::size_t>(3 * ((H + r) * W + c));
      rgb[o] = rgb[o + 1] = rgb[o + 2] = v;
    }

  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(2 * H), 8, PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < 2 * H; ++r) png_write_row(png, rgb.data() + static_cast<std::ptrdiff_t>(3 * r * W));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// ------------------------------------------------------------ instantiation

#define BEAMSPLAT_SPLAT_INSTANTIATE(S)                                                                           \
  template struct ProjectedGaussian<S>;                                                                          \
  template struct SplatGrads<S>;                                                                                 \
  template std::pair<Vec3<S>, Vec3<S>> micro_plane_basis<S>(const Vec3<S>&);                                     \
  template std::optional<ProjectedGaussian<S>> project_gaussian<S>(const SensorGaussian<S>&, Eigen::Index,       \
                                                                   const SensorSpec&, const RenderOptions&,      \
                                                                   CullStats*);                                  \
  template Vec3<S> ray_offset<S>(const Vec3<S>&, const Vec3<S>&, S);                                             \
  template Eigen::Matrix<S, 2, 1> back_project_offset<S>(const Vec3<S>&, const ProjectedGaussian<S>&);           \
  template std::optional<S> kernel_radius2<S>(const Vec3<S>&, const SensorGaussian<S>&,                          \
                                              const ProjectedGaussian<S>&, const SensorSpec&, ProjectionMode);   \
  template RasterResult<S> rasterize<S>(const std::vector<ProjectedGaussian<S>>&,                                \
                                        const std::vector<SensorGaussian<S>>&, const SensorSpec&,                \
                                        const RenderOptions&);                                                   \
  template int local_density<S>(std::span<const TapeEntry<S>>, double, const RenderOptions&);                   \
  template RangeImage apply_raydrop<S>(const RangeImage&, const ContributionTape<S>&, const RenderOptions&);     \
  template SplatGrads<S> rasterize_backward<S>(const ContributionTape<S>&, const PixelGrads&,                    \
                                               const std::vector<ProjectedGaussian<S>>&,                         \
                                               const std::vector<SensorGaussian<S>>&, const RenderOptions&);

BEAMSPLAT_SPLAT_INSTANTIATE(float)
BEAMSPLAT_SPLAT_INSTANTIATE(double)

}  // namespace beamsplat
