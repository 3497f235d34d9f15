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

#pragma once

#include "beamsplat/common.hpp"
#include "beamsplat/field.hpp"
#include "beamsplat/rangeview.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace beamsplat {

enum class ProjectionMode {
  kMicroPlane,   // exact cross-section on the plane through the mean, normal to the view ray
  kPseudoPlane,  // four 90-degree perspective faces with the affine (EWA) approximation
};

struct RenderOptions {
  ProjectionMode projection = ProjectionMode::kMicroPlane;
  bool compact_aabb = true;          // false: square box from the largest footprint radius
  double cutoff_sigma = 3.0;         // kernel support, in standard deviations
  double min_transmittance = 1e-4;   // early compositing stop
  double raydrop_threshold = 0.5;    // drop when blended drop probability >= this
  double density_threshold = 2.0;    // drop when fewer local contributors than this
  double density_band = 0.3;         // m around the blended depth
  double density_alpha = 0.01;       // minimum contributor weight counted as local
  int tile = 16;
};

/// Primitive attributes in the sensor frame, ready for projection.
template <typename S>
struct SensorGaussian {
  Vec3<S> mean;
  Mat3<S> rotation;
  Vec3<S> scale;
  S intensity = 0;
  S raydrop = 0;
  S opacity = 0;
};

template <typename S>
struct ProjectedGaussian {
  Eigen::Index index = 0;  // into the SensorGaussian list
  S distance = 0;          // flight distance |mean|
  Vec3<S> direction;       // unit view direction to the mean
  Vec3<S> n1, n2;          // micro-plane basis
  Mat2<S> cov2d;           // footprint covariance in (n1, n2), or face-plane units for pseudo-plane
  double h = 0, w = 0;     // continuous image position of the mean
  int row_lo = 0, row_hi = -1;
  int col_center = 0, col_half = 0;  // columns col_center +- col_half, wrapping
  int face = -1;                     // pseudo-plane face, -1 otherwise
  Mat2<S> face_precision;            // pseudo-plane inverse covariance
  Eigen::Matrix<S, 2, 1> face_center;

  bool covers(int row, int col, int width) const;
};

struct CullStats {
  std::size_t out_of_range = 0;
  std::size_t empty_box = 0;
  std::size_t behind_face = 0;
  std::size_t kept = 0;
};

/// Right-handed (n1, n2, d') with n1 = normalize(up x d'), up = z, falling back
/// to up = x near the poles.
template <typename S>
std::pair<Vec3<S>, Vec3<S>> micro_plane_basis(const Vec3<S>& d);

/// Culled (nullopt) when the flight distance leaves the sensor range or the
/// pixel box is empty after clipping.
template <typename S>
std::optional<ProjectedGaussian<S>> project_gaussian(const SensorGaussian<S>& g, Eigen::Index index,
                                                     const SensorSpec& spec, const RenderOptions& opt,
                                                     CullStats* stats = nullptr);

/// Offset from the nearest ray point to the mean, (d.d') d - d' scaled by the
/// flight distance, and its coordinates on the micro plane.
template <typename S>
Vec3<S> ray_offset(const Vec3<S>& ray, const Vec3<S>& direction, S distance);
template <typename S>
Eigen::Matrix<S, 2, 1> back_project_offset(const Vec3<S>& ray, const ProjectedGaussian<S>& g);

/// Squared Mahalanobis radius of a ray against a Gaussian. nullopt when the
/// ray is outside the divergence cone or points away.
template <typename S>
std::optional<S> kernel_radius2(const Vec3<S>& ray, const SensorGaussian<S>& g, const ProjectedGaussian<S>& p,
                                const SensorSpec& spec, ProjectionMode mode);

/// Pseudo-plane face of an azimuth: 0 at +x, 1 at +y, 2 at -x, 3 at -y.
int face_of(double azimuth);

template <typename S>
struct TapeEntry {
  std::int32_t gaussian;  // into the projected list
  S alpha;                // opacity times kernel value
  S transmittance;        // before this entry
  S depth;
};

/// Ordered per-pixel contributor lists (compressed rows).
template <typename S>
struct ContributionTape {
  SensorSpec spec;
  std::vector<std::uint32_t> begin;  // pixels + 1 offsets
  std::vector<TapeEntry<S>> entries;
  std::size_t projected = 0;
  std::uint64_t version = 0;  // parameter version of the forward pass

  std::span<const TapeEntry<S>> pixel(std::size_t p) const {
    return {entries.data() + begin[p], entries.data() + begin[p + 1]};
  }
};

template <typename S>
struct RasterResult {
  RangeImage image;  // pre-threshold channels
  ContributionTape<S> tape;
  std::vector<std::uint8_t> contributed;  // per projected Gaussian
};

/// Front-to-back compositing over depth-sorted tiles. Pixels without
/// contributors are invalid.
template <typename S>
RasterResult<S> rasterize(const std::vector<ProjectedGaussian<S>>& projected,
                          const std::vector<SensorGaussian<S>>& gaussians, const SensorSpec& spec,
                          const RenderOptions& opt);

/// Local density of a pixel: contributors within the band around the blended
/// depth and above the weight floor.
template <typename S>
int local_density(std::span<const TapeEntry<S>> entries, double blended_depth, const RenderOptions& opt);

/// Clears pixels whose drop probability reaches the threshold, whose local
/// density is too low, or whose depth leaves the sensor range. Drop
/// probability and accumulated alpha stay as rendered.
template <typename S>
RangeImage apply_raydrop(const RangeImage& img, const ContributionTape<S>& tape, const RenderOptions& opt);

/// Per-projected-Gaussian gradients from a pixel-gradient image.
template <typename S>
struct SplatGrads {
  Mat3X<S> mean;                           // sensor frame
  std::vector<Mat3<S>> rotation;           // sensor frame rotation matrix
  Mat3X<S> scale;
  VecX<S> intensity, raydrop, opacity;
  Eigen::Matrix<S, 2, Eigen::Dynamic> screen_abs;  // sum of |dL/d center| in normalized image units

  static SplatGrads zeros(std::size_t n);
};

/// Upstream per-pixel gradients of the loss w.r.t. the pre-threshold channels.
struct PixelGrads {
  Plane depth, intensity, raydrop, accum_alpha;
  static PixelGrads zeros(const SensorSpec& spec);
};

/// Reverse pass over the tape. Per-entry contributions are reduced in pixel
/// order so the result does not depend on the thread count.
template <typename S>
SplatGrads<S> rasterize_backward(const ContributionTape<S>& tape, const PixelGrads& upstream,
                                 const std::vector<ProjectedGaussian<S>>& projected,
                                 const std::vector<SensorGaussian<S>>& gaussians, const RenderOptions& opt);

/// Turbo-mapped depth and gray intensity, stacked vertically.
void save_png(const RangeImage& img, const std::filesystem::path& path);

}  // namespace beamsplat
