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

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace beamsplat {

/// Spinning LiDAR intrinsics. Rows sample elevation uniformly from f_up
/// (row 0) down to -f_down (row H); columns sample azimuth from +pi
/// (column 0) clockwise to -pi.
struct SensorSpec {
  int beams = 32;             // H
  int width = 256;            // W
  double f_up = 0.26;         // rad above the horizon
  double f_down = 0.26;       // rad below the horizon
  double range_min = 1.0;     // m
  double range_max = 60.0;    // m
  double divergence = 4e-5;   // rad, gate on ray-to-center angle

  double fov() const { return f_up + f_down; }
  double elevation_step() const { return fov() / beams; }
  double azimuth_step() const { return 2.0 * kPi / width; }
  int pixels() const { return beams * width; }

  void validate() const;
  bool operator==(const SensorSpec&) const = default;
};

/// Continuous range-view coordinate of a point.
struct RangeCoord {
  double h = 0.0;
  double w = 0.0;
  double d = 0.0;
};

RangeCoord project_point(const Vec3d& p, const SensorSpec& spec);

/// Unit direction for a continuous (h, w); inverse of project_point.
Vec3d pixel_ray(double h, double w, const SensorSpec& spec);

/// Direction through the center of integer pixel (row, col).
inline Vec3d pixel_center_ray(int row, int col, const SensorSpec& spec) {
  return pixel_ray(row + 0.5, col + 0.5, spec);
}

/// All pixel-center rays, 3 x (H*W), row-major pixel order.
Mat3X<double> pixel_center_rays(const SensorSpec& spec);

using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// H x W multi-channel raster. For measured frames `raydrop` is the drop mask
/// (1 = no return); for renders it is the blended drop probability.
struct RangeImage {
  SensorSpec spec;
  Plane depth;
  Plane intensity;
  Plane raydrop;
  Plane accum_alpha;
  Mask valid;

  /// All pixels invalid, drop mask 1.
  static RangeImage empty(const SensorSpec& spec);

  int rows() const { return spec.beams; }
  int cols() const { return spec.width; }
  std::size_t valid_count() const { return static_cast<std::size_t>(valid.count()); }

  /// Clears a pixel to the no-return state.
  void invalidate(int row, int col);
};

struct LidarPoint {
  Vec3d position = Vec3d::Zero();
  double intensity = 0.0;
};

struct BinningStats {
  std::size_t accepted = 0;
  std::size_t out_of_fov = 0;
  std::size_t out_of_range = 0;
};

/// Nearest-return z-buffering into pixels; points are in the sensor frame.
RangeImage points_to_rangeimage(std::span<const LidarPoint> points, const SensorSpec& spec,
                                BinningStats* stats = nullptr);

/// One world point per valid pixel, placed on the pixel-center ray.
std::vector<LidarPoint> rangeimage_to_points(const RangeImage& img, const Pose& sensor_to_world);

// File formats.
//
// Range image (.rv), little endian:
//   char[4]  magic "BSRV"
//   u32      version (1)
//   u32      H, u32 W
//   f64      f_up, f_down, range_min, range_max, divergence
//   u32      channel count C
//   C x char[16] channel names, NUL padded
//   C x H*W  f32 planes, row-major
// Channels written: depth, intensity, raydrop, accum_alpha, valid (0/1).
void save_rangeimage(const RangeImage& img, const std::filesystem::path& path);
RangeImage load_rangeimage(const std::filesystem::path& path);

/// ASCII PLY with float64 x/y/z/intensity, printed with round-trip precision.
void save_ply(std::span<const LidarPoint> points, const std::filesystem::path& path);
std::vector<LidarPoint> load_ply(const std::filesystem::path& path);

}  // namespace beamsplat
