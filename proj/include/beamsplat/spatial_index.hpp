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

#include <cstdint>
#include <limits>
#include <unordered_map>
#include <utility>
#include <vector>

namespace beamsplat {

struct Neighbor {
  std::size_t index = std::numeric_limits<std::size_t>::max();
  double distance = std::numeric_limits<double>::infinity();
};

/// Uniform voxel hash over a fixed point set. Queries search shells of cells
/// outward until no unvisited cell can hold a closer point, so results equal
/// a brute-force scan.
class VoxelGrid {
 public:
  /// cell <= 0 picks a size from the bounding box and point count.
  explicit VoxelGrid(std::vector<Vec3d> points, double cell = 0.0);

  Neighbor nearest(const Vec3d& query) const;

  /// k nearest, ascending by distance; `exclude` is skipped (self-queries).
  std::vector<Neighbor> k_nearest(const Vec3d& query, int k,
                                  std::size_t exclude = std::numeric_limits<std::size_t>::max()) const;

  std::size_t size() const { return points_.size(); }
  double cell() const { return cell_; }

 private:
  using Key = std::int64_t;
  Eigen::Vector3i cell_of(const Vec3d& p) const;
  static Key pack(const Eigen::Vector3i& c);
  template <typename Visit>
  void visit_shell(const Eigen::Vector3i& center, int radius, Visit&& visit) const;

  std::vector<Vec3d> points_;
  double cell_ = 1.0;
  Eigen::Vector3i lo_ = Eigen::Vector3i::Zero();
  Eigen::Vector3i hi_ = Eigen::Vector3i::Zero();
  std::unordered_map<Key, std::vector<std::size_t>> buckets_;
};

}  // namespace beamsplat
