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

#include "beamsplat/spatial_index.hpp"

#include <algorithm>
#include <cmath>

namespace beamsplat {

VoxelGrid::VoxelGrid(std::vector<Vec3d> points, double cell) : points_(std::move(points)) {
  if (points_.empty()) return;
  Vec3d bmin = points_.front(), bmax = points_.front();
  for (const auto& p : points_) {
    bmin = bmin.cwiseMin(p);
    bmax = bmax.cwiseMax(p);
  }
  if (cell <= 0.0) {
    // Aim for a handful of points per occupied cell on surface-like sets.
    const Vec3d ext = (bmax - bmin).cwiseMax(1e-6);
    const double area = ext.x() * ext.y() + ext.y() * ext.z() + ext.x() * ext.z();
    cell = std::sqrt(area / static_cast<double>(points_.size())) * 2.0;
    // Thin sets would otherwise get cells far below their point spacing.
    cell = std::max({cell, ext.maxCoeff() / static_cast<double>(points_.size()), 1e-6});
  }
  cell_ = cell;
  lo_ = cell_of(bmin);
  hi_ = cell_of(bmax);
  buckets_.reserve(points_.size());
  for (std::size_t i = 0; i < points_.size(); ++i) buckets_[pack(cell_of(points_[i]))].push_back(i);
}

Eigen::Vector3i VoxelGrid::cell_of(const Vec3d& p) const {
  return Eigen::Vector3i(static_cast<int>(std::floor(p.x() / cell_)), static_cast<int>(std::floor(p.y() / cell_)),
                         static_cast<int>(std::floor(p.z() / cell_)));
}

VoxelGrid::Key VoxelGrid::pack(const Eigen::Vector3i& c) {
  constexpr std::int64_t kMask = (1LL << 21) - 1;
  return ((static_cast<std::int64_t>(c.x()) & kMask) << 42) | ((static_cast<std::int64_t>(c.y()) & kMask) << 21) |
         (static_cast<std::int64_t>(c.z()) & kMask);
}

template <typename Visit>
void VoxelGrid::visit_shell(const Eigen::Vector3i& center, int radius, Visit&& visit) const {
  // The six faces of the shell, clipped to the occupied box. Faces along y
  // skip the x rim and faces along z skip both rims so no cell repeats.
  const Eigen::Vector3i from = (lo_ - center).cwiseMax(-radius);
  const Eigen::Vector3i to = (hi_ - center).cwiseMin(radius);
  auto cell = [&](int dx, int dy, int dz) {
    auto it = buckets_.find(pack(center + Eigen::Vector3i(dx, dy, dz)));
    if (it == buckets_.end()) return;
    for (std::size_t idx : it->second) visit(idx);
  };
  const int inner = std::max(radius - 1, 0);
  const int sides = radius == 0 ? 1 : 2;
  for (int side = 0; side < sides; ++side) {
    const int face = side == 0 ? -radius : radius;
    if (face >= from.x() && face <= to.x())
      for (int dy = from.y(); dy <= to.y(); ++dy)
        for (int dz = from.z(); dz <= to.z(); ++dz) cell(face, dy, dz);
    if (radius == 0) return;
    if (face >= from.y() && face <= to.y())
      for (int dx = std::max(from.x(), -inner); dx <= std::min(to.x(), inner); ++dx)
        for (int dz = from.z(); dz <= to.z(); ++dz) cell(dx, face, dz);
    if (face >= from.z() && face <= to.z())
      for (int dx = std::max(from.x(), -inner); dx <= std::min(to.x(), inner); ++dx)
        for (int dy = std::max(from.y(), -inner); dy <= std::min(to.y(), inner); ++dy) cell(dx, dy, face);
  }
}

Neighbor VoxelGrid::nearest(const Vec3d& query) const {
  auto found = k_nearest(query, 1);
  return found.empty() ? Neighbor{} : found.front();
}

std::vector<Neighbor> VoxelGrid::k_nearest(const Vec3d& query, int k, std::size_t exclude) const {
  std::vector<Neighbor> best;
  if (points_.empty() || k <= 0) return best;
  const Eigen::Vector3i center = cell_of(query);
  // Farthest shell that can still intersect the occupied box.
  const int max_radius = std::max({std::abs(center.x() - lo_.x()), std::abs(center.x() - hi_.x()),
                                   std::abs(center.y() - lo_.y()), std::abs(center.y() - hi_.y()),
                                   std::abs(center.z() - lo_.z()), std::abs(center.z() - hi_.z())});
  auto consider = [&](std::size_t idx) {
    if (idx == exclude) return;
    const double dist = (points_[idx] - query).norm();
    if (static_cast<int>(best.size()) == k && !(dist < best.back().distance ||
                                                (dist == best.back().distance && idx < best.back().index))) {
      return;
    }
    Neighbor n{idx, dist};
    auto pos = std::upper_bound(best.begin(), best.end(), n, [](const Neighbor& a, const Neighbor& b) {
      return a.distance < b.distance || (a.distance == b.distance && a.index < b.index);
    });
    best.insert(pos, n);
    if (static_cast<int>(best.size()) > k) best.pop_back();
  };
  // First shell that reaches the occupied box.
  const int min_radius = std::max({0, lo_.x() - center.x(), center.x() - hi_.x(), lo_.y() - center.y(),
                                   center.y() - hi_.y(), lo_.z() - center.z(), center.z() - hi_.z()});
  for (int radius = min_radius; radius <= max_radius; ++radius) {
    visit_shell(center, radius, consider);
    // Anything in shell radius+1 lies at least radius*cell away.
    if (static_cast<int>(best.size()) == k && best.back().distance <= radius * cell_) break;
  }
  return best;
}

}  // namespace beamsplat
