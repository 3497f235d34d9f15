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
#include "beamsplat/oracle.hpp"
#include "beamsplat/rangeview.hpp"

#include <map>
#include <optional>
#include <span>
#include <vector>

namespace beamsplat {

class DegenerateConfiguration : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Proper rigid (R, t) minimizing sum |R p_i + t - q_i|^2.
Pose kabsch(std::span<const Vec3d> p, std::span<const Vec3d> q);

/// Yaw-oriented box: canonical frame centered on the box, x along the heading.
Pose box_pose(const TrackRecord& box);
bool box_contains(const TrackRecord& box, const Vec3d& world_point, double margin);

struct Decomposition {
  std::vector<LidarPoint> static_points;
  std::map<int, std::vector<LidarPoint>> instances;  // canonical coordinates, by id
  std::vector<int> assignment;                       // per input point: id, or -1 for static
};

/// Points inside a box (grown by `margin`) go to that instance in its
/// canonical frame; overlaps resolve to the nearest box center, then the
/// lower id.
Decomposition decompose_frame(std::span<const LidarPoint> world_points, std::span<const TrackRecord> boxes,
                              double margin = 0.1);

struct InstanceTrack {
  int id = 0;
  Vec3d extents = Vec3d::Ones();
  std::vector<std::optional<TrackRecord>> boxes;  // per frame
  std::vector<std::optional<Pose>> poses;         // canonical -> world per frame
  std::vector<Vec3d> canonical_points;            // accumulated over frames
};

struct TrackOptions {
  double margin = 0.1;
  int icp_iterations = 0;  // > 0 refines each frame's pose against the accumulation
  double icp_max_distance = 0.5;
  std::vector<int> frames;  // frames contributing canonical points; empty = all
};

/// Per-instance tracks from labeled boxes and the frames they were seen in.
std::vector<InstanceTrack> build_tracks(const Dataset& data, const TrackOptions& opt = {});

/// Rigid correction aligning `source` onto `target` by nearest-neighbor
/// correspondences and repeated Kabsch solves.
Pose icp_align(std::span<const Vec3d> source, std::span<const Vec3d> target, int iterations, double max_distance);

/// Instance primitives moved into the world by their frame pose (means and
/// rotations; scales unchanged) and appended to the static primitives.
template <typename S>
Primitives<S> compose_scene(const Primitives<S>& static_prims, const std::map<int, Primitives<S>>& instances,
                            const std::map<int, Pose>& frame_poses);

extern template Primitives<float> compose_scene<float>(const Primitives<float>&,
                                                      const std::map<int, Primitives<float>>&,
                                                      const std::map<int, Pose>&);
extern template Primitives<double> compose_scene<double>(const Primitives<double>&,
                                                        const std::map<int, Primitives<double>>&,
                                                        const std::map<int, Pose>&);

}  // namespace beamsplat
