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
#include "beamsplat/rangeview.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace beamsplat {

// Analytic ground-truth scenes and an exact ray-casting LiDAR.

struct InfinitePlane {
  Vec3d point = Vec3d::Zero();
  Vec3d normal = Vec3d::UnitZ();
  double reflectance = 0.5;
};

/// Finite plane patch spanned by axis_u and normal x axis_u.
struct Rectangle {
  Vec3d center = Vec3d::Zero();
  Vec3d normal = Vec3d::UnitZ();
  Vec3d axis_u = Vec3d::UnitX();
  double half_u = 1.0;
  double half_v = 1.0;
  double reflectance = 0.5;
};

struct Sphere {
  Vec3d center = Vec3d::Zero();
  double radius = 1.0;
  double reflectance = 0.5;
};

struct AxisBox {
  Vec3d min = Vec3d::Zero();
  Vec3d max = Vec3d::Ones();
  double reflectance = 0.5;
};

/// Rigid box moving at constant velocity and yaw rate per frame.
struct MovingBox {
  int id = 1;
  Vec3d center = Vec3d::Zero();  // at frame 0
  Vec3d extents = Vec3d::Ones();  // full edge lengths
  double yaw = 0.0;
  Vec3d velocity = Vec3d::Zero();  // m / frame
  double yaw_rate = 0.0;           // rad / frame
  double reflectance = 0.5;

  /// Canonical (box) frame -> world at a frame index.
  Pose pose_at(int frame) const;
};

struct AnalyticScene {
  std::vector<InfinitePlane> planes;
  std::vector<Rectangle> rectangles;
  std::vector<Sphere> spheres;
  std::vector<AxisBox> boxes;
  std::vector<MovingBox> movers;
  double d0 = 10.0;          // intensity reference distance
  double near_blind = 0.0;   // returns closer than this are dropped
  double drop_rate = 0.0;    // seeded per-pixel stochastic drop probability
  std::uint64_t seed = 7;

  void validate() const;
};

struct SurfaceHit {
  double distance = 0.0;
  Vec3d normal = Vec3d::UnitZ();
  double reflectance = 0.0;
  int instance = -1;  // mover id, -1 for static geometry
};

/// Nearest intersection along origin + t * dir (dir unit), t > 0.
std::optional<SurfaceHit> intersect(const AnalyticScene& scene, const Vec3d& origin, const Vec3d& dir, int frame);

/// intensity = reflectance * cos(incidence) * (d0 / d)^2, clamped to [0, 1].
double return_intensity(double reflectance, double cos_incidence, double distance, double d0);

/// Exact scan from a sensor pose. Depth is the flight distance; drops are
/// invalid pixels with raydrop = 1.
RangeImage raycast_frame(const AnalyticScene& scene, const Pose& pose, const SensorSpec& spec, int frame = 0);

struct TrackRecord {
  int frame = 0;
  int id = 0;
  Vec3d center = Vec3d::Zero();
  double yaw = 0.0;
  Vec3d extents = Vec3d::Ones();
};

struct Dataset {
  SensorSpec spec;
  std::vector<RangeImage> frames;
  std::vector<Pose> poses;
  std::vector<TrackRecord> tracks;
  std::vector<int> train;
  std::vector<int> val;
};

/// val_count frames are held out, evenly interleaved along the trajectory.
Dataset generate_sequence(const AnalyticScene& scene, const std::vector<Pose>& trajectory, const SensorSpec& spec,
                          int val_count = 4);

std::vector<int> interleaved_validation(int frames, int val_count);

/// Default benchmark: ground, two walls, three spheres, one moving box.
AnalyticScene urban_toy(bool with_mover = true);
SensorSpec urban_toy_spec();
/// Straight drive along +x at `step` m per frame.
std::vector<Pose> straight_trajectory(int frames, double step = 1.0, double height = 1.8, double y = 0.0);

// Scene text format, one primitive per line, '#' comments:
//   d0 <m> | near_blind <m> | drop_rate <p> | seed <n>
//   plane <px py pz> <nx ny nz> <refl>
//   rect <cx cy cz> <nx ny nz> <ux uy uz> <half_u> <half_v> <refl>
//   sphere <cx cy cz> <radius> <refl>
//   box <minx miny minz> <maxx maxy maxz> <refl>
//   mover <id> <cx cy cz> <ex ey ez> <yaw> <vx vy vz> <yaw_rate> <refl>
AnalyticScene parse_scene(const std::string& text);
AnalyticScene load_scene(const std::filesystem::path& path);
std::string format_scene(const AnalyticScene& scene);

/// Sensor spec as `key = value` lines.
SensorSpec parse_sensor_spec(const std::string& text);
std::string format_sensor_spec(const SensorSpec& spec);

// Dataset directory: frames/NNNN.rv, poses.csv, tracks.jsonl, split.json.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

void save_poses(const std::vector<Pose>& poses, const std::filesystem::path& path);
std::vector<Pose> load_poses(const std::filesystem::path& path);
void save_tracks(const std::vector<TrackRecord>& tracks, const std::filesystem::path& path);
std::vector<TrackRecord> load_tracks(const std::filesystem::path& path);

}  // namespace beamsplat
