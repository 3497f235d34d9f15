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

#include "beamsplat/dynamics.hpp"

#include "beamsplat/spatial_index.hpp"

#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <limits>

namespace beamsplat {

Pose kabsch(std::span<const Vec3d> p, std::span<const Vec3d> q) {
  if (p.size() != q.size()) throw DomainError("kabsch: point sets differ in size");
  if (p.size() < 3) throw DegenerateConfiguration("kabsch: need at least three correspondences");
  const double n = static_cast<double>(p.size());
  Vec3d cp = Vec3d::Zero(), cq = Vec3d::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) {
    cp += p[i];
    cq += q[i];
  }
  cp /= n;
  cq /= n;
  Mat3d h = Mat3d::Zero();
  for (std::size_t i = 0; i < p.size(); ++i) h += (p[i] - cp) * (q[i] - cq).transpose();

  const Eigen::JacobiSVD<Mat3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Vec3d sv = svd.singularValues();
  if (!(sv(0) > 0.0) || sv(1) <= 1e-12 * sv(0)) throw DegenerateConfiguration("kabsch: collinear configuration");
  Mat3d fix = Mat3d::Identity();
  fix(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;
  const Mat3d r = svd.matrixV() * fix * svd.matrixU().transpose();
  Pose out = Pose::Identity();
  out.linear() = r;
  out.translation() = cq - r * cp;
  return out;
}

Pose box_pose(const TrackRecord& box) { return make_pose(box.center, box.yaw); }

bool box_contains(const TrackRecord& box, const Vec3d& world_point, double margin) {
  const Vec3d local = box_pose(box).inverse() * world_point;
  const Vec3d half = 0.5 * box.extents + Vec3d::Constant(margin);
  return (local.array().abs() <= half.array()).all();
}

Decomposition decompose_frame(std::span<const LidarPoint> world_points, std::span<const TrackRecord> boxes,
                              double margin) {
  Decomposition d;
  d.assignment.assign(world_points.size(), -1);
  std::vector<Pose> inv;
  inv.reserve(boxes.size());
  for (const auto& b : boxes) inv.push_back(box_pose(b).inverse());
  for (std::size_t i = 0; i < world_points.size(); ++i) {
    const Vec3d& p = world_points[i].position;
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      if (!box_contains(boxes[b], p, margin)) continue;
      const double dist = (p - boxes[b].center).norm();
      if (dist < best_d || (dist == best_d && boxes[b].id < boxes[static_cast<std::size_t>(best)].id)) {
        best_d = dist;
        best = static_cast<int>(b);
      }
    }
    if (best < 0) {
      d.static_points.push_back(world_points[i]);
      continue;
    }
    const auto& box = boxes[static_cast<std::size_t>(best)];
    d.assignment[i] = box.id;
    d.instances[box.id].push_back({inv[static_cast<std::size_t>(best)] * p, world_points[i].intensity});
  }
  return d;
}

Pose icp_align(std::span<const Vec3d> source, std::span<const Vec3d> target, int iterations, double max_distance) {
  Pose total = Pose::Identity();
  if (source.size() < 3 || target.size() < 3) return total;
  const VoxelGrid grid(std::vector<Vec3d>(target.begin(), target.end()));
  std::vector<Vec3d> moved(source.begin(), source.end());
  for (int it = 0; it < iterations; ++it) {
    std::vector<Vec3d> p, q;
    for (const auto& s : moved) {
      const Neighbor nn = grid.nearest(s);
      if (nn.distance > max_distance) continue;
      p.push_back(s);
      q.push_back(target[nn.index]);
    }
    Pose step;
    try {
      step = kabsch(p, q);
    } catch (const DegenerateConfiguration&) {
      break;
    }
    for (auto& s : moved) s = step * s;
    total = step * total;
    if ((step.linear() - Mat3d::Identity()).norm() < 1e-12 && step.translation().norm() < 1e-12) break;
  }
  return total;
}

std::vector<InstanceTrack> build_tracks(const Dataset& data, const TrackOptions& opt) {
  std::map<int, InstanceTrack> tracks;
  const std::size_t frames = data.frames.size();
  for (const auto& rec : data.tracks) {
    if (rec.frame < 0 || static_cast<std::size_t>(rec.frame) >= frames)
      throw DomainError("build_tracks: track references a missing frame");
    auto& t = tracks[rec.id];
    t.id = rec.id;
    t.extents = rec.extents;
    t.boxes.resize(frames);
    t.poses.resize(frames);
    t.boxes[static_cast<std::size_t>(rec.frame)] = rec;
    t.poses[static_cast<std::size_t>(rec.frame)] = box_pose(rec);
  }
  for (std::size_t f = 0; f < frames; ++f) {
    std::vector<TrackRecord> boxes;
    for (const auto& [id, t] : tracks)
      if (t.boxes[f]) boxes.push_back(*t.boxes[f]);
    if (boxes.empty()) continue;
    if (!opt.frames.empty() && std::find(opt.frames.begin(), opt.frames.end(), static_cast<int>(f)) == opt.frames.end())
      continue;
    const auto pts = rangeimage_to_points(data.frames[f], data.poses[f]);
    const Decomposition dec = decompose_frame(pts, boxes, opt.margin);
    for (const auto& [id, local] : dec.instances) {
      InstanceTrack& t = tracks[id];
      std::vector<Vec3d> canon;
      canon.reserve(local.size());
      for (const auto& lp : local) canon.push_back(lp.position);
      if (opt.icp_iterations > 0 && t.canonical_points.size() >= 3 && canon.size() >= 3) {
        // Refine the box pose so this frame's points agree with the accumulation.
        const Pose corr = icp_align(canon, t.canonical_points, opt.icp_iterations, opt.icp_max_distance);
        for (auto& c : canon) c = corr * c;
        t.poses[f] = *t.poses[f] * corr.inverse();
      }
      t.canonical_points.insert(t.canonical_points.end(), canon.begin(), canon.end());
    }
  }
  std::vector<InstanceTrack> out;
  for (auto& [id, t] : tracks) out.push_back(std::move(t));
  return out;
}

template <typename S>
Primitives<S> compose_scene(const Primitives<S>& static_prims, const std::map<int, Primitives<S>>& instances,
                            const std::map<int, Pose>& frame_poses) {
  Eigen::Index total = static_prims.size();
  for (const auto& [id, p] : instances) {
    if (!frame_poses.count(id)) throw DomainError("compose_scene: no pose for instance " + std::to_string(id));
    require_rigid(frame_poses.at(id));
    total += p.size();
  }
  Primitives<S> out;
  out.resize(total);
  Eigen::Index at = 0;
  auto copy = [&](const Primitives<S>& p, const Pose* pose) {
    const Eigen::Quaternion<S> qp = pose ? Eigen::Quaternion<S>(pose->linear().template cast<S>())
                                         : Eigen::Quaternion<S>::Identity();
    for (Eigen::Index k = 0; k < p.size(); ++k, ++at) {
      out.mean.col(at) = pose ? Vec3<S>((pose->template cast<S>()) * Vec3<S>(p.mean.col(k))) : Vec3<S>(p.mean.col(k));
      if (pose) {
        const Eigen::Quaternion<S> ql(p.rotation(0, k), p.rotation(1, k), p.rotation(2, k), p.rotation(3, k));
        const Eigen::Quaternion<S> qw = (qp * ql).normalized();
        out.rotation.col(at) << qw.w(), qw.x(), qw.y(), qw.z();
      } else {
        out.rotation.col(at) = p.rotation.col(k);  // static primitives pass through untouched
      }
      out.scale.col(at) = p.scale.col(k);
      out.intensity(at) = p.intensity(k);
      out.raydrop(at) = p.raydrop(k);
      out.opacity(at) = p.opacity(k);
      out.source[static_cast<std::size_t>(at)] = p.source[static_cast<std::size_t>(k)];
    }
  };
  copy(static_prims, nullptr);
  for (const auto& [id, p] : instances) copy(p, &frame_poses.at(id));
  return out;
}

template Primitives<float> compose_scene<float>(const Primitives<float>&, const std::map<int, Primitives<float>>&,
                                                const std::map<int, Pose>&);
template Primitives<double> compose_scene<double>(const Primitives<double>&,
                                                  const std::map<int, Primitives<double>>&,
                                                  const std::map<int, Pose>&);

}  // namespace beamsplat
