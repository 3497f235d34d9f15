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

#include "beamsplat/common.hpp"
#include "beamsplat/parallel.hpp"

#include <atomic>
#include <cmath>

namespace beamsplat {

namespace {
std::atomic<int> g_threads{1};
}

void set_thread_count(int n) { g_threads.store(n < 1 ? 1 : n); }
int thread_count() { return g_threads.load(); }

void require_rigid(const Pose& pose, double tol) {
  const Mat3d r = pose.linear();
  if (!r.allFinite() || !pose.translation().allFinite()) throw DomainError("pose has non-finite entries");
  if ((r.transpose() * r - Mat3d::Identity()).cwiseAbs().maxCoeff() > tol) {
    throw DomainError("pose rotation is not orthonormal");
  }
  if (std::abs(r.determinant() - 1.0) > tol) throw DomainError("pose rotation has det != +1");
}

Pose make_pose(const Vec3d& translation, double yaw) {
  Pose pose = Pose::Identity();
  pose.linear() = Eigen::AngleAxisd(yaw, Vec3d::UnitZ()).toRotationMatrix();
  pose.translation() = translation;
  return pose;
}

}  // namespace beamsplat
