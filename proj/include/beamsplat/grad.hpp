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

#include "beamsplat/field.hpp"
#include "beamsplat/splat.hpp"

#include <functional>
#include <string>
#include <vector>

namespace beamsplat {

/// Forward state of one anchor group within a frame.
template <typename S>
struct GroupPass {
  std::size_t group = 0;  // index into Field::groups
  int latent_column = 0;
  Vec3<S> viewpoint;                   // sensor origin in the group frame
  Eigen::Transform<S, 3, Eigen::Isometry> to_sensor;  // group frame -> sensor frame
  std::vector<Eigen::Index> candidates;
  Primitives<S> prims;
  SpawnCache<S> cache;
  std::size_t offset = 0;  // first index in the flat Gaussian list
};

/// Everything the backward pass needs from one rendered frame.
template <typename S>
struct ForwardPass {
  int frame = 0;
  Pose pose = Pose::Identity();
  SensorSpec spec;
  RenderOptions options;
  std::vector<GroupPass<S>> groups;
  std::vector<SensorGaussian<S>> gaussians;  // flat, sensor frame
  std::vector<ProjectedGaussian<S>> projected;
  CullStats cull;
  RasterResult<S> raster;
  std::uint64_t version = 0;
};

/// Spawn, project and rasterize a frame seen from `pose` (sensor -> world).
/// Anchors that provably cannot reach any pixel are not spawned.
template <typename S>
ForwardPass<S> forward(const Field<S>& field, int frame, const Pose& pose, const SensorSpec& spec,
                       const RenderOptions& opt);

/// Rendered frame after the ray-drop decision.
RangeImage render(const Field<float>& field, int frame, const Pose& pose, const SensorSpec& spec,
                  const RenderOptions& opt);

template <typename S>
struct GradientBundle {
  std::vector<Anchors<S>> anchors;  // per group: position, feature, base_scale
  std::vector<MatX<S>> latents;     // per group, shaped like the latent table
  FieldWeights<S> nets;
  // Densification statistics, per group and anchor.
  std::vector<Eigen::Matrix<S, 2, Eigen::Dynamic>> screen_abs;  // sum over pixels of |d loss / d center|
  std::vector<VecX<S>> opacity;                                 // spawned opacity (0 when not visible)
  std::vector<std::vector<std::uint8_t>> visible;

  static GradientBundle zeros_like(const Field<S>& field);
  bool all_finite() const;
};

/// Reverse pass from pixel gradients (and optional per-Gaussian scale
/// gradients, 3 x gaussians) to every field parameter.
template <typename S>
GradientBundle<S> backward(const ForwardPass<S>& pass, const PixelGrads& upstream, const Field<S>& field,
                           const Mat3X<S>* scale_grad = nullptr);

// ---------------------------------------------------------------------------
// Flat parameter views, used by the finite-difference oracle.

struct ParameterGroup {
  std::string name;
  std::size_t begin = 0;
  std::size_t end = 0;
};

std::vector<ParameterGroup> parameter_groups(const Field<double>& field);
VecX<double> flatten_parameters(const Field<double>& field);
void unflatten_parameters(const VecX<double>& x, Field<double>& field);
VecX<double> flatten_gradient(const GradientBundle<double>& g);

struct FdReport {
  double max_rel = 0.0;
  double mean_rel = 0.0;
  std::size_t worst = 0;
  std::size_t checked = 0;
};

/// Central differences with step eps * max(1, |x_i|) against `analytic`, over
/// `coords` (all when empty). Relative error is |a - n| / max(|a|, |n|, floor).
FdReport finite_diff_check(const std::function<double(const VecX<double>&)>& loss, const VecX<double>& x,
                           const VecX<double>& analytic, double eps, std::span<const std::size_t> coords = {},
                           double floor = 1e-12);

}  // namespace beamsplat
