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
#include "beamsplat/mlp.hpp"
#include "beamsplat/rangeview.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace beamsplat {

constexpr int kFeatureDim = 32;
constexpr int kLatentDim = 16;
constexpr int kHiddenWidth = 64;
constexpr int kDirectionFreqs = 4;
// direction (3) + sin/cos encoding (2 * 3 * freqs) + normalized distance (1)
constexpr int kViewInputDim = 3 + 6 * kDirectionFreqs + 1;
constexpr int kBaseInputDim = kFeatureDim + kViewInputDim;
constexpr int kLatentInputDim = kBaseInputDim + kLatentDim;
// offset (3) + raw quaternion (4) + raw scale (3)
constexpr int kCovarianceOutputs = 10;

/// Learnable carriers. Columns index anchors.
template <typename S>
struct Anchors {
  Mat3X<S> position;
  MatX<S> feature;  // kFeatureDim x N
  Mat3X<S> base_scale;

  static Anchors zeros(Eigen::Index n);
  Eigen::Index size() const { return position.cols(); }

  Anchors select(std::span<const Eigen::Index> keep) const;
  void append(const Anchors& other);
  bool all_finite() const;

  template <typename T>
  Anchors<T> cast() const {
    return {position.template cast<T>(), feature.template cast<T>(), base_scale.template cast<T>()};
  }
};

/// The four attribute networks.
template <typename S>
struct FieldWeights {
  Mlp<S> covariance;  // base input -> offset, rotation, scale
  Mlp<S> intensity;   // base input + latent -> 1
  Mlp<S> raydrop;     // base input + latent -> 1
  Mlp<S> opacity;     // base input -> 1

  static FieldWeights create();
  static FieldWeights zeros_like(const FieldWeights& other);
  void init_uniform(std::mt19937_64& rng);
  void set_zero();
  bool all_finite() const;

  std::array<Mlp<S>*, 4> nets() { return {&covariance, &intensity, &raydrop, &opacity}; }
  std::array<const Mlp<S>*, 4> nets() const { return {&covariance, &intensity, &raydrop, &opacity}; }

  template <typename T>
  FieldWeights<T> cast() const {
    return {covariance.template cast<T>(), intensity.template cast<T>(), raydrop.template cast<T>(),
            opacity.template cast<T>()};
  }
};

struct FieldOptions {
  double scale_max = 5.0;     // m, upper clamp on spawned scales
  double range_max = 60.0;    // m, distance input normalization
  bool view_inputs = true;    // false zeroes direction/distance inputs
};

/// Anchors plus per-frame latent codes for one rigid body. Group 0 is the
/// static background in world coordinates; instance groups live in their own
/// canonical frame and carry a canonical->world pose per frame.
template <typename S>
struct AnchorGroup {
  int id = 0;
  Anchors<S> anchors;
  MatX<S> latents;                        // kLatentDim x frame_count
  std::vector<std::optional<Pose>> poses;  // per frame; empty for the static group

  bool present(int frame) const {
    return id == 0 || (frame >= 0 && frame < static_cast<int>(poses.size()) && poses[frame].has_value());
  }
  Pose pose(int frame) const { return id == 0 ? Pose::Identity() : *poses.at(frame); }

  template <typename T>
  AnchorGroup<T> cast() const {
    return {id, anchors.template cast<T>(), latents.template cast<T>(), poses};
  }
};

template <typename S>
struct Field {
  std::vector<AnchorGroup<S>> groups;
  FieldWeights<S> nets;
  FieldOptions options;
  std::vector<int> train_frames;   // frames whose latent codes are trained
  std::vector<Pose> frame_poses;   // sensor pose per frame, for latent lookup
  std::uint64_t version = 0;       // bumped on every parameter change

  Eigen::Index anchor_count() const;
  /// Latent column for a frame: itself when trained, otherwise the trained
  /// frame whose sensor position is nearest to `viewpoint`.
  int latent_column(int frame, const Vec3d& viewpoint) const;

  template <typename T>
  Field<T> cast() const {
    Field<T> f;
    for (const auto& g : groups) f.groups.push_back(g.template cast<T>());
    f.nets = nets.template cast<T>();
    f.options = options;
    f.train_frames = train_frames;
    f.frame_poses = frame_poses;
    f.version = version;
    return f;
  }
};

/// Spawned primitives (structure of arrays), expressed in the frame of the
/// anchors they came from.
template <typename S>
struct Primitives {
  Mat3X<S> mean;
  Eigen::Matrix<S, 4, Eigen::Dynamic> rotation;  // unit quaternion (w, x, y, z)
  Mat3X<S> scale;
  VecX<S> intensity;
  VecX<S> raydrop;
  VecX<S> opacity;
  std::vector<Eigen::Index> source;  // anchor index per primitive

  Eigen::Index size() const { return mean.cols(); }
  void resize(Eigen::Index n);
};

template <typename S>
struct SpawnCache {
  std::vector<Eigen::Index> source;
  Mat3X<S> direction;
  VecX<S> distance;
  MatX<S> cov_raw;
  typename Mlp<S>::Cache cov, intensity, raydrop, opacity;
  Eigen::Index skipped = 0;
};

/// Per-primitive upstream gradients for the spawn backward pass.
template <typename S>
struct PrimitiveGrads {
  Mat3X<S> mean;
  Eigen::Matrix<S, 4, Eigen::Dynamic> rotation;  // w.r.t. the unit quaternion
  Mat3X<S> scale;
  VecX<S> intensity;
  VecX<S> raydrop;
  VecX<S> opacity;

  static PrimitiveGrads zeros(Eigen::Index n);
};

/// Gradients for one anchor group.
template <typename S>
struct AnchorGrads {
  Anchors<S> anchors;
  VecX<S> latent;  // for the latent column used
};

/// One primitive per anchor in `candidates` (all anchors when empty).
/// Anchors coincident with the viewpoint are skipped and counted in the cache.
template <typename S>
Primitives<S> spawn(const Anchors<S>& anchors, const Vec3<S>& viewpoint, const VecX<S>& latent,
                    const FieldWeights<S>& nets, const FieldOptions& options,
                    std::span<const Eigen::Index> candidates = {}, SpawnCache<S>* cache = nullptr);

/// Accumulates into `grads` (sized like the anchors) and `net_grads`.
template <typename S>
void spawn_backward(const Anchors<S>& anchors, const FieldWeights<S>& nets, const FieldOptions& options,
                    const SpawnCache<S>& cache, const Primitives<S>& prims, const PrimitiveGrads<S>& upstream,
                    AnchorGrads<S>& grads, FieldWeights<S>& net_grads);

/// View inputs of one anchor: direction, its sinusoidal encoding, distance.
template <typename S>
Eigen::Matrix<S, kViewInputDim, 1> view_encoding(const Vec3<S>& direction, S distance, double range_max);

/// Unit quaternion (w, x, y, z) to rotation matrix, and the backward of that map.
template <typename S>
Mat3<S> quat_to_rotation(const Eigen::Matrix<S, 4, 1>& q);
template <typename S>
Eigen::Matrix<S, 4, 1> quat_to_rotation_backward(const Eigen::Matrix<S, 4, 1>& q, const Mat3<S>& grad_r);

struct InitOptions {
  int count = 10000;
  int frames = 1;
  std::uint64_t seed = 1;
  int neighbor_k = 3;
  double scale_min = 0.01;
  double scale_max = 2.0;
  double init_width = 1e-2;  // features and latents ~ U(-w/2, w/2)
};

/// Anchors sampled from the cloud (without replacement when possible, kept in
/// input order), isotropic base scale from the k-th nearest sampled neighbor.
Anchors<float> init_anchors(std::span<const Vec3d> points, const InitOptions& opt, std::mt19937_64& rng);

/// A static-only field with freshly initialized networks and latents.
Field<float> init_from_points(std::span<const Vec3d> points, const InitOptions& opt);

// ----------------------------------------------------------------------------
// Checkpoint: little-endian binary.
//   magic "BSCK", u32 version (1)
//   sensor spec: f64 x5 (f_up, f_down, range_min, range_max, divergence), u32 beams, u32 width
//   options: f64 scale_max, f64 range_max, u32 view_inputs
//   u64 field version
//   u32 frame count, then per frame f64 x7 (tx ty tz qw qx qy qz)
//   u32 trained frame count, then u32 frame ids
//   4 networks (covariance, intensity, raydrop, opacity):
//     u32 layer count; per layer u32 rows, u32 cols, f32 weights (column-major), f32 bias
//   u32 group count; per group:
//     i32 id, u64 anchor count N
//     f32 position (3N), f32 feature (F*N), f32 base_scale (3N), column-major
//     u32 latent columns C, f32 latents (L*C)
//     u32 pose count P, then per pose u8 present + f64 x7
//   u32 extra block count; per block: char[32] name, u32 rows, u32 cols, f32 data
// ----------------------------------------------------------------------------

struct NamedBlock {
  std::string name;
  MatX<float> data;
};

struct Checkpoint {
  SensorSpec spec;
  Field<float> field;
  std::vector<NamedBlock> extra;  // optimizer moments and other training state
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace beamsplat
