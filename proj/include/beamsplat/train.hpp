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
#include "beamsplat/grad.hpp"
#include "beamsplat/oracle.hpp"
#include "beamsplat/splat.hpp"

#include <cmath>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace beamsplat {

/// Every tunable of a training run. Parsed from `key = value` text; keys
/// match the member names.
struct TrainConfig {
  int iterations = 7000;
  std::uint64_t seed = 1;

  // Initialization.
  int anchors = 10000;
  int neighbor_k = 3;
  double init_scale_min = 0.01;
  double init_scale_max = 2.0;
  double init_width = 1e-2;
  double scale_max = 5.0;
  bool view_inputs = true;
  bool dynamic = true;      // instance groups from labeled boxes
  double box_margin = 0.1;  // m
  int icp_iterations = 0;

  // Loss.
  double lambda_rho = 0.2;  // SSIM share of the intensity term
  double w_intensity = 1.0;
  double w_depth = 1.0;
  double w_raydrop = 1.0;
  double w_alpha = 1.0;
  double w_scale = 1.0;

  // Adam.
  double lr_position = 1.6e-4;
  double lr_position_final = 1.6e-6;
  double lr_feature = 2.5e-3;
  double lr_base_scale = 5e-3;  // in log space
  double lr_mlp = 2e-3;
  double lr_latent = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-15;

  // Densification.
  int densify_from = 500;
  int densify_until = 3000;
  int densify_interval = 100;
  double grad_threshold = 0.006;
  double prune_opacity = 0.005;
  double voxel_size = 0.2;  // m; anchors larger than this split, smaller grow
  int max_anchors = 50000;

  // Rendering.
  std::string projection = "micro";  // micro | pseudo
  bool compact_aabb = true;
  double raydrop_threshold = 0.5;
  double density_threshold = 2.0;
  double density_band = 0.3;
  double density_alpha = 0.01;

  // Loop.
  double guard_factor = 10.0;
  int guard_window = 100;
  int checkpoint_interval = 0;
  bool deterministic = true;
  int threads = 0;

  void validate() const;
  RenderOptions render_options() const;
};

TrainConfig parse_train_config(const std::string& text, TrainConfig base = {});
TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base = {});
std::string format_train_config(const TrainConfig& cfg);

// ---------------------------------------------------------------- losses

/// Weighted loss terms; `total` is their sum. The raw intensity sub-terms
/// are kept for reporting.
struct LossReport {
  double intensity = 0, depth = 0, raydrop = 0, alpha = 0, scale = 0, total = 0;
  double intensity_l1 = 0, intensity_dssim = 0;

  bool all_finite() const;
};

template <typename S>
struct LossResult {
  LossReport report;
  PixelGrads pixel;
  Mat3X<S> scale_grad;  // 3 x gaussians of the pass
};

/// Image terms on the pre-threshold render. Depth and intensity use pixels
/// where gt is valid; ray drop and alpha entropy use all pixels. `include`
/// further restricts every term.
LossReport image_loss(const RangeImage& render, const RangeImage& gt, const TrainConfig& cfg, PixelGrads* grads,
                      const Mask* include = nullptr);

/// Mean product of the three scales over the Gaussians that reached a pixel.
template <typename S>
double scale_regularizer(const ForwardPass<S>& pass, Mat3X<S>* grad);

template <typename S>
LossResult<S> loss_total(const ForwardPass<S>& pass, const RangeImage& gt, const TrainConfig& cfg,
                         const Mask* include = nullptr);

/// -x ln x - (1-x) ln(1-x), zero at 0 and 1.
double binary_entropy(double x);

// ---------------------------------------------------------------- optimizer

struct AdamRule {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-15;

  /// One bias-corrected update of `x` in place; `step` counts from 1.
  template <typename S>
  void update(S* x, const S* g, S* m, S* v, std::size_t n, double lr, std::int64_t step) const {
    const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[i]);
      const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      x[i] = static_cast<S>(static_cast<double>(x[i]) - lr * (mi / c1) / (std::sqrt(vi / c2) + eps));
    }
  }
};

/// Per-anchor densification statistics over the current window.
struct DensifyStats {
  VecX<double> grad_sum;   // sum over views of |screen gradient|
  VecX<double> views;      // views in which the anchor was projected
  VecX<double> opacity_sum;
  Mat3X<double> offset;    // last spawned offset from the anchor, group frame
  Mat3X<double> axis;      // last principal axis times its scale, group frame

  static DensifyStats zeros(Eigen::Index n);
  DensifyStats select(std::span<const Eigen::Index> keep) const;
  void append_zeros(Eigen::Index n);
};

struct TrainState {
  Field<float> field;
  Field<float> moment1, moment2;  // Adam moments, shaped like the field
  std::vector<DensifyStats> stats;  // per group
  std::int64_t step = 0;            // accepted optimizer steps
  std::int64_t rejected = 0;        // steps rejected for non-finite gradients
  int iteration = 0;

  static TrainState create(Field<float> field);
};

/// Adam over every field parameter; base scales are updated in log space so
/// they stay positive. Returns false (state untouched, counter bumped) when
/// any gradient is non-finite.
bool optimizer_step(TrainState& state, const GradientBundle<float>& grads, const TrainConfig& cfg, int iteration);

double position_learning_rate(const TrainConfig& cfg, int iteration);

/// Folds one pass into the window statistics.
void accumulate_stats(TrainState& state, const ForwardPass<float>& pass, const GradientBundle<float>& grads);

struct DensifyReport {
  std::size_t split = 0, grown = 0, pruned = 0, capped = 0;
};

/// Grow, split and prune on the accumulated window, then reset it.
DensifyReport densify(TrainState& state, const TrainConfig& cfg, int iteration);

// ---------------------------------------------------------------- loop

struct CurveRow {
  int iteration = 0;
  int frame = 0;
  LossReport loss;
  std::size_t anchors = 0;
  double wall_seconds = 0;
};

class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(const std::string& what, std::vector<CurveRow> rows)
      : std::runtime_error(what), curves(std::move(rows)) {}
  std::vector<CurveRow> curves;  // rows up to the abort
};

struct TrainHooks {
  std::function<void(const TrainState&, int iteration)> checkpoint;
  std::function<void(const CurveRow&)> progress;
};

/// Initial field from the training frames: background anchors in the world
/// frame and, when enabled, one group per tracked instance in its box frame.
Field<float> initialize_field(const Dataset& data, const TrainConfig& cfg);

/// Runs the loop on a prepared state. Throws DivergenceError when the total
/// loss stays above guard_factor x its first value for guard_window steps.
std::vector<CurveRow> train_loop(TrainState& state, const Dataset& data, const TrainConfig& cfg,
                                 const TrainHooks& hooks = {});

struct TrainResult {
  TrainState state;
  std::vector<CurveRow> curves;
};

TrainResult train_scene(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks = {});

std::string curves_csv(const std::vector<CurveRow>& rows);
void save_curves(const std::vector<CurveRow>& rows, const std::filesystem::path& path);

/// Checkpoint with optimizer moments and counters as extra blocks.
Checkpoint make_checkpoint(const TrainState& state, const SensorSpec& spec);
TrainState restore_state(const Checkpoint& ckpt);

// ---------------------------------------------------------------- gradcheck

/// Pixels whose loss is smooth around the current parameters: no contributor
/// near the kernel cutoff or the divergence gate, no compositing stop near
/// its threshold, no near-tied depth order and no L1 residual near zero.
Mask safe_pixel_mask(const ForwardPass<double>& pass, const RangeImage& gt, double margin);

struct GradcheckOptions {
  int beams = 8;
  int width = 32;
  int anchors = 20;
  std::uint64_t seed = 3;
  double eps = 1e-4;
  double floor_fraction = 1e-3;  // relative-error floor, fraction of the group's max |gradient|
  int max_coords_per_group = 400;
  double margin = 0.1;
  ProjectionMode projection = ProjectionMode::kMicroPlane;
};

struct GradcheckGroup {
  std::string name;
  FdReport report;
  std::size_t skipped = 0;  // coordinates whose probe crossed a kink
};

struct GradcheckResult {
  std::vector<GradcheckGroup> groups;
  std::size_t safe_pixels = 0;
  std::size_t gaussians = 0;
  double max_rel() const;
};

/// Full-pipeline finite-difference check on a small random scene in double
/// precision, every network active.
GradcheckResult pipeline_gradcheck(const GradcheckOptions& opt);

}  // namespace beamsplat
