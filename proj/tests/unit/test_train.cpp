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

#include "beamsplat/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

namespace beamsplat {
namespace {

// ------------------------------------------------------------- fixtures

/// Windowed SSIM written out directly: 11x11 Gaussian window, sigma 1.5,
/// zero padding, mean over pixels.
double reference_ssim(const Plane& x, const Plane& y) {
  const int half = 5;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double w[11][11], wsum = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) {
      w[i][j] = std::exp(-((i - half) * (i - half) + (j - half) * (j - half)) / (2 * sigma * sigma));
      wsum += w[i][j];
    }
  double total = 0;
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const Eigen::Index rr = r + i - half, cc = c + j - half;
          if (rr < 0 || cc < 0 || rr >= x.rows() || cc >= x.cols()) continue;
          const double k = w[i][j] / wsum, a = x(rr, cc), b = y(rr, cc);
          mx += k * a;
          my += k * b;
          xx += k * a * a;
          yy += k * b * b;
          xy += k * a * b;
        }
      const double vx = xx - mx * mx, vy = yy - my * my, cv = xy - mx * my;
      total += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / static_cast<double>(x.size());
}

SensorSpec plane_spec() {
  SensorSpec s;
  s.beams = 16;
  s.width = 128;
  s.f_up = 0.02;
  s.f_down = 0.4;
  s.divergence = 0.05;
  return s;
}

AnalyticScene single_plane() {
  AnalyticScene s;
  s.planes.push_back({Vec3d::Zero(), Vec3d::UnitZ(), 0.6});
  return s;
}

Dataset plane_dataset(int frames) { return generate_sequence(single_plane(), straight_trajectory(frames), plane_spec(), 0); }

TrainConfig small_config(int iterations) {
  TrainConfig c;
  c.iterations = iterations;
  c.anchors = 1500;
  c.densify_from = iterations + 1;  // off unless a test turns it on
  c.densify_until = iterations;
  c.dynamic = false;
  return c;
}

RangeImage random_render(std::mt19937_64& rng, const SensorSpec& spec) {
  std::uniform_real_distribution<double> u(0.05, 0.95), d(2, 30);
  RangeImage img = RangeImage::empty(spec);
  for (int i = 0; i < spec.beams; ++i)
    for (int j = 0; j < spec.width; ++j) {
      img.depth(i, j) = d(rng);
      img.intensity(i, j) = u(rng);
      img.raydrop(i, j) = u(rng);
      img.accum_alpha(i, j) = u(rng);
      img.valid(i, j) = true;
    }
  return img;
}

RangeImage random_gt(std::mt19937_64& rng, const SensorSpec& spec) {
  RangeImage gt = random_render(rng, spec);
  std::bernoulli_distribution drop(0.25);
  for (int i = 0; i < spec.beams; ++i)
    for (int j = 0; j < spec.width; ++j)
      if (drop(rng)) {
        gt.valid(i, j) = false;
        gt.depth(i, j) = gt.intensity(i, j) = 0;
        gt.raydrop(i, j) = 1;
      } else {
        gt.raydrop(i, j) = 0;
      }
  return gt;
}

// ---------------------------------------------------------------- losses

TEST(ImageLoss, PerfectFitIsZero) {
  const SensorSpec spec = urban_toy_spec();
  const RangeImage gt = raycast_frame(urban_toy(false), make_pose(Vec3d(0, 0, 1.8), 0.0), spec);
  RangeImage render = gt;
  render.accum_alpha = gt.valid.cast<double>();
  const LossReport r = image_loss(render, gt, TrainConfig{}, nullptr);
  EXPECT_EQ(r.intensity_l1, 0.0);
  EXPECT_NEAR(r.intensity_dssim, 0.0, 1e-12);
  EXPECT_EQ(r.depth, 0.0);
  EXPECT_EQ(r.raydrop, 0.0);
  EXPECT_EQ(r.alpha, 0.0);
  EXPECT_NEAR(r.total, 0.0, 1e-12);
}

TEST(ImageLoss, UniformIntensityOffset) {
  SensorSpec spec = plane_spec();
  RangeImage gt = RangeImage::empty(spec);
  gt.valid.setConstant(true);
  gt.depth.setConstant(10);
  gt.intensity.setConstant(0.5);
  gt.raydrop.setZero();
  RangeImage render = gt;
  render.intensity.setConstant(0.6);
  render.accum_alpha.setOnes();
  const TrainConfig cfg;
  const LossReport r = image_loss(render, gt, cfg, nullptr);
  EXPECT_NEAR(r.intensity_l1, 0.1, 1e-12);
  const double dssim = 1.0 - reference_ssim(render.intensity, gt.intensity);
  EXPECT_NEAR(r.intensity_dssim, dssim, 1e-12);
  EXPECT_NEAR(r.intensity, 0.8 * 0.1 + 0.2 * dssim, 1e-12);
  EXPECT_EQ(r.depth, 0.0);
}

TEST(ImageLoss, SpecMismatchThrows) {
  SensorSpec other = plane_spec();
  other.width = 64;
  EXPECT_THROW(image_loss(RangeImage::empty(plane_spec()), RangeImage::empty(other), TrainConfig{}, nullptr),
               DomainError);
}

TEST(ImageLoss, ComponentsNonnegativeAndSum) {
  std::mt19937_64 rng(1);
  const SensorSpec spec = plane_spec();
  for (int k = 0; k < 5; ++k) {
    const LossReport r = image_loss(random_render(rng, spec), random_gt(rng, spec), TrainConfig{}, nullptr);
    EXPECT_TRUE(r.all_finite());
    for (double v : {r.intensity, r.depth, r.raydrop, r.alpha}) EXPECT_GE(v, 0.0);
    EXPECT_NEAR(r.total, r.intensity + r.depth + r.raydrop + r.alpha, 1e-12);
  }
}

TEST(ImageLoss, PixelGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(2);
  SensorSpec spec = plane_spec();
  spec.beams = 8;
  spec.width = 24;
  const RangeImage gt = random_gt(rng, spec);
  RangeImage render = random_render(rng, spec);
  const TrainConfig cfg;
  PixelGrads g;
  image_loss(render, gt, cfg, &g);
  const double h = 1e-6;
  double worst = 0;
  for (Plane RangeImage::*channel : {&RangeImage::depth, &RangeImage::intensity, &RangeImage::raydrop,
                                     &RangeImage::accum_alpha}) {
    const Plane& an = channel == &RangeImage::depth       ? g.depth
                      : channel == &RangeImage::intensity ? g.intensity
                      : channel == &RangeImage::raydrop   ? g.raydrop
                                                          : g.accum_alpha;
    for (int i = 0; i < spec.beams; ++i)
      for (int j = 0; j < spec.width; ++j) {
        const double x0 = (render.*channel)(i, j);
        (render.*channel)(i, j) = x0 + h;
        const double fp = image_loss(render, gt, cfg, nullptr).total;
        (render.*channel)(i, j) = x0 - h;
        const double fm = image_loss(render, gt, cfg, nullptr).total;
        (render.*channel)(i, j) = x0;
        worst = std::max(worst, std::abs((fp - fm) / (2 * h) - an(i, j)));
      }
  }
  EXPECT_LT(worst, 1e-7);
}

TEST(BinaryEntropy, ShapeAndMinimum) {
  EXPECT_EQ(binary_entropy(0.0), 0.0);
  EXPECT_EQ(binary_entropy(1.0), 0.0);
  EXPECT_NEAR(binary_entropy(0.5), std::log(2.0), 1e-15);
  EXPECT_NEAR(binary_entropy(0.2), binary_entropy(0.8), 1e-15);
  for (double x = 0.01; x < 1.0; x += 0.01) EXPECT_GT(binary_entropy(x), 0.0);
}

TEST(ScaleRegularizer, SingleGaussianProduct) {
  ForwardPass<double> pass;
  pass.spec = plane_spec();
  SensorGaussian<double> g;
  g.mean = 8.0 * pixel_center_ray(10, 3, pass.spec);
  g.rotation = Mat3d::Identity();
  g.scale = Vec3d(0.1, 0.2, 0.3);
  g.opacity = 0.9;
  pass.gaussians = {g};
  pass.projected = {*project_gaussian<double>(g, 0, pass.spec, pass.options)};
  pass.raster = rasterize<double>(pass.projected, pass.gaussians, pass.spec, pass.options);
  Mat3X<double> grad;
  EXPECT_NEAR(scale_regularizer<double>(pass, &grad), 0.006, 1e-15);
  EXPECT_NEAR(grad(0, 0), 0.06, 1e-15);
  EXPECT_NEAR(grad(1, 0), 0.03, 1e-15);
  EXPECT_NEAR(grad(2, 0), 0.02, 1e-15);
  // A Gaussian that reaches no pixel does not count.
  pass.raster.contributed[0] = 0;
  EXPECT_EQ(scale_regularizer<double>(pass, nullptr), 0.0);
}

// -------------------------------------------------------------- optimizer

TEST(Adam, QuadraticConverges) {
  const AdamRule adam;
  double x = 1, m = 0, v = 0;
  std::vector<double> xs;
  for (int t = 1; t <= 200; ++t) {
    const double g = 2 * x;
    adam.update(&x, &g, &m, &v, 1, 0.1, t);
    xs.push_back(x);
  }
  // The bias-corrected first step has length exactly lr.
  EXPECT_NEAR(xs[0], 0.9, 1e-12);
  // Strictly decreasing until the first overshoot, then a shrinking envelope.
  for (int t = 1; t < 10; ++t) EXPECT_LT(xs[static_cast<std::size_t>(t)], xs[static_cast<std::size_t>(t - 1)]);
  double prev = 1e9;
  for (int w = 0; w < 10; ++w) {
    double env = 0;
    for (int t = 20 * w; t < 20 * w + 20; ++t) env = std::max(env, std::abs(xs[static_cast<std::size_t>(t)]));
    EXPECT_LT(env, prev) << "window " << w;
    prev = env;
  }
  EXPECT_LT(std::abs(xs.back()), 1e-3);
}

Field<float> tiny_field() {
  std::vector<Vec3d> pts;
  for (int i = 0; i < 40; ++i) pts.emplace_back(5 + 0.3 * i, 0.2 * (i % 5), -1.5);
  InitOptions opt;
  opt.count = 20;
  opt.frames = 2;
  return init_from_points(pts, opt);
}

bool same_parameters(const Field<float>& a, const Field<float>& b) {
  if (a.groups.size() != b.groups.size()) return false;
  for (std::size_t k = 0; k < a.groups.size(); ++k) {
    const auto &x = a.groups[k], &y = b.groups[k];
    if (x.anchors.size() != y.anchors.size()) return false;
    if (x.anchors.position != y.anchors.position || x.anchors.feature != y.anchors.feature ||
        x.anchors.base_scale != y.anchors.base_scale || x.latents != y.latents)
      return false;
  }
  const auto na = a.nets.nets(), nb = b.nets.nets();
  for (std::size_t k = 0; k < na.size(); ++k)
    for (std::size_t l = 0; l < na[k]->weight.size(); ++l)
      if (na[k]->weight[l] != nb[k]->weight[l] || na[k]->bias[l] != nb[k]->bias[l]) return false;
  return true;
}

TEST(OptimizerStep, ZeroGradientsLeaveParameters) {
  TrainState s = TrainState::create(tiny_field());
  const Field<float> before = s.field;
  const auto g = GradientBundle<float>::zeros_like(s.field);
  EXPECT_TRUE(optimizer_step(s, g, TrainConfig{}, 0));
  EXPECT_TRUE(same_parameters(s.field, before));
  EXPECT_EQ(s.step, 1);
}

TEST(OptimizerStep, NonFiniteGradientRejected) {
  TrainState s = TrainState::create(tiny_field());
  auto g = GradientBundle<float>::zeros_like(s.field);
  g.anchors[0].position.setConstant(1.0f);
  g.anchors[0].feature(3, 7) = std::numeric_limits<float>::quiet_NaN();
  const TrainState before = s;
  EXPECT_FALSE(optimizer_step(s, g, TrainConfig{}, 0));
  EXPECT_EQ(s.rejected, 1);
  EXPECT_EQ(s.step, 0);
  EXPECT_TRUE(same_parameters(s.field, before.field));
  EXPECT_TRUE(same_parameters(s.moment1, before.moment1));
}

TEST(OptimizerStep, BaseScaleStaysPositive) {
  TrainState s = TrainState::create(tiny_field());
  auto g = GradientBundle<float>::zeros_like(s.field);
  g.anchors[0].base_scale.setConstant(1e6f);  // pushes every scale down hard
  TrainConfig cfg;
  cfg.lr_base_scale = 5.0;
  for (int k = 0; k < 50; ++k) optimizer_step(s, g, cfg, k);
  EXPECT_GT(s.field.groups[0].anchors.base_scale.minCoeff(), 0.0f);
}

TEST(PositionRate, ExponentialDecay) {
  TrainConfig cfg;
  cfg.iterations = 1000;
  EXPECT_NEAR(position_learning_rate(cfg, 0), cfg.lr_position, 1e-18);
  EXPECT_NEAR(position_learning_rate(cfg, 1000), cfg.lr_position_final, 1e-18);
  EXPECT_NEAR(position_learning_rate(cfg, 500), std::sqrt(cfg.lr_position * cfg.lr_position_final), 1e-15);
}

// ---------------------------------------------------------- densification

/// State with hand-set window statistics: every anchor seen once, opacity
/// 0.5, gradient `grad`.
TrainState stats_state(double grad) {
  TrainState s = TrainState::create(tiny_field());
  auto& st = s.stats[0];
  st.views.setOnes();
  st.opacity_sum.setConstant(0.5);
  st.grad_sum.setConstant(grad);
  return s;
}

TEST(Densify, BelowThresholdOnlyPrunes) {
  TrainState s = stats_state(0.001);
  s.stats[0].opacity_sum(4) = 0.001;
  const Anchors<float> before = s.field.groups[0].anchors;
  const DensifyReport r = densify(s, TrainConfig{}, 600);
  EXPECT_EQ(r.pruned, 1u);
  EXPECT_EQ(r.split + r.grown, 0u);
  const auto& a = s.field.groups[0].anchors;
  ASSERT_EQ(a.size(), before.size() - 1);
  for (Eigen::Index i = 0, j = 0; i < before.size(); ++i) {
    if (i == 4) continue;
    EXPECT_EQ(a.position.col(j), before.position.col(i));
    ++j;
  }
  EXPECT_EQ(s.stats[0].grad_sum.size(), a.size());
  EXPECT_EQ(s.stats[0].views.sum(), 0.0);  // window reset
}

TEST(Densify, LargeAnchorSplits) {
  TrainState s = stats_state(0.0);
  s.field.groups[0].anchors.base_scale.col(2) = Eigen::Vector3f(1.0f, 0.5f, 0.5f);
  s.stats[0].grad_sum(2) = 0.01;
  s.stats[0].axis.col(2) = Vec3d(0.8, 0, 0);
  const Anchors<float> before = s.field.groups[0].anchors;
  const DensifyReport r = densify(s, TrainConfig{}, 600);
  EXPECT_EQ(r.split, 1u);
  const auto& a = s.field.groups[0].anchors;
  ASSERT_EQ(a.size(), before.size() + 1);
  const Vec3d p = before.position.col(2).cast<double>();
  const Eigen::Index n = a.size();
  EXPECT_NEAR((a.position.col(n - 2).cast<double>() - (p + Vec3d(0.4, 0, 0))).norm(), 0.0, 1e-5);
  EXPECT_NEAR((a.position.col(n - 1).cast<double>() - (p - Vec3d(0.4, 0, 0))).norm(), 0.0, 1e-5);
  EXPECT_NEAR((a.base_scale.col(n - 1) - 0.6f * before.base_scale.col(2)).norm(), 0.0, 1e-6);
  EXPECT_EQ(a.feature.col(n - 1), before.feature.col(2));
  // Survivors keep their positions and order.
  EXPECT_EQ(a.position.col(2), before.position.col(3));
  EXPECT_EQ(s.moment1.groups[0].anchors.size(), a.size());
}

TEST(Densify, SmallAnchorGrows) {
  TrainState s = stats_state(0.0);
  s.field.groups[0].anchors.base_scale.col(5).setConstant(0.05f);
  s.stats[0].grad_sum(5) = 0.01;
  s.stats[0].offset.col(5) = Vec3d(0.03, 0.01, 0);
  const Anchors<float> before = s.field.groups[0].anchors;
  const DensifyReport r = densify(s, TrainConfig{}, 600);
  EXPECT_EQ(r.grown, 1u);
  const auto& a = s.field.groups[0].anchors;
  ASSERT_EQ(a.size(), before.size() + 1);
  EXPECT_NEAR((a.position.col(a.size() - 1).cast<double>() -
               (before.position.col(5).cast<double>() + Vec3d(0.03, 0.01, 0)))
                  .norm(),
              0.0, 1e-6);
  EXPECT_EQ(a.position.leftCols(before.size()), before.position);
}

TEST(Densify, CapKeepsHighestStatThenLowestIndex) {
  TrainState s = stats_state(0.0);
  s.field.groups[0].anchors.base_scale.setConstant(0.05f);
  for (Eigen::Index i : {3, 8, 11, 15}) s.stats[0].grad_sum(i) = 0.02;
  s.stats[0].grad_sum(17) = 0.05;
  TrainConfig cfg;
  cfg.max_anchors = static_cast<int>(s.field.anchor_count()) + 3;
  const Anchors<float> before = s.field.groups[0].anchors;
  const DensifyReport r = densify(s, cfg, 600);
  EXPECT_EQ(r.grown, 3u);
  EXPECT_EQ(r.capped, 2u);
  const auto& a = s.field.groups[0].anchors;
  ASSERT_EQ(a.size(), before.size() + 3);
  // Children keep their parent's feature, so the parents can be read back.
  const Eigen::Index n0 = before.size();
  EXPECT_EQ(a.feature.col(n0), before.feature.col(17));
  EXPECT_EQ(a.feature.col(n0 + 1), before.feature.col(3));
  EXPECT_EQ(a.feature.col(n0 + 2), before.feature.col(8));
}

// ------------------------------------------------------------------ loop

TEST(TrainScene, ZeroIterationsReturnsInitialField) {
  const Dataset d = plane_dataset(2);
  const TrainConfig cfg = small_config(0);
  const TrainResult r = train_scene(d, cfg);
  EXPECT_TRUE(r.curves.empty());
  EXPECT_TRUE(same_parameters(r.state.field, initialize_field(d, cfg)));
  EXPECT_EQ(r.state.step, 0);
}

TEST(TrainScene, DeterministicCurves) {
  const Dataset d = plane_dataset(3);
  TrainConfig cfg = small_config(40);
  cfg.densify_from = 20;
  cfg.densify_interval = 10;
  const TrainResult a = train_scene(d, cfg);
  const TrainResult b = train_scene(d, cfg);
  ASSERT_EQ(a.curves.size(), 40u);
  for (std::size_t i = 0; i < a.curves.size(); ++i) {
    EXPECT_EQ(a.curves[i].loss.total, b.curves[i].loss.total) << "iteration " << i + 1;
    EXPECT_EQ(a.curves[i].frame, b.curves[i].frame);
    EXPECT_EQ(a.curves[i].anchors, b.curves[i].anchors);
  }
  EXPECT_TRUE(same_parameters(a.state.field, b.state.field));
}

TEST(TrainScene, ZeroLossWeightsFreezeParameters) {
  const Dataset d = plane_dataset(2);
  TrainConfig cfg = small_config(15);
  cfg.w_intensity = cfg.w_depth = cfg.w_raydrop = cfg.w_alpha = cfg.w_scale = 0;
  const TrainResult r = train_scene(d, cfg);
  EXPECT_TRUE(same_parameters(r.state.field, initialize_field(d, cfg)));
  for (const auto& row : r.curves) EXPECT_EQ(row.loss.total, 0.0);
}

TEST(TrainScene, SinglePlaneDepthTrend) {
  const Dataset d = plane_dataset(1);
  ASSERT_EQ(d.train.size(), 1u);
  const TrainResult r = train_scene(d, small_config(200));
  ASSERT_EQ(r.curves.size(), 200u);
  double prev = std::numeric_limits<double>::infinity();
  for (int w = 0; w < 4; ++w) {
    double mean = 0;
    for (int i = 50 * w; i < 50 * w + 50; ++i) mean += r.curves[static_cast<std::size_t>(i)].loss.depth / 50;
    EXPECT_LT(mean, prev) << "window " << w;
    prev = mean;
  }
  EXPECT_LT(r.curves.back().loss.depth, 0.5 * r.curves.front().loss.depth);
}

TEST(TrainScene, DivergenceGuardAborts) {
  const Dataset d = plane_dataset(2);
  TrainConfig cfg = small_config(60);
  cfg.guard_factor = 1.0000001;
  cfg.guard_window = 3;
  cfg.lr_mlp = cfg.lr_feature = 50.0;  // wild steps push the loss up
  try {
    train_scene(d, cfg);
    ADD_FAILURE() << "expected the guard to fire";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.curves.size(), 3u);
    EXPECT_LT(e.curves.size(), 60u);
  }
}

TEST(TrainScene, RejectsBadInputs) {
  Dataset d = plane_dataset(2);
  TrainConfig cfg = small_config(10);
  cfg.densify_until = 11;
  EXPECT_THROW(train_scene(d, cfg), DomainError);
  d.train.clear();
  EXPECT_THROW(train_scene(d, small_config(10)), DomainError);
}

TEST(TrainScene, CheckpointRestoresState) {
  const Dataset d = plane_dataset(2);
  const TrainResult r = train_scene(d, small_config(5));
  const TrainState back = restore_state(make_checkpoint(r.state, d.spec));
  EXPECT_TRUE(same_parameters(back.field, r.state.field));
  EXPECT_TRUE(same_parameters(back.moment1, r.state.moment1));
  EXPECT_TRUE(same_parameters(back.moment2, r.state.moment2));
  EXPECT_EQ(back.step, r.state.step);
  EXPECT_EQ(back.iteration, 5);
}

// ---------------------------------------------------------------- config

TEST(TrainConfig, ParseFormatRoundTrip) {
  TrainConfig c;
  c.iterations = 123;
  c.lambda_rho = 0.3;
  c.projection = "pseudo";
  c.compact_aabb = false;
  c.densify_until = 100;
  const TrainConfig back = parse_train_config(format_train_config(c));
  EXPECT_EQ(format_train_config(back), format_train_config(c));
  EXPECT_EQ(back.projection, "pseudo");
  EXPECT_FALSE(back.compact_aabb);
}

TEST(TrainConfig, Defaults) {
  const TrainConfig c;
  EXPECT_EQ(c.iterations, 7000);
  EXPECT_EQ(c.densify_until, 3000);
  EXPECT_DOUBLE_EQ(c.lambda_rho, 0.2);
  EXPECT_DOUBLE_EQ(c.grad_threshold, 0.006);
  EXPECT_NO_THROW(c.validate());
}

TEST(TrainConfig, RejectsBadValues) {
  EXPECT_THROW(parse_train_config("no_such_key = 1\n"), std::exception);
  EXPECT_THROW(parse_train_config("lr_mlp = 0\n"), DomainError);
  EXPECT_THROW(parse_train_config("iterations = 10\n"), DomainError);  // densify_until > iterations
  EXPECT_THROW(parse_train_config("projection = fisheye\n"), DomainError);
}

}  // namespace
}  // namespace beamsplat
