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

#include "beamsplat/dynamics.hpp"
#include "beamsplat/kv_config.hpp"
#include "beamsplat/metrics.hpp"
#include "beamsplat/parallel.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace beamsplat {

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw DomainError("train config: " + m); };
  if (iterations < 0) fail("iterations must be >= 0");
  if (anchors <= 0) fail("anchors must be positive");
  if (max_anchors <= 0) fail("max_anchors must be positive");
  if (densify_until > iterations) fail("densify_until exceeds iterations");
  if (densify_interval <= 0) fail("densify_interval must be positive");
  if (densify_from < 0) fail("densify_from must be >= 0");
  for (double r : {lr_position, lr_position_final, lr_feature, lr_base_scale, lr_mlp, lr_latent})
    if (!(r > 0.0)) fail("learning rates must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) fail("adam_eps must be positive");
  if (!(lambda_rho >= 0.0 && lambda_rho <= 1.0)) fail("lambda_rho must lie in [0, 1]");
  for (double w : {w_intensity, w_depth, w_raydrop, w_alpha, w_scale})
    if (!(w >= 0.0)) fail("loss weights must be nonnegative");
  if (!(grad_threshold > 0.0)) fail("grad_threshold must be positive");
  if (!(voxel_size > 0.0)) fail("voxel_size must be positive");
  if (!(scale_max > 0.0)) fail("scale_max must be positive");
  if (!(init_scale_min > 0.0 && init_scale_max >= init_scale_min)) fail("bad initial scale bounds");
  if (neighbor_k <= 0) fail("neighbor_k must be positive");
  if (projection != "micro" && projection != "pseudo") fail("projection must be 'micro' or 'pseudo'");
  if (!(guard_factor > 1.0) || guard_window <= 0) fail("bad divergence guard");
  if (checkpoint_interval < 0) fail("checkpoint_interval must be >= 0");
  if (threads < 0) fail("threads must be >= 0");
}

RenderOptions TrainConfig::render_options() const {
  RenderOptions o;
  o.projection = projection == "pseudo" ? ProjectionMode::kPseudoPlane : ProjectionMode::kMicroPlane;
  o.compact_aabb = compact_aabb;
  o.raydrop_threshold = raydrop_threshold;
  o.density_threshold = density_threshold;
  o.density_band = density_band;
  o.density_alpha = density_alpha;
  return o;
}

namespace {

// One list drives parsing and formatting.
template <typename Cfg, typename Fn>
void visit_config(Cfg& c, Fn&& fn) {
  fn("iterations", c.iterations);
  fn("seed", c.seed);
  fn("anchors", c.anchors);
  fn("neighbor_k", c.neighbor_k);
  fn("init_scale_min", c.init_scale_min);
  fn("init_scale_max", c.init_scale_max);
  fn("init_width", c.init_width);
  fn("scale_max", c.scale_max);
  fn("view_inputs", c.view_inputs);
  fn("dynamic", c.dynamic);
  fn("box_margin", c.box_margin);
  fn("icp_iterations", c.icp_iterations);
  fn("lambda_rho", c.lambda_rho);
  fn("w_intensity", c.w_intensity);
  fn("w_depth", c.w_depth);
  fn("w_raydrop", c.w_raydrop);
  fn("w_alpha", c.w_alpha);
  fn("w_scale", c.w_scale);
  fn("lr_position", c.lr_position);
  fn("lr_position_final", c.lr_position_final);
  fn("lr_feature", c.lr_feature);
  fn("lr_base_scale", c.lr_base_scale);
  fn("lr_mlp", c.lr_mlp);
  fn("lr_latent", c.lr_latent);
  fn("beta1", c.beta1);
  fn("beta2", c.beta2);
  fn("adam_eps", c.adam_eps);
  fn("densify_from", c.densify_from);
  fn("densify_until", c.densify_until);
  fn("densify_interval", c.densify_interval);
  fn("grad_threshold", c.grad_threshold);
  fn("prune_opacity", c.prune_opacity);
  fn("voxel_size", c.voxel_size);
  fn("max_anchors", c.max_anchors);
  fn("projection", c.projection);
  fn("compact_aabb", c.compact_aabb);
  fn("raydrop_threshold", c.raydrop_threshold);
  fn("density_threshold", c.density_threshold);
  fn("density_band", c.density_band);
  fn("density_alpha", c.density_alpha);
  fn("guard_factor", c.guard_factor);
  fn("guard_window", c.guard_window);
  fn("checkpoint_interval", c.checkpoint_interval);
  fn("deterministic", c.deterministic);
  fn("threads", c.threads);
}

}  // namespace

TrainConfig parse_train_config(const std::string& text, TrainConfig base) {
  const KeyValues kv = KeyValues::parse(text);
  visit_config(base, [&](const char* key, auto& field) { kv.get(key, field); });
  kv.reject_unused();
  base.validate();
  return base;
}

TrainConfig load_train_config(const std::filesystem::path& path, TrainConfig base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str(), base);
}

std::string format_train_config(const TrainConfig& cfg) {
  std::ostringstream out;
  out.precision(17);
  TrainConfig copy = cfg;
  visit_config(copy, [&](const char* key, auto& v) {
    out << key << " = ";
    if constexpr (std::is_same_v<std::decay_t<decltype(v)>, bool>) out << (v ? "true" : "false");
    else out << v;
    out << '\n';
  });
  return out.str();
}

// ---------------------------------------------------------------- losses

bool LossReport::all_finite() const {
  for (double v : {intensity, depth, raydrop, alpha, scale, total, intensity_l1, intensity_dssim})
    if (!std::isfinite(v)) return false;
  return true;
}

double binary_entropy(double x) {
  if (x <= 0.0 || x >= 1.0) return 0.0;
  return -x * std::log(x) - (1.0 - x) * std::log1p(-x);
}

LossReport image_loss(const RangeImage& render, const RangeImage& gt, const TrainConfig& cfg, PixelGrads* grads,
                      const Mask* include) {
  if (!(render.spec == gt.spec)) throw DomainError("loss: render and ground truth use different sensor specs");
  const int rows = gt.rows(), cols = gt.cols();
  if (include && (include->rows() != rows || include->cols() != cols))
    throw DomainError("loss: include mask has the wrong shape");
  if (grads) *grads = PixelGrads::zeros(gt.spec);

  Mask all = include ? *include : Mask::Constant(rows, cols, true);
  Mask fit = all && gt.valid;
  const double n_fit = static_cast<double>(fit.count());
  const double n_all = static_cast<double>(all.count());

  LossReport r;
  // Intensity: L1 plus SSIM dissimilarity on images masked to the fit pixels.
  if (n_fit > 0) {
    double l1 = 0.0, dl1 = 0.0;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        if (!fit(i, j)) continue;
        const double e = render.intensity(i, j) - gt.intensity(i, j);
        const double ed = render.depth(i, j) - gt.depth(i, j);
        l1 += std::abs(e);
        dl1 += std::abs(ed);
        if (grads) {
          grads->intensity(i, j) += cfg.w_intensity * (1.0 - cfg.lambda_rho) * ((e > 0) - (e < 0)) / n_fit;
          grads->depth(i, j) += cfg.w_depth * ((ed > 0) - (ed < 0)) / n_fit;
        }
      }
    r.intensity_l1 = l1 / n_fit;
    r.depth = cfg.w_depth * dl1 / n_fit;

    const Plane fm = fit.cast<double>();
    const Plane x = render.intensity * fm;
    const Plane y = gt.intensity * fm;
    Plane gx;
    const double s = ssim_with_grad(x, y, gx);
    r.intensity_dssim = 1.0 - s;
    if (grads) grads->intensity -= cfg.w_intensity * cfg.lambda_rho * gx * fm;
    r.intensity = cfg.w_intensity * ((1.0 - cfg.lambda_rho) * r.intensity_l1 + cfg.lambda_rho * r.intensity_dssim);
  }
  // Ray drop (L2 to the measured mask) and alpha entropy over every pixel.
  if (n_all > 0) {
    double l2 = 0.0, ent = 0.0;
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j) {
        if (!all(i, j)) continue;
        const double e = render.raydrop(i, j) - gt.raydrop(i, j);
        const double a = render.accum_alpha(i, j);
        l2 += e * e;
        ent += binary_entropy(a);
        if (grads) {
          grads->raydrop(i, j) += cfg.w_raydrop * 2.0 * e / n_all;
          if (a > 0.0 && a < 1.0) grads->accum_alpha(i, j) += cfg.w_alpha * std::log((1.0 - a) / a) / n_all;
        }
      }
    r.raydrop = cfg.w_raydrop * l2 / n_all;
    r.alpha = cfg.w_alpha * ent / n_all;
  }
  r.total = r.intensity + r.depth + r.raydrop + r.alpha;
  return r;
}

template <typename S>
double scale_regularizer(const ForwardPass<S>& pass, Mat3X<S>* grad) {
  const std::size_t n = pass.gaussians.size();
  if (grad) *grad = Mat3X<S>::Zero(3, static_cast<Eigen::Index>(n));
  std::vector<std::size_t> hit;
  for (std::size_t j = 0; j < pass.projected.size(); ++j)
    if (pass.raster.contributed[j]) hit.push_back(static_cast<std::size_t>(pass.projected[j].index));
  if (hit.empty()) return 0.0;
  const double inv = 1.0 / static_cast<double>(hit.size());
  double sum = 0.0;
  for (std::size_t i : hit) {
    const Vec3<S>& s = pass.gaussians[i].scale;
    sum += static_cast<double>(s(0)) * static_cast<double>(s(1)) * static_cast<double>(s(2));
    if (grad) {
      const auto c = static_cast<Eigen::Index>(i);
      (*grad)(0, c) = static_cast<S>(inv * static_cast<double>(s(1) * s(2)));
      (*grad)(1, c) = static_cast<S>(inv * static_cast<double>(s(0) * s(2)));
      (*grad)(2, c) = static_cast<S>(inv * static_cast<double>(s(0) * s(1)));
    }
  }
  return sum * inv;
}

template <typename S>
LossResult<S> loss_total(const ForwardPass<S>& pass, const RangeImage& gt, const TrainConfig& cfg,
                         const Mask* include) {
  if (!(pass.spec == gt.spec)) throw DomainError("loss: render and ground truth use different sensor specs");
  LossResult<S> out;
  out.report = image_loss(pass.raster.image, gt, cfg, &out.pixel, include);
  out.report.scale = cfg.w_scale * scale_regularizer(pass, &out.scale_grad);
  out.scale_grad *= static_cast<S>(cfg.w_scale);
  out.report.total += out.report.scale;
  return out;
}

template double scale_regularizer<float>(const ForwardPass<float>&, Mat3X<float>*);
template double scale_regularizer<double>(const ForwardPass<double>&, Mat3X<double>*);
template LossResult<float> loss_total<float>(const ForwardPass<float>&, const RangeImage&, const TrainConfig&,
                                             const Mask*);
template LossResult<double> loss_total<double>(const ForwardPass<double>&, const RangeImage&, const TrainConfig&,
                                               const Mask*);

// ---------------------------------------------------------------- optimizer

namespace {

enum class Kind { kPosition, kFeature, kBaseScale, kLatent, kNet };

/// Walks the field, its two moment copies and a gradient bundle in lockstep.
template <typename Fn>
void for_each_block(Field<float>& f, Field<float>& m1, Field<float>& m2, const GradientBundle<float>& g, Fn&& fn) {
  for (std::size_t k = 0; k < f.groups.size(); ++k) {
    auto& a = f.groups[k].anchors;
    auto& ma = m1.groups[k].anchors;
    auto& va = m2.groups[k].anchors;
    const auto& ga = g.anchors[k];
    fn(Kind::kPosition, a.position.data(), ga.position.data(), ma.position.data(), va.position.data(),
       a.position.size());
    fn(Kind::kFeature, a.feature.data(), ga.feature.data(), ma.feature.data(), va.feature.data(), a.feature.size());
    fn(Kind::kBaseScale, a.base_scale.data(), ga.base_scale.data(), ma.base_scale.data(), va.base_scale.data(),
       a.base_scale.size());
    fn(Kind::kLatent, f.groups[k].latents.data(), g.latents[k].data(), m1.groups[k].latents.data(),
       m2.groups[k].latents.data(), f.groups[k].latents.size());
  }
  const auto nets = f.nets.nets();
  const auto n1 = m1.nets.nets();
  const auto n2 = m2.nets.nets();
  const auto gn = g.nets.nets();
  for (std::size_t k = 0; k < nets.size(); ++k)
    for (std::size_t l = 0; l < nets[k]->weight.size(); ++l) {
      fn(Kind::kNet, nets[k]->weight[l].data(), gn[k]->weight[l].data(), n1[k]->weight[l].data(),
         n2[k]->weight[l].data(), nets[k]->weight[l].size());
      fn(Kind::kNet, nets[k]->bias[l].data(), gn[k]->bias[l].data(), n1[k]->bias[l].data(), n2[k]->bias[l].data(),
         nets[k]->bias[l].size());
    }
}

Field<float> zeros_like(const Field<float>& f) {
  Field<float> z = f;
  for (auto& g : z.groups) {
    g.anchors.position.setZero();
    g.anchors.feature.setZero();
    g.anchors.base_scale.setZero();
    g.latents.setZero();
  }
  z.nets.set_zero();
  return z;
}

bool shapes_match(const Field<float>& f, const GradientBundle<float>& g) {
  if (g.anchors.size() != f.groups.size() || g.latents.size() != f.groups.size()) return false;
  for (std::size_t k = 0; k < f.groups.size(); ++k) {
    if (g.anchors[k].size() != f.groups[k].anchors.size()) return false;
    if (g.latents[k].cols() != f.groups[k].latents.cols()) return false;
  }
  return true;
}

}  // namespace

TrainState TrainState::create(Field<float> field) {
  TrainState s;
  s.moment1 = zeros_like(field);
  s.moment2 = zeros_like(field);
  for (const auto& g : field.groups) s.stats.push_back(DensifyStats::zeros(g.anchors.size()));
  s.field = std::move(field);
  return s;
}

double position_learning_rate(const TrainConfig& cfg, int iteration) {
  if (cfg.iterations <= 0) return cfg.lr_position;
  const double t = std::clamp(static_cast<double>(iteration) / cfg.iterations, 0.0, 1.0);
  return std::exp((1.0 - t) * std::log(cfg.lr_position) + t * std::log(cfg.lr_position_final));
}

bool optimizer_step(TrainState& state, const GradientBundle<float>& grads, const TrainConfig& cfg, int iteration) {
  if (!shapes_match(state.field, grads)) throw DomainError("optimizer: gradient shapes do not match the field");
  if (!grads.all_finite()) {
    ++state.rejected;
    return false;
  }
  const AdamRule adam{cfg.beta1, cfg.beta2, cfg.adam_eps};
  const std::int64_t step = state.step + 1;
  const double lr_pos = position_learning_rate(cfg, iteration);
  std::vector<float> log_x, log_g;
  for_each_block(state.field, state.moment1, state.moment2, grads,
                 [&](Kind kind, float* x, const float* g, float* m, float* v, Eigen::Index n) {
                   const auto len = static_cast<std::size_t>(n);
                   switch (kind) {
                     case Kind::kPosition: adam.update(x, g, m, v, len, lr_pos, step); break;
                     case Kind::kFeature: adam.update(x, g, m, v, len, cfg.lr_feature, step); break;
                     case Kind::kLatent: adam.update(x, g, m, v, len, cfg.lr_latent, step); break;
                     case Kind::kNet: adam.update(x, g, m, v, len, cfg.lr_mlp, step); break;
                     case Kind::kBaseScale: {
                       // d/d(log b) = b * d/db; exp keeps the scale positive.
                       // The step is applied as a factor so a zero step leaves b bit-exact.
                       log_x.assign(len, 0.0f);
                       log_g.resize(len);
                       for (std::size_t i = 0; i < len; ++i) log_g[i] = g[i] * x[i];
                       adam.update(log_x.data(), log_g.data(), m, v, len, cfg.lr_base_scale, step);
                       for (std::size_t i = 0; i < len; ++i) x[i] *= std::exp(log_x[i]);
                       break;
                     }
                   }
                 });
  state.step = step;
  ++state.field.version;
  return true;
}

// ---------------------------------------------------------------- densification

DensifyStats DensifyStats::zeros(Eigen::Index n) {
  return {VecX<double>::Zero(n), VecX<double>::Zero(n), VecX<double>::Zero(n), Mat3X<double>::Zero(3, n),
          Mat3X<double>::Zero(3, n)};
}

DensifyStats DensifyStats::select(std::span<const Eigen::Index> keep) const {
  DensifyStats s = zeros(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    const auto i = keep[k], o = static_cast<Eigen::Index>(k);
    s.grad_sum(o) = grad_sum(i);
    s.views(o) = views(i);
    s.opacity_sum(o) = opacity_sum(i);
    s.offset.col(o) = offset.col(i);
    s.axis.col(o) = axis.col(i);
  }
  return s;
}

void DensifyStats::append_zeros(Eigen::Index n) {
  const Eigen::Index m = grad_sum.size();
  grad_sum.conservativeResize(m + n);
  views.conservativeResize(m + n);
  opacity_sum.conservativeResize(m + n);
  offset.conservativeResize(3, m + n);
  axis.conservativeResize(3, m + n);
  grad_sum.tail(n).setZero();
  views.tail(n).setZero();
  opacity_sum.tail(n).setZero();
  offset.rightCols(n).setZero();
  axis.rightCols(n).setZero();
}

void accumulate_stats(TrainState& state, const ForwardPass<float>& pass, const GradientBundle<float>& grads) {
  for (std::size_t k = 0; k < state.stats.size(); ++k) {
    DensifyStats& s = state.stats[k];
    for (Eigen::Index i = 0; i < s.grad_sum.size(); ++i) {
      if (!grads.visible[k][static_cast<std::size_t>(i)]) continue;
      s.grad_sum(i) += static_cast<double>(grads.screen_abs[k].col(i).norm());
      s.views(i) += 1.0;
      s.opacity_sum(i) += static_cast<double>(grads.opacity[k](i));
    }
  }
  for (const auto& gp : pass.groups) {
    DensifyStats& s = state.stats[gp.group];
    const auto& anchors = state.field.groups[gp.group].anchors;
    for (Eigen::Index p = 0; p < gp.prims.size(); ++p) {
      const Eigen::Index a = gp.prims.source[static_cast<std::size_t>(p)];
      s.offset.col(a) = (gp.prims.mean.col(p) - anchors.position.col(a)).cast<double>();
      const Mat3d rot = quat_to_rotation<float>(gp.prims.rotation.col(p)).cast<double>();
      Eigen::Index ax = 0;
      gp.prims.scale.col(p).maxCoeff(&ax);
      s.axis.col(a) = rot.col(ax) * static_cast<double>(gp.prims.scale(ax, p));
    }
  }
}

namespace {

template <typename M>
void append_zero_cols(M& m, Eigen::Index n) {
  const Eigen::Index c = m.cols();
  m.conservativeResize(m.rows(), c + n);
  m.rightCols(n).setZero();
}

void append_zero_anchors(Anchors<float>& a, Eigen::Index n) {
  append_zero_cols(a.position, n);
  append_zero_cols(a.feature, n);
  append_zero_cols(a.base_scale, n);
}

struct Candidate {
  double stat;
  std::size_t group;
  Eigen::Index index;
};

}  // namespace

DensifyReport densify(TrainState& state, const TrainConfig& cfg, int iteration) {
  (void)iteration;
  DensifyReport rep;
  Field<float>& f = state.field;
  const std::size_t groups = f.groups.size();

  // Pruning and growth candidates from the window averages.
  std::vector<std::vector<std::uint8_t>> pruned(groups);
  std::vector<Candidate> cand;
  std::size_t survivors = 0;
  for (std::size_t k = 0; k < groups; ++k) {
    const DensifyStats& s = state.stats[k];
    const Eigen::Index n = f.groups[k].anchors.size();
    pruned[k].assign(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      if (s.views(i) <= 0.0) continue;
      if (s.opacity_sum(i) / s.views(i) < cfg.prune_opacity) {
        pruned[k][static_cast<std::size_t>(i)] = 1;
        continue;
      }
      const double avg = s.grad_sum(i) / s.views(i);
      if (avg > cfg.grad_threshold) cand.push_back({avg, k, i});
    }
    survivors += static_cast<std::size_t>(n) - static_cast<std::size_t>(std::count(pruned[k].begin(), pruned[k].end(), 1));
  }
  std::sort(cand.begin(), cand.end(), [](const Candidate& a, const Candidate& b) {
    if (a.stat != b.stat) return a.stat > b.stat;
    if (a.group != b.group) return a.group < b.group;
    return a.index < b.index;
  });
  const auto cap = static_cast<std::size_t>(cfg.max_anchors);
  const std::size_t budget = cap > survivors ? cap - survivors : 0;
  if (cand.size() > budget) {
    rep.capped = cand.size() - budget;
    cand.resize(budget);
  }

  // New anchors per group; split parents are removed.
  std::vector<Anchors<float>> born(groups);
  for (std::size_t k = 0; k < groups; ++k) born[k] = Anchors<float>::zeros(0);
  std::vector<std::vector<std::uint8_t>> split(groups);
  for (std::size_t k = 0; k < groups; ++k) split[k].assign(pruned[k].size(), 0);
  for (const Candidate& c : cand) {
    const Anchors<float>& a = f.groups[c.group].anchors;
    const DensifyStats& s = state.stats[c.group];
    const Vec3d pos = a.position.col(c.index).cast<double>();
    const Vec3d base = a.base_scale.col(c.index).cast<double>();
    Anchors<float>& out = born[c.group];
    auto push = [&](const Vec3d& p, const Vec3d& scale) {
      const Eigen::Index at = out.size();
      append_zero_anchors(out, 1);
      out.position.col(at) = p.cast<float>();
      out.feature.col(at) = a.feature.col(c.index);
      out.base_scale.col(at) = scale.cast<float>();
    };
    if (base.maxCoeff() > cfg.voxel_size) {
      Vec3d axis = s.axis.col(c.index);
      if (axis.norm() <= 0.0) {
        Eigen::Index ax = 0;
        base.maxCoeff(&ax);
        axis = Vec3d::Unit(ax) * base(ax);
      }
      push(pos + 0.5 * axis, 0.6 * base);
      push(pos - 0.5 * axis, 0.6 * base);
      split[c.group][static_cast<std::size_t>(c.index)] = 1;
      ++rep.split;
    } else {
      Vec3d offset = s.offset.col(c.index);
      const double reach = base.maxCoeff();
      if (offset.norm() < 0.1 * reach) {
        // A child on top of its parent would receive identical gradients forever.
        const std::uint64_t key = mix64(static_cast<std::uint64_t>(c.index) * 1315423911ULL + c.group);
        Vec3d u(hash_uniform(key, 1, 0) - 0.5, hash_uniform(key, 2, 0) - 0.5, hash_uniform(key, 3, 0) - 0.5);
        if (u.norm() < 1e-9) u = Vec3d::UnitX();
        offset = 0.5 * reach * u.normalized();
      }
      push(pos + offset, base);
      ++rep.grown;
    }
  }

  for (std::size_t k = 0; k < groups; ++k) {
    std::vector<Eigen::Index> keep;
    for (std::size_t i = 0; i < pruned[k].size(); ++i)
      if (!pruned[k][i] && !split[k][i]) keep.push_back(static_cast<Eigen::Index>(i));
    rep.pruned += static_cast<std::size_t>(std::count(pruned[k].begin(), pruned[k].end(), 1));
    const Eigen::Index added = born[k].size();
    auto& g = f.groups[k];
    g.anchors = g.anchors.select(keep);
    g.anchors.append(born[k]);
    for (Field<float>* m : {&state.moment1, &state.moment2}) {
      auto& mg = m->groups[k].anchors;
      mg = mg.select(keep);
      append_zero_anchors(mg, added);
    }
    state.stats[k] = DensifyStats::zeros(g.anchors.size());
  }
  ++f.version;
  state.moment1.version = state.moment2.version = f.version;
  return rep;
}

// ---------------------------------------------------------------- loop

Field<float> initialize_field(const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  if (data.train.empty()) throw DomainError("train: no training frames");
  if (data.frames.size() != data.poses.size()) throw DomainError("train: frame and pose counts differ");
  for (const auto& fr : data.frames)
    if (!(fr.spec == data.spec)) throw DomainError("train: frames use inconsistent sensor specs");
  for (int f : data.train)
    if (f < 0 || f >= static_cast<int>(data.frames.size())) throw DomainError("train: bad training frame index");

  std::vector<InstanceTrack> tracks;
  if (cfg.dynamic && !data.tracks.empty()) {
    TrackOptions to;
    to.margin = cfg.box_margin;
    to.icp_iterations = cfg.icp_iterations;
    to.frames = data.train;
    tracks = build_tracks(data, to);
  }

  std::vector<Vec3d> static_pts;
  for (int f : data.train) {
    const auto pts = rangeimage_to_points(data.frames[static_cast<std::size_t>(f)], data.poses[static_cast<std::size_t>(f)]);
    std::vector<TrackRecord> boxes;
    for (const auto& t : tracks)
      if (t.boxes[static_cast<std::size_t>(f)]) boxes.push_back(*t.boxes[static_cast<std::size_t>(f)]);
    if (boxes.empty()) {
      for (const auto& p : pts) static_pts.push_back(p.position);
    } else {
      for (const auto& p : decompose_frame(pts, boxes, cfg.box_margin).static_points) static_pts.push_back(p.position);
    }
  }
  std::size_t total = static_pts.size();
  for (const auto& t : tracks) total += t.canonical_points.size();
  if (total == 0) throw DomainError("train: training frames contain no returns");

  auto share = [&](std::size_t n) {
    const double want = static_cast<double>(cfg.anchors) * static_cast<double>(n) / static_cast<double>(total);
    return std::max(1, static_cast<int>(std::lround(want)));
  };

  InitOptions io;
  io.frames = static_cast<int>(data.frames.size());
  io.seed = cfg.seed;
  io.neighbor_k = cfg.neighbor_k;
  io.scale_min = cfg.init_scale_min;
  io.scale_max = cfg.init_scale_max;
  io.init_width = cfg.init_width;
  io.count = static_pts.empty() ? 1 : share(static_pts.size());
  Field<float> field;
  if (static_pts.empty()) {
    // Still need the networks and a static group; it just holds no anchors.
    const std::vector<Vec3d> one{Vec3d::Zero()};
    field = init_from_points(one, io);
    field.groups[0].anchors = Anchors<float>::zeros(0);
  } else {
    field = init_from_points(static_pts, io);
  }

  std::uniform_real_distribution<double> lat(-0.5 * cfg.init_width, 0.5 * cfg.init_width);
  for (const auto& t : tracks) {
    if (static_cast<int>(t.canonical_points.size()) <= cfg.neighbor_k) continue;
    std::mt19937_64 rng(mix64(cfg.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(t.id)));
    InitOptions ii = io;
    ii.count = share(t.canonical_points.size());
    AnchorGroup<float> g;
    g.id = t.id;
    g.anchors = init_anchors(t.canonical_points, ii, rng);
    g.latents.resize(kLatentDim, io.frames);
    for (Eigen::Index c = 0; c < g.latents.cols(); ++c)
      for (Eigen::Index r = 0; r < kLatentDim; ++r) g.latents(r, c) = static_cast<float>(lat(rng));
    g.poses = t.poses;
    field.groups.push_back(std::move(g));
  }
  field.options.scale_max = cfg.scale_max;
  field.options.range_max = data.spec.range_max;
  field.options.view_inputs = cfg.view_inputs;
  field.train_frames = data.train;
  field.frame_poses = data.poses;
  return field;
}

std::vector<CurveRow> train_loop(TrainState& state, const Dataset& data, const TrainConfig& cfg,
                                 const TrainHooks& hooks) {
  cfg.validate();
  if (data.train.empty()) throw DomainError("train: no training frames");
  const RenderOptions ropt = cfg.render_options();
  std::mt19937_64 rng(mix64(cfg.seed + 0x51ED));
  std::vector<int> order;
  std::size_t cursor = 0;
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<CurveRow> rows;
  double initial = std::numeric_limits<double>::quiet_NaN();
  int above = 0;

  for (int it = state.iteration; it < cfg.iterations; ++it) {
    if (cursor >= order.size()) {
      order = data.train;
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    const int frame = order[cursor++];
    const auto fi = static_cast<std::size_t>(frame);
    const ForwardPass<float> pass = forward<float>(state.field, frame, data.poses[fi], data.spec, ropt);
    const LossResult<float> loss = loss_total<float>(pass, data.frames[fi], cfg);
    const GradientBundle<float> grads = backward<float>(pass, loss.pixel, state.field, &loss.scale_grad);
    accumulate_stats(state, pass, grads);
    optimizer_step(state, grads, cfg, it);
    state.iteration = it + 1;

    const int done = it + 1;
    if (done >= cfg.densify_from && done <= cfg.densify_until && done % cfg.densify_interval == 0)
      densify(state, cfg, done);

    CurveRow row;
    row.iteration = done;
    row.frame = frame;
    row.loss = loss.report;
    row.anchors = static_cast<std::size_t>(state.field.anchor_count());
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rows.push_back(row);
    if (hooks.progress) hooks.progress(row);

    if (std::isnan(initial)) initial = loss.report.total;
    if (!std::isfinite(loss.report.total) || loss.report.total > cfg.guard_factor * initial) {
      if (++above >= cfg.guard_window) {
        std::ostringstream msg;
        msg << "training diverged: total loss above " << cfg.guard_factor << "x its initial value ("
            << initial << ") for " << cfg.guard_window << " consecutive iterations, last " << loss.report.total
            << " at iteration " << done;
        throw DivergenceError(msg.str(), std::move(rows));
      }
    } else {
      above = 0;
    }
    if (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0 && hooks.checkpoint)
      hooks.checkpoint(state, done);
  }
  return rows;
}

TrainResult train_scene(const Dataset& data, const TrainConfig& cfg, const TrainHooks& hooks) {
  TrainResult r{TrainState::create(initialize_field(data, cfg)), {}};
  r.curves = train_loop(r.state, data, cfg, hooks);
  return r;
}

std::string curves_csv(const std::vector<CurveRow>& rows) {
  std::ostringstream out;
  out << "iteration,frame,total,intensity,depth,raydrop,alpha,scale,anchors,wall_seconds\n";
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%zu,%.3f\n", r.iteration, r.frame,
                  r.loss.total, r.loss.intensity, r.loss.depth, r.loss.raydrop, r.loss.alpha, r.loss.scale, r.anchors,
                  r.wall_seconds);
    out << buf;
  }
  return out.str();
}

void save_curves(const std::vector<CurveRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << curves_csv(rows);
}

// ---------------------------------------------------------------- checkpoints

namespace {

template <typename Fn>
void visit_arrays(Field<float>& f, Fn&& fn) {
  for (std::size_t k = 0; k < f.groups.size(); ++k) {
    const std::string p = "g" + std::to_string(k) + ".";
    fn(p + "position", f.groups[k].anchors.position);
    fn(p + "feature", f.groups[k].anchors.feature);
    fn(p + "base_scale", f.groups[k].anchors.base_scale);
    fn(p + "latents", f.groups[k].latents);
  }
  const char* names[4] = {"covariance", "intensity", "raydrop", "opacity"};
  const auto nets = f.nets.nets();
  for (int k = 0; k < 4; ++k)
    for (std::size_t l = 0; l < nets[k]->weight.size(); ++l) {
      fn(std::string(names[k]) + ".w" + std::to_string(l), nets[k]->weight[l]);
      fn(std::string(names[k]) + ".b" + std::to_string(l), nets[k]->bias[l]);
    }
}

}  // namespace

Checkpoint make_checkpoint(const TrainState& state, const SensorSpec& spec) {
  Checkpoint c;
  c.spec = spec;
  c.field = state.field;
  MatX<float> counters(3, 1);
  counters << static_cast<float>(state.step), static_cast<float>(state.rejected), static_cast<float>(state.iteration);
  c.extra.push_back({"counters", counters});
  for (auto [tag, field] : {std::pair{"m1.", &state.moment1}, std::pair{"m2.", &state.moment2}}) {
    visit_arrays(const_cast<Field<float>&>(*field), [&](const std::string& name, const auto& m) {
      c.extra.push_back({tag + name, MatX<float>(m.template cast<float>())});
    });
  }
  return c;
}

TrainState restore_state(const Checkpoint& ckpt) {
  TrainState s = TrainState::create(ckpt.field);
  std::map<std::string, const MatX<float>*> blocks;
  for (const auto& b : ckpt.extra) blocks[b.name] = &b.data;
  if (auto it = blocks.find("counters"); it != blocks.end() && it->second->size() == 3) {
    s.step = static_cast<std::int64_t>((*it->second)(0));
    s.rejected = static_cast<std::int64_t>((*it->second)(1));
    s.iteration = static_cast<int>((*it->second)(2));
  }
  for (auto [tag, field] : {std::pair{"m1.", &s.moment1}, std::pair{"m2.", &s.moment2}}) {
    visit_arrays(*field, [&](const std::string& name, auto& m) {
      auto it = blocks.find(tag + name);
      if (it == blocks.end()) return;
      if (it->second->rows() != m.rows() || it->second->cols() != m.cols())
        throw ParseError(std::string("checkpoint: optimizer block '") + tag + name + "' has the wrong shape", 0);
      m = *it->second;
    });
  }
  return s;
}

// ---------------------------------------------------------------- gradcheck

namespace {

struct PixelProbe {
  double eps_angle;  // ray-to-center angle
  std::optional<double> q;
  double distance;
};

}  // namespace

Mask safe_pixel_mask(const ForwardPass<double>& pass, const RangeImage& gt, double margin) {
  const SensorSpec& spec = pass.spec;
  const RenderOptions& opt = pass.options;
  const double cut = opt.cutoff_sigma * opt.cutoff_sigma;
  const double gate_band = 1e-3;
  Mask safe = Mask::Constant(spec.beams, spec.width, true);
  for (int i = 0; i < spec.beams; ++i) {
    for (int j = 0; j < spec.width; ++j) {
      const Vec3d ray = pixel_center_ray(i, j, spec);
      std::vector<double> depths;
      bool ok = true;
      for (const auto& p : pass.projected) {
        const auto& g = pass.gaussians[static_cast<std::size_t>(p.index)];
        const double ang = std::acos(std::clamp(ray.dot(p.direction), -1.0, 1.0));
        if (ang > spec.divergence + gate_band) continue;
        if (std::abs(ang - spec.divergence) <= gate_band) {
          ok = false;
          break;
        }
        const auto q = kernel_radius2<double>(ray, g, p, spec, opt.projection);
        if (!q) continue;
        if (*q >= cut * (1.0 - margin) && *q <= cut * (1.0 + margin)) {
          ok = false;
          break;
        }
        if (*q < cut) depths.push_back(p.distance);
      }
      if (ok) {
        std::sort(depths.begin(), depths.end());
        for (std::size_t k = 1; k < depths.size(); ++k)
          if (depths[k] - depths[k - 1] < 1e-3) ok = false;
      }
      const std::size_t pix = static_cast<std::size_t>(i) * static_cast<std::size_t>(spec.width) +
                              static_cast<std::size_t>(j);
      if (ok) {
        for (const auto& e : pass.raster.tape.pixel(pix)) {
          const double after = e.transmittance * (1.0 - e.alpha);
          if (after >= 0.5 * opt.min_transmittance && after <= 2.0 * opt.min_transmittance) ok = false;
        }
      }
      if (ok && gt.valid(i, j)) {
        const auto& img = pass.raster.image;
        if (std::abs(img.depth(i, j) - gt.depth(i, j)) < 1e-3) ok = false;
        if (std::abs(img.intensity(i, j) - gt.intensity(i, j)) < 1e-4) ok = false;
      }
      safe(i, j) = ok;
    }
  }
  return safe;
}

double GradcheckResult::max_rel() const {
  double m = 0.0;
  for (const auto& g : groups) m = std::max(m, g.report.max_rel);
  return m;
}

namespace {

/// Hash of every discrete choice the loss depends on: which Gaussians are
/// projected and contribute, the per-pixel contributor order on the checked
/// pixels and every ReLU pattern. Equal signatures mean a probe stayed on
/// the same smooth piece.
std::uint64_t structure_signature(const ForwardPass<double>& pass, const Mask& mask, double scale_max) {
  std::uint64_t h = 0x1234567ULL;
  auto mix = [&](std::uint64_t v) { h = mix64(h ^ (v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2))); };
  for (const auto& p : pass.projected) mix(static_cast<std::uint64_t>(p.index));
  for (auto c : pass.raster.contributed) mix(c);
  const auto& tape = pass.raster.tape;
  for (std::size_t p = 0; p + 1 < tape.begin.size(); ++p) {
    if (!mask(static_cast<Eigen::Index>(p / static_cast<std::size_t>(pass.spec.width)),
              static_cast<Eigen::Index>(p % static_cast<std::size_t>(pass.spec.width))))
      continue;
    mix(p);
    for (const auto& e : tape.pixel(p)) mix(static_cast<std::uint64_t>(e.gaussian));
  }
  for (const auto& gp : pass.groups) {
    for (const auto* c : {&gp.cache.cov, &gp.cache.intensity, &gp.cache.raydrop, &gp.cache.opacity})
      for (const auto& hid : c->hidden)
        for (Eigen::Index k = 0; k < hid.size(); ++k) mix(hid.data()[k] > 0.0 ? 1 : 2);
    // Scale clamp at the upper bound.
    for (Eigen::Index k = 0; k < gp.prims.scale.size(); ++k)
      mix(gp.prims.scale.data()[k] >= scale_max ? 1 : 2);
  }
  return h;
}

}  // namespace

GradcheckResult pipeline_gradcheck(const GradcheckOptions& opt) {
  if (opt.anchors < 2) throw DomainError("gradcheck: need at least two anchors");
  SensorSpec spec;
  spec.beams = opt.beams;
  spec.width = opt.width;
  spec.f_up = 0.25;
  spec.f_down = 0.25;
  spec.range_min = 0.5;
  spec.range_max = 40.0;
  spec.divergence = 0.3;
  spec.validate();

  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };

  const Pose pose = make_pose(Vec3d(0.3, -0.2, 1.5), 0.4);
  const Pose inst_pose = make_pose(Vec3d(2.0, 3.0, 1.2), 0.7);
  const int n_inst = std::max(1, opt.anchors / 3);
  const int n_static = opt.anchors - n_inst;

  Field<double> field;
  field.nets = FieldWeights<double>::create();
  field.nets.init_uniform(rng);
  field.options.range_max = spec.range_max;
  field.train_frames = {0};
  field.frame_poses = {pose, make_pose(Vec3d(5, 0, 1.5), 0.0)};
  auto make_group = [&](int id, int n, const Pose& canon_to_world) {
    AnchorGroup<double> g;
    g.id = id;
    g.anchors = Anchors<double>::zeros(n);
    for (int k = 0; k < n; ++k) {
      const double az = uni(-kPi, kPi), el = uni(-0.15, 0.15), d = uni(3.0, 8.0);
      const Vec3d local(d * std::cos(el) * std::cos(az), d * std::cos(el) * std::sin(az), d * std::sin(el));
      g.anchors.position.col(k) = canon_to_world.inverse() * (pose * local);
      g.anchors.base_scale.col(k) = Vec3d(uni(0.3, 0.8), uni(0.3, 0.8), uni(0.3, 0.8));
      for (int r = 0; r < kFeatureDim; ++r) g.anchors.feature(r, k) = uni(-1.0, 1.0);
    }
    g.latents.resize(kLatentDim, 2);
    for (Eigen::Index k = 0; k < g.latents.size(); ++k) g.latents.data()[k] = uni(-1.0, 1.0);
    if (id != 0) g.poses = {canon_to_world, canon_to_world};
    return g;
  };
  field.groups.push_back(make_group(0, n_static, Pose::Identity()));
  field.groups.push_back(make_group(1, n_inst, inst_pose));

  RenderOptions ropt;
  ropt.projection = opt.projection;
  TrainConfig cfg;

  RangeImage gt = RangeImage::empty(spec);
  for (int i = 0; i < spec.beams; ++i)
    for (int j = 0; j < spec.width; ++j) {
      const bool drop = u01(rng) < 0.3;
      gt.valid(i, j) = !drop;
      gt.raydrop(i, j) = drop ? 1.0 : 0.0;
      gt.depth(i, j) = drop ? 0.0 : uni(2.0, 9.0);
      gt.intensity(i, j) = drop ? 0.0 : uni(0.0, 1.0);
    }

  const ForwardPass<double> base = forward<double>(field, 0, pose, spec, ropt);
  const Mask mask = safe_pixel_mask(base, gt, opt.margin);
  const LossResult<double> loss = loss_total<double>(base, gt, cfg, &mask);
  const GradientBundle<double> grads = backward<double>(base, loss.pixel, field, &loss.scale_grad);
  const VecX<double> analytic = flatten_gradient(grads);
  const VecX<double> x0 = flatten_parameters(field);
  const std::uint64_t sig0 = structure_signature(base, mask, field.options.scale_max);

  GradcheckResult res;
  res.safe_pixels = static_cast<std::size_t>(mask.count());
  res.gaussians = base.gaussians.size();

  Field<double> probe_field = field;
  auto eval = [&](const VecX<double>& x, std::uint64_t* sig) {
    unflatten_parameters(x, probe_field);
    const ForwardPass<double> p = forward<double>(probe_field, 0, pose, spec, ropt);
    if (sig) *sig = structure_signature(p, mask, field.options.scale_max);
    return loss_total<double>(p, gt, cfg, &mask).report.total;
  };

  // Bucket parameter ranges by name.
  std::map<std::string, std::vector<std::size_t>> buckets;
  std::vector<std::string> order;
  for (const auto& g : parameter_groups(field)) {
    if (!buckets.count(g.name)) order.push_back(g.name);
    auto& b = buckets[g.name];
    for (std::size_t i = g.begin; i < g.end; ++i) b.push_back(i);
  }
  for (const auto& name : order) {
    std::vector<std::size_t> coords = buckets[name];
    double gmax = 0.0;
    for (std::size_t i : coords) gmax = std::max(gmax, std::abs(analytic(static_cast<Eigen::Index>(i))));
    if (static_cast<int>(coords.size()) > opt.max_coords_per_group) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opt.max_coords_per_group));
      std::sort(coords.begin(), coords.end());
    }
    const double floor = std::max(opt.floor_fraction * gmax, 1e-15);
    GradcheckGroup gr;
    gr.name = name;
    double sum = 0.0;
    VecX<double> x = x0;
    for (std::size_t i : coords) {
      const auto k = static_cast<Eigen::Index>(i);
      const double h = opt.eps * std::max(1.0, std::abs(x0(k)));
      std::uint64_t sp = 0, sm = 0;
      x(k) = x0(k) + h;
      const double fp = eval(x, &sp);
      x(k) = x0(k) - h;
      const double fm = eval(x, &sm);
      x(k) = x0(k);
      if (sp != sig0 || sm != sig0) {
        ++gr.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = analytic(k);
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      sum += rel;
      if (rel > gr.report.max_rel || gr.report.checked == 0) {
        gr.report.max_rel = std::max(gr.report.max_rel, rel);
        gr.report.worst = i;
      }
      ++gr.report.checked;
    }
    gr.report.mean_rel = gr.report.checked ? sum / static_cast<double>(gr.report.checked) : 0.0;
    res.groups.push_back(gr);
  }
  return res;
}

}  // namespace beamsplat
