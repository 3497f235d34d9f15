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

#include "beamsplat/grad.hpp"

#include <algorithm>
#include <cmath>

namespace beamsplat {

namespace {

/// Anchors whose spawned mean could land inside the sensor's range shell and
/// elevation band (widened by the divergence cone). Offsets are bounded by
/// twice the base scale per axis, so everything else renders nothing.
template <typename S>
std::vector<Eigen::Index> reachable_anchors(const Anchors<S>& a, const Vec3<S>& viewpoint,
                                            const Eigen::Transform<S, 3, Eigen::Isometry>& to_sensor,
                                            const SensorSpec& spec) {
  std::vector<Eigen::Index> out;
  const double lo = -spec.f_down - spec.divergence, hi = spec.f_up + spec.divergence;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double dist = static_cast<double>((a.position.col(i) - viewpoint).norm());
    const double reach = 2.0 * static_cast<double>(a.base_scale.col(i).norm()) * (1.0 + 1e-6) + 1e-9;
    if (dist + reach < spec.range_min || dist - reach > spec.range_max) continue;
    if (reach < dist) {
      const Vec3d p = (to_sensor * a.position.col(i)).template cast<double>();
      const double elev = std::asin(std::clamp(p.z() / p.norm(), -1.0, 1.0));
      const double spread = std::asin(reach / dist) + 1e-9;
      if (elev - spread > hi || elev + spread < lo) continue;
    }
    out.push_back(i);
  }
  return out;
}

}  // namespace

template <typename S>
ForwardPass<S> forward(const Field<S>& field, int frame, const Pose& pose, const SensorSpec& spec,
                       const RenderOptions& opt) {
  spec.validate();
  require_rigid(pose);
  ForwardPass<S> pass;
  pass.frame = frame;
  pass.pose = pose;
  pass.spec = spec;
  pass.options = opt;
  pass.version = field.version;
  const Vec3d origin = pose.translation();
  const Pose world_to_sensor = pose.inverse();
  const int column = field.latent_column(frame, origin);

  for (std::size_t gi = 0; gi < field.groups.size(); ++gi) {
    const AnchorGroup<S>& group = field.groups[gi];
    if (!group.present(frame) || group.anchors.size() == 0) continue;
    if (column < 0 || column >= group.latents.cols()) throw DomainError("forward: no latent code for this frame");
    const Pose gp = group.pose(frame);
    GroupPass<S> gpass;
    gpass.group = gi;
    gpass.latent_column = column;
    gpass.to_sensor = (world_to_sensor * gp).template cast<S>();
    gpass.viewpoint = (gp.inverse() * origin).template cast<S>();
    gpass.candidates = reachable_anchors<S>(group.anchors, gpass.viewpoint, gpass.to_sensor, spec);
    if (gpass.candidates.empty()) continue;
    const VecX<S> latent = group.latents.col(column);
    gpass.prims = spawn<S>(group.anchors, gpass.viewpoint, latent, field.nets, field.options, gpass.candidates,
                           &gpass.cache);
    gpass.offset = pass.gaussians.size();
    const Mat3<S> a = gpass.to_sensor.linear();
    for (Eigen::Index k = 0; k < gpass.prims.size(); ++k) {
      SensorGaussian<S> g;
      g.mean = gpass.to_sensor * Vec3<S>(gpass.prims.mean.col(k));
      g.rotation = a * quat_to_rotation<S>(gpass.prims.rotation.col(k));
      g.scale = gpass.prims.scale.col(k);
      g.intensity = gpass.prims.intensity(k);
      g.raydrop = gpass.prims.raydrop(k);
      g.opacity = gpass.prims.opacity(k);
      pass.gaussians.push_back(g);
    }
    pass.groups.push_back(std::move(gpass));
  }

  for (std::size_t i = 0; i < pass.gaussians.size(); ++i) {
    auto p = project_gaussian<S>(pass.gaussians[i], static_cast<Eigen::Index>(i), spec, opt, &pass.cull);
    if (p) pass.projected.push_back(*p);
  }
  pass.raster = rasterize<S>(pass.projected, pass.gaussians, spec, opt);
  pass.raster.tape.version = field.version;
  return pass;
}

RangeImage render(const Field<float>& field, int frame, const Pose& pose, const SensorSpec& spec,
                  const RenderOptions& opt) {
  const ForwardPass<float> pass = forward<float>(field, frame, pose, spec, opt);
  return apply_raydrop<float>(pass.raster.image, pass.raster.tape, opt);
}

template <typename S>
GradientBundle<S> GradientBundle<S>::zeros_like(const Field<S>& field) {
  GradientBundle g;
  for (const auto& grp : field.groups) {
    const Eigen::Index n = grp.anchors.size();
    g.anchors.push_back(Anchors<S>::zeros(n));
    g.latents.push_back(MatX<S>::Zero(grp.latents.rows(), grp.latents.cols()));
    g.screen_abs.push_back(Eigen::Matrix<S, 2, Eigen::Dynamic>::Zero(2, n));
    g.opacity.push_back(VecX<S>::Zero(n));
    g.visible.emplace_back(static_cast<std::size_t>(n), 0);
  }
  g.nets = FieldWeights<S>::zeros_like(field.nets);
  return g;
}

template <typename S>
bool GradientBundle<S>::all_finite() const {
  for (const auto& a : anchors)
    if (!a.all_finite()) return false;
  for (const auto& l : latents)
    if (!l.allFinite()) return false;
  return nets.all_finite();
}

template <typename S>
GradientBundle<S> backward(const ForwardPass<S>& pass, const PixelGrads& upstream, const Field<S>& field,
                           const Mat3X<S>* scale_grad) {
  if (pass.version != field.version || pass.raster.tape.version != field.version)
    throw DomainError("backward: stale tape, parameters changed since the forward pass");
  for (const auto& gp : pass.groups)
    if (gp.group >= field.groups.size() || field.groups[gp.group].anchors.size() <= 0)
      throw DomainError("backward: field structure changed since the forward pass");
  const std::size_t n = pass.gaussians.size();
  if (scale_grad && scale_grad->cols() != static_cast<Eigen::Index>(n))
    throw DomainError("backward: scale gradient width mismatch");

  const SplatGrads<S> sg =
      rasterize_backward<S>(pass.raster.tape, upstream, pass.projected, pass.gaussians, pass.options);

  // Scatter projected-Gaussian gradients onto the flat Gaussian list.
  SplatGrads<S> flat = SplatGrads<S>::zeros(n);
  std::vector<std::uint8_t> projected(n, 0);
  for (std::size_t j = 0; j < pass.projected.size(); ++j) {
    const auto i = pass.projected[j].index;
    const auto ij = static_cast<Eigen::Index>(j);
    projected[static_cast<std::size_t>(i)] = 1;
    flat.mean.col(i) = sg.mean.col(ij);
    flat.rotation[static_cast<std::size_t>(i)] = sg.rotation[j];
    flat.scale.col(i) = sg.scale.col(ij);
    flat.intensity(i) = sg.intensity(ij);
    flat.raydrop(i) = sg.raydrop(ij);
    flat.opacity(i) = sg.opacity(ij);
    flat.screen_abs.col(i) = sg.screen_abs.col(ij);
  }
  if (scale_grad) flat.scale += *scale_grad;

  GradientBundle<S> out = GradientBundle<S>::zeros_like(field);
  for (const auto& gp : pass.groups) {
    const AnchorGroup<S>& group = field.groups[gp.group];
    const Eigen::Index m = gp.prims.size();
    const Mat3<S> at = gp.to_sensor.linear().transpose();
    PrimitiveGrads<S> pg = PrimitiveGrads<S>::zeros(m);
    for (Eigen::Index k = 0; k < m; ++k) {
      const auto i = static_cast<Eigen::Index>(gp.offset) + k;
      pg.mean.col(k) = at * flat.mean.col(i);
      const Mat3<S> g_rot = at * flat.rotation[static_cast<std::size_t>(i)];
      pg.rotation.col(k) = quat_to_rotation_backward<S>(gp.prims.rotation.col(k), g_rot);
      pg.scale.col(k) = flat.scale.col(i);
      pg.intensity(k) = flat.intensity(i);
      pg.raydrop(k) = flat.raydrop(i);
      pg.opacity(k) = flat.opacity(i);

      const Eigen::Index anchor = gp.prims.source[static_cast<std::size_t>(k)];
      if (projected[static_cast<std::size_t>(i)]) {
        out.screen_abs[gp.group].col(anchor) += flat.screen_abs.col(i);
        out.visible[gp.group][static_cast<std::size_t>(anchor)] = 1;
        out.opacity[gp.group](anchor) = gp.prims.opacity(k);
      }
    }
    AnchorGrads<S> ag{std::move(out.anchors[gp.group]), VecX<S>::Zero(kLatentDim)};
    spawn_backward<S>(group.anchors, field.nets, field.options, gp.cache, gp.prims, pg, ag, out.nets);
    out.anchors[gp.group] = std::move(ag.anchors);
    out.latents[gp.group].col(gp.latent_column) += ag.latent;
  }
  return out;
}

// ------------------------------------------------------------ flat views

namespace {

template <typename Fn>
void visit_parameters(const Field<double>& f, Fn&& fn) {
  for (const auto& g : f.groups) {
    fn("position", g.anchors.position.data(), g.anchors.position.size());
    fn("feature", g.anchors.feature.data(), g.anchors.feature.size());
    fn("base_scale", g.anchors.base_scale.data(), g.anchors.base_scale.size());
    fn("latent", g.latents.data(), g.latents.size());
  }
  const char* names[4] = {"net.covariance", "net.intensity", "net.raydrop", "net.opacity"};
  const auto nets = f.nets.nets();
  for (int k = 0; k < 4; ++k) {
    for (std::size_t l = 0; l < nets[k]->weight.size(); ++l) {
      fn(names[k], nets[k]->weight[l].data(), nets[k]->weight[l].size());
      fn(names[k], nets[k]->bias[l].data(), nets[k]->bias[l].size());
    }
  }
}

}  // namespace

std::vector<ParameterGroup> parameter_groups(const Field<double>& field) {
  std::vector<ParameterGroup> out;
  std::size_t at = 0;
  visit_parameters(field, [&](const char* name, const double*, Eigen::Index n) {
    const auto len = static_cast<std::size_t>(n);
    if (!out.empty() && out.back().name == name && out.back().end == at) {
      out.back().end += len;
    } else {
      out.push_back({name, at, at + len});
    }
    at += len;
  });
  return out;
}

VecX<double> flatten_parameters(const Field<double>& field) {
  std::vector<double> v;
  visit_parameters(field, [&](const char*, const double* p, Eigen::Index n) { v.insert(v.end(), p, p + n); });
  return Eigen::Map<VecX<double>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

void unflatten_parameters(const VecX<double>& x, Field<double>& field) {
  Eigen::Index at = 0;
  visit_parameters(field, [&](const char*, const double* p, Eigen::Index n) {
    if (at + n > x.size()) throw DomainError("unflatten: vector too short");
    std::copy_n(x.data() + at, n, const_cast<double*>(p));
    at += n;
  });
  if (at != x.size()) throw DomainError("unflatten: vector length mismatch");
  ++field.version;
}

VecX<double> flatten_gradient(const GradientBundle<double>& g) {
  std::vector<double> v;
  auto put = [&](const auto& m) { v.insert(v.end(), m.data(), m.data() + m.size()); };
  for (std::size_t k = 0; k < g.anchors.size(); ++k) {
    put(g.anchors[k].position);
    put(g.anchors[k].feature);
    put(g.anchors[k].base_scale);
    put(g.latents[k]);
  }
  for (const auto* net : g.nets.nets()) {
    for (std::size_t l = 0; l < net->weight.size(); ++l) {
      put(net->weight[l]);
      put(net->bias[l]);
    }
  }
  return Eigen::Map<VecX<double>>(v.data(), static_cast<Eigen::Index>(v.size()));
}

FdReport finite_diff_check(const std::function<double(const VecX<double>&)>& loss, const VecX<double>& x,
                           const VecX<double>& analytic, double eps, std::span<const std::size_t> coords,
                           double floor) {
  if (!(eps > 0.0)) throw DomainError("finite_diff_check: step must be positive");
  if (analytic.size() != x.size()) throw DomainError("finite_diff_check: gradient length mismatch");
  std::vector<std::size_t> all;
  if (coords.empty()) {
    all.resize(static_cast<std::size_t>(x.size()));
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    coords = all;
  }
  FdReport r;
  double sum = 0.0;
  VecX<double> probe = x;
  for (std::size_t i : coords) {
    const auto k = static_cast<Eigen::Index>(i);
    const double h = eps * std::max(1.0, std::abs(x(k)));
    probe(k) = x(k) + h;
    const double fp = loss(probe);
    probe(k) = x(k) - h;
    const double fm = loss(probe);
    probe(k) = x(k);
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw DomainError("finite_diff_check: non-finite loss");
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = analytic(k);
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    sum += rel;
    if (rel > r.max_rel || r.checked == 0) {
      r.max_rel = std::max(r.max_rel, rel);
      if (rel >= r.max_rel) r.worst = i;
    }
    ++r.checked;
  }
  r.mean_rel = r.checked ? sum / static_cast<double>(r.checked) : 0.0;
  return r;
}

#define BEAMSPLAT_GRAD_INSTANTIATE(S)                                                                    \
  template ForwardPass<S> forward<S>(const Field<S>&, int, const Pose&, const SensorSpec&,               \
                                     const RenderOptions&);                                              \
  template struct GradientBundle<S>;                                                                     \
  template GradientBundle<S> backward<S>(const ForwardPass<S>&, const PixelGrads&, const Field<S>&,      \
                                         const Mat3X<S>*);

BEAMSPLAT_GRAD_INSTANTIATE(float)
BEAMSPLAT_GRAD_INSTANTIATE(double)

}  // namespace beamsplat
