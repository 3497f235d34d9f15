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

#include "beamsplat/field.hpp"

#include "beamsplat/binary_io.hpp"
#include "beamsplat/spatial_index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace beamsplat {

// ------------------------------------------------------------------- anchors

template <typename S>
Anchors<S> Anchors<S>::zeros(Eigen::Index n) {
  return {Mat3X<S>::Zero(3, n), MatX<S>::Zero(kFeatureDim, n), Mat3X<S>::Zero(3, n)};
}

template <typename S>
Anchors<S> Anchors<S>::select(std::span<const Eigen::Index> keep) const {
  Anchors out = zeros(static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) {
    out.position.col(k) = position.col(keep[k]);
    out.feature.col(k) = feature.col(keep[k]);
    out.base_scale.col(k) = base_scale.col(keep[k]);
  }
  return out;
}

template <typename S>
void Anchors<S>::append(const Anchors& other) {
  const Eigen::Index n = size(), m = other.size();
  position.conservativeResize(3, n + m);
  feature.conservativeResize(kFeatureDim, n + m);
  base_scale.conservativeResize(3, n + m);
  position.rightCols(m) = other.position;
  feature.rightCols(m) = other.feature;
  base_scale.rightCols(m) = other.base_scale;
}

template <typename S>
bool Anchors<S>::all_finite() const {
  return position.allFinite() && feature.allFinite() && base_scale.allFinite();
}

// ------------------------------------------------------------------ networks

template <typename S>
FieldWeights<S> FieldWeights<S>::create() {
  return {Mlp<S>::create({kBaseInputDim, kHiddenWidth, kHiddenWidth, kCovarianceOutputs}),
          Mlp<S>::create({kLatentInputDim, kHiddenWidth, kHiddenWidth, 1}),
          Mlp<S>::create({kLatentInputDim, kHiddenWidth, kHiddenWidth, 1}),
          Mlp<S>::create({kBaseInputDim, kHiddenWidth, kHiddenWidth, 1})};
}

template <typename S>
FieldWeights<S> FieldWeights<S>::zeros_like(const FieldWeights& o) {
  return {Mlp<S>::zeros_like(o.covariance), Mlp<S>::zeros_like(o.intensity), Mlp<S>::zeros_like(o.raydrop),
          Mlp<S>::zeros_like(o.opacity)};
}

template <typename S>
void FieldWeights<S>::init_uniform(std::mt19937_64& rng) {
  for (auto* n : nets()) n->init_uniform(rng);
}

template <typename S>
void FieldWeights<S>::set_zero() {
  for (auto* n : nets()) n->set_zero();
}

template <typename S>
bool FieldWeights<S>::all_finite() const {
  for (const auto* n : nets())
    if (!n->all_finite()) return false;
  return true;
}

// --------------------------------------------------------------------- field

template <typename S>
Eigen::Index Field<S>::anchor_count() const {
  Eigen::Index n = 0;
  for (const auto& g : groups) n += g.anchors.size();
  return n;
}

template <typename S>
int Field<S>::latent_column(int frame, const Vec3d& viewpoint) const {
  if (train_frames.empty()) return 0;
  if (std::find(train_frames.begin(), train_frames.end(), frame) != train_frames.end()) return frame;
  int best = train_frames.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (int f : train_frames) {
    if (f < 0 || f >= static_cast<int>(frame_poses.size())) continue;
    const double d = (frame_poses[f].translation() - viewpoint).norm();
    if (d < best_d) {
      best_d = d;
      best = f;
    }
  }
  return best;
}

template <typename S>
void Primitives<S>::resize(Eigen::Index n) {
  mean.resize(3, n);
  rotation.resize(4, n);
  scale.resize(3, n);
  intensity.resize(n);
  raydrop.resize(n);
  opacity.resize(n);
  source.resize(static_cast<std::size_t>(n));
}

template <typename S>
PrimitiveGrads<S> PrimitiveGrads<S>::zeros(Eigen::Index n) {
  PrimitiveGrads g;
  g.mean = Mat3X<S>::Zero(3, n);
  g.rotation = Eigen::Matrix<S, 4, Eigen::Dynamic>::Zero(4, n);
  g.scale = Mat3X<S>::Zero(3, n);
  g.intensity = VecX<S>::Zero(n);
  g.raydrop = VecX<S>::Zero(n);
  g.opacity = VecX<S>::Zero(n);
  return g;
}

// --------------------------------------------------------------------- spawn

namespace {

template <typename S>
S sigmoid(S x) {
  return S(1) / (S(1) + std::exp(-x));
}

template <typename S>
S softplus(S x) {
  return x > S(20) ? x : std::log1p(std::exp(x));
}

constexpr double kCoincident = 1e-9;
// Spawned scales never drop below this (m); softplus underflows to zero otherwise.
constexpr double kScaleFloor = 1e-6;

}  // namespace

template <typename S>
Eigen::Matrix<S, kViewInputDim, 1> view_encoding(const Vec3<S>& direction, S distance, double range_max) {
  Eigen::Matrix<S, kViewInputDim, 1> e;
  e.template head<3>() = direction;
  for (int k = 0; k < kDirectionFreqs; ++k) {
    const S freq = static_cast<S>(std::ldexp(kPi, k));
    for (int j = 0; j < 3; ++j) {
      e(3 + 6 * k + j) = std::sin(freq * direction(j));
      e(6 + 6 * k + j) = std::cos(freq * direction(j));
    }
  }
  e(kViewInputDim - 1) = distance / static_cast<S>(range_max);
  return e;
}

template <typename S>
Mat3<S> quat_to_rotation(const Eigen::Matrix<S, 4, 1>& q) {
  const S w = q(0), x = q(1), y = q(2), z = q(3);
  Mat3<S> r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),    //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

template <typename S>
Eigen::Matrix<S, 4, 1> quat_to_rotation_backward(const Eigen::Matrix<S, 4, 1>& q, const Mat3<S>& g) {
  const S w = q(0), x = q(1), y = q(2), z = q(3);
  Eigen::Matrix<S, 4, 1> out;
  out(0) = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  out(1) = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) + z * g(2, 0) +
                w * g(2, 1) - 2 * x * g(2, 2));
  out(2) = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                z * g(2, 1) - 2 * y * g(2, 2));
  out(3) = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) + y * g(1, 2) +
                x * g(2, 0) + y * g(2, 1));
  return out;
}

template <typename S>
Primitives<S> spawn(const Anchors<S>& anchors, const Vec3<S>& viewpoint, const VecX<S>& latent,
                    const FieldWeights<S>& nets, const FieldOptions& options,
                    std::span<const Eigen::Index> candidates, SpawnCache<S>* cache) {
  if (anchors.size() == 0) throw DomainError("spawn: no anchors");
  if (latent.size() != kLatentDim) throw DomainError("spawn: latent width mismatch");

  std::vector<Eigen::Index> source;
  source.reserve(candidates.empty() ? static_cast<std::size_t>(anchors.size()) : candidates.size());
  Eigen::Index skipped = 0;
  auto consider = [&](Eigen::Index i) {
    if ((anchors.position.col(i) - viewpoint).norm() <= static_cast<S>(kCoincident)) {
      ++skipped;
    } else {
      source.push_back(i);
    }
  };
  if (candidates.empty()) {
    for (Eigen::Index i = 0; i < anchors.size(); ++i) consider(i);
  } else {
    for (Eigen::Index i : candidates) consider(i);
  }

  const auto m = static_cast<Eigen::Index>(source.size());
  Mat3X<S> direction(3, m);
  VecX<S> distance(m);
  MatX<S> base(kBaseInputDim, m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Vec3<S> r = anchors.position.col(source[k]) - viewpoint;
    distance(k) = r.norm();
    direction.col(k) = r / distance(k);
    base.col(k).template head<kFeatureDim>() = anchors.feature.col(source[k]);
    if (options.view_inputs) {
      base.col(k).template tail<kViewInputDim>() = view_encoding<S>(direction.col(k), distance(k), options.range_max);
    } else {
      base.col(k).template tail<kViewInputDim>().setZero();
    }
  }
  MatX<S> with_latent(kLatentInputDim, m);
  with_latent.topRows(kBaseInputDim) = base;
  with_latent.bottomRows(kLatentDim) = latent.replicate(1, m);

  typename Mlp<S>::Cache c_cov, c_int, c_drop, c_op;
  const MatX<S> cov_raw = nets.covariance.forward(base, &c_cov);
  const MatX<S> int_raw = nets.intensity.forward(with_latent, &c_int);
  const MatX<S> drop_raw = nets.raydrop.forward(with_latent, &c_drop);
  const MatX<S> op_raw = nets.opacity.forward(base, &c_op);

  Primitives<S> p;
  p.resize(m);
  const S scale_max = static_cast<S>(options.scale_max);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index a = source[k];
    const Vec3<S> bs = anchors.base_scale.col(a);
    for (int j = 0; j < 3; ++j) {
      p.mean(j, k) = anchors.position(j, a) + std::tanh(cov_raw(j, k)) * S(2) * bs(j);
      p.scale(j, k) = std::clamp(softplus(cov_raw(7 + j, k)) * bs(j), static_cast<S>(kScaleFloor), scale_max);
    }
    Eigen::Matrix<S, 4, 1> q = cov_raw.col(k).template segment<4>(3);
    q(0) += S(1);
    const S qn = q.norm();
    p.rotation.col(k) = qn > S(0) ? Eigen::Matrix<S, 4, 1>(q / qn) : Eigen::Matrix<S, 4, 1>(1, 0, 0, 0);
    p.intensity(k) = sigmoid(int_raw(0, k));
    p.raydrop(k) = sigmoid(drop_raw(0, k));
    p.opacity(k) = sigmoid(op_raw(0, k));
    p.source[static_cast<std::size_t>(k)] = a;
  }

  if (cache) {
    cache->source = std::move(source);
    cache->direction = std::move(direction);
    cache->distance = std::move(distance);
    cache->cov_raw = cov_raw;
    cache->cov = std::move(c_cov);
    cache->intensity = std::move(c_int);
    cache->raydrop = std::move(c_drop);
    cache->opacity = std::move(c_op);
    cache->skipped = skipped;
  }
  return p;
}

template <typename S>
void spawn_backward(const Anchors<S>& anchors, const FieldWeights<S>& nets, const FieldOptions& options,
                    const SpawnCache<S>& cache, const Primitives<S>& prims, const PrimitiveGrads<S>& up,
                    AnchorGrads<S>& grads, FieldWeights<S>& net_grads) {
  const Eigen::Index m = prims.size();
  if (static_cast<Eigen::Index>(cache.source.size()) != m || up.mean.cols() != m)
    throw DomainError("spawn_backward: cache does not match primitives");
  const S scale_max = static_cast<S>(options.scale_max);

  MatX<S> g_cov(kCovarianceOutputs, m);
  MatX<S> g_int(1, m), g_drop(1, m), g_op(1, m);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index a = cache.source[static_cast<std::size_t>(k)];
    const Vec3<S> bs = anchors.base_scale.col(a);
    for (int j = 0; j < 3; ++j) {
      const S t = std::tanh(cache.cov_raw(j, k));
      const S gm = up.mean(j, k);
      grads.anchors.position(j, a) += gm;
      g_cov(j, k) = gm * S(2) * bs(j) * (S(1) - t * t);
      grads.anchors.base_scale(j, a) += gm * S(2) * t;

      const S raw = cache.cov_raw(7 + j, k);
      const S sp = softplus(raw);
      if (sp * bs(j) < scale_max && sp * bs(j) > static_cast<S>(kScaleFloor)) {
        g_cov(7 + j, k) = up.scale(j, k) * bs(j) * sigmoid(raw);
        grads.anchors.base_scale(j, a) += up.scale(j, k) * sp;
      } else {
        g_cov(7 + j, k) = S(0);
      }
    }
    Eigen::Matrix<S, 4, 1> q_raw = cache.cov_raw.col(k).template segment<4>(3);
    q_raw(0) += S(1);
    const S qn = q_raw.norm();
    const Eigen::Matrix<S, 4, 1> q = prims.rotation.col(k);
    const Eigen::Matrix<S, 4, 1> gq = up.rotation.col(k);
    g_cov.col(k).template segment<4>(3) =
        qn > S(0) ? Eigen::Matrix<S, 4, 1>((gq - q * q.dot(gq)) / qn) : Eigen::Matrix<S, 4, 1>::Zero();

    g_int(0, k) = up.intensity(k) * prims.intensity(k) * (S(1) - prims.intensity(k));
    g_drop(0, k) = up.raydrop(k) * prims.raydrop(k) * (S(1) - prims.raydrop(k));
    g_op(0, k) = up.opacity(k) * prims.opacity(k) * (S(1) - prims.opacity(k));
  }

  MatX<S> g_base = nets.covariance.backward(cache.cov, g_cov, net_grads.covariance);
  g_base += nets.opacity.backward(cache.opacity, g_op, net_grads.opacity);
  const MatX<S> g_lat_i = nets.intensity.backward(cache.intensity, g_int, net_grads.intensity);
  const MatX<S> g_lat_d = nets.raydrop.backward(cache.raydrop, g_drop, net_grads.raydrop);
  g_base += g_lat_i.topRows(kBaseInputDim) + g_lat_d.topRows(kBaseInputDim);
  grads.latent += g_lat_i.bottomRows(kLatentDim).rowwise().sum() + g_lat_d.bottomRows(kLatentDim).rowwise().sum();

  const S inv_range = S(1) / static_cast<S>(options.range_max);
  for (Eigen::Index k = 0; k < m; ++k) {
    const Eigen::Index a = cache.source[static_cast<std::size_t>(k)];
    grads.anchors.feature.col(a) += g_base.col(k).template head<kFeatureDim>();
    if (!options.view_inputs) continue;
    const auto g = g_base.col(k).template tail<kViewInputDim>();
    const Vec3<S> d = cache.direction.col(k);
    Vec3<S> g_dir = g.template head<3>();
    for (int f = 0; f < kDirectionFreqs; ++f) {
      const S freq = static_cast<S>(std::ldexp(kPi, f));
      for (int j = 0; j < 3; ++j) {
        g_dir(j) += freq * (std::cos(freq * d(j)) * g(3 + 6 * f + j) - std::sin(freq * d(j)) * g(6 + 6 * f + j));
      }
    }
    const S g_dist = g(kViewInputDim - 1) * inv_range;
    grads.anchors.position.col(a) += (g_dir - d * d.dot(g_dir)) / cache.distance(k) + d * g_dist;
  }
}

// ------------------------------------------------------------------ init

Anchors<float> init_anchors(std::span<const Vec3d> points, const InitOptions& opt, std::mt19937_64& rng) {
  if (points.empty()) throw DomainError("init: empty point cloud");
  if (opt.count <= 0) throw DomainError("init: anchor count must be positive");
  const std::size_t n = points.size();
  const auto count = static_cast<std::size_t>(opt.count);

  std::vector<std::size_t> pick;
  if (count <= n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
      std::uniform_int_distribution<std::size_t> u(i, n - 1);
      std::swap(order[i], order[u(rng)]);
    }
    pick.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(count));
    std::sort(pick.begin(), pick.end());
  } else {
    std::uniform_int_distribution<std::size_t> u(0, n - 1);
    for (std::size_t i = 0; i < count; ++i) pick.push_back(u(rng));
  }

  std::vector<Vec3d> sampled;
  sampled.reserve(count);
  for (std::size_t i : pick) sampled.push_back(points[i]);

  Anchors<float> a = Anchors<float>::zeros(static_cast<Eigen::Index>(count));
  const VoxelGrid grid(sampled);
  std::uniform_real_distribution<double> feat(-0.5 * opt.init_width, 0.5 * opt.init_width);
  for (std::size_t i = 0; i < count; ++i) {
    const auto c = static_cast<Eigen::Index>(i);
    a.position.col(c) = sampled[i].cast<float>();
    const auto nn = grid.k_nearest(sampled[i], opt.neighbor_k, i);
    double s = nn.empty() ? opt.scale_max : nn.back().distance;
    s = std::clamp(s, opt.scale_min, opt.scale_max);
    a.base_scale.col(c).setConstant(static_cast<float>(s));
    for (int f = 0; f < kFeatureDim; ++f) a.feature(f, c) = static_cast<float>(feat(rng));
  }
  return a;
}

Field<float> init_from_points(std::span<const Vec3d> points, const InitOptions& opt) {
  if (opt.frames <= 0) throw DomainError("init: frame count must be positive");
  std::mt19937_64 rng(opt.seed);
  Field<float> f;
  AnchorGroup<float> g;
  g.id = 0;
  g.anchors = init_anchors(points, opt, rng);
  f.nets = FieldWeights<float>::create();
  f.nets.init_uniform(rng);
  std::uniform_real_distribution<double> lat(-0.5 * opt.init_width, 0.5 * opt.init_width);
  g.latents.resize(kLatentDim, opt.frames);
  for (Eigen::Index c = 0; c < g.latents.cols(); ++c)
    for (Eigen::Index r = 0; r < kLatentDim; ++r) g.latents(r, c) = static_cast<float>(lat(rng));
  f.groups.push_back(std::move(g));
  return f;
}

// ---------------------------------------------------------------- checkpoint

namespace {

constexpr char kCheckpointMagic[4] = {'B', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

void write_pose(BinaryWriter& w, const Pose& p) {
  const Eigen::Quaterniond q(p.rotation());
  w.f64(p.translation().x());
  w.f64(p.translation().y());
  w.f64(p.translation().z());
  w.f64(q.w());
  w.f64(q.x());
  w.f64(q.y());
  w.f64(q.z());
}

Pose read_pose(BinaryReader& r) {
  Vec3d t;
  t.x() = r.f64();
  t.y() = r.f64();
  t.z() = r.f64();
  const double qw = r.f64(), qx = r.f64(), qy = r.f64(), qz = r.f64();
  Pose p = Pose::Identity();
  p.linear() = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
  p.translation() = t;
  return p;
}

template <typename Derived>
void write_f32(BinaryWriter& w, const Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) w.f32(static_cast<float>(m(r, c)));
}

template <typename Derived>
void read_f32(BinaryReader& rd, Eigen::DenseBase<Derived>& m) {
  for (Eigen::Index c = 0; c < m.cols(); ++c)
    for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = rd.f32();
}

void write_mlp(BinaryWriter& w, const Mlp<float>& m) {
  w.u32(static_cast<std::uint32_t>(m.weight.size()));
  for (std::size_t l = 0; l < m.weight.size(); ++l) {
    w.u32(static_cast<std::uint32_t>(m.weight[l].rows()));
    w.u32(static_cast<std::uint32_t>(m.weight[l].cols()));
    write_f32(w, m.weight[l]);
    write_f32(w, m.bias[l]);
  }
}

Mlp<float> read_mlp(BinaryReader& r) {
  Mlp<float> m;
  const std::uint32_t layers = r.u32();
  if (layers == 0 || layers > 64) throw ParseError("checkpoint: bad layer count");
  for (std::uint32_t l = 0; l < layers; ++l) {
    const std::uint32_t rows = r.u32(), cols = r.u32();
    if (rows == 0 || cols == 0 || rows > 4096 || cols > 4096) throw ParseError("checkpoint: bad layer shape");
    MatX<float> w(rows, cols);
    VecX<float> b(rows);
    read_f32(r, w);
    read_f32(r, b);
    m.weight.push_back(std::move(w));
    m.bias.push_back(std::move(b));
  }
  return m;
}

void check_net(const Mlp<float>& m, int in, int out) {
  for (std::size_t l = 1; l < m.weight.size(); ++l)
    if (m.weight[l].cols() != m.weight[l - 1].rows()) throw ParseError("checkpoint: layer widths do not chain");
  if (m.in_dim() != in || m.out_dim() != out) throw ParseError("checkpoint: network shape mismatch");
}

}  // namespace

void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  BinaryWriter w(path);
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);
  const SensorSpec& s = ck.spec;
  w.f64(s.f_up);
  w.f64(s.f_down);
  w.f64(s.range_min);
  w.f64(s.range_max);
  w.f64(s.divergence);
  w.u32(static_cast<std::uint32_t>(s.beams));
  w.u32(static_cast<std::uint32_t>(s.width));
  const Field<float>& f = ck.field;
  w.f64(f.options.scale_max);
  w.f64(f.options.range_max);
  w.u32(f.options.view_inputs ? 1 : 0);
  w.u64(f.version);
  w.u32(static_cast<std::uint32_t>(f.frame_poses.size()));
  for (const auto& p : f.frame_poses) write_pose(w, p);
  w.u32(static_cast<std::uint32_t>(f.train_frames.size()));
  for (int t : f.train_frames) w.u32(static_cast<std::uint32_t>(t));
  for (const auto* n : f.nets.nets()) write_mlp(w, *n);
  w.u32(static_cast<std::uint32_t>(f.groups.size()));
  for (const auto& g : f.groups) {
    w.i32(g.id);
    w.u64(static_cast<std::uint64_t>(g.anchors.size()));
    write_f32(w, g.anchors.position);
    write_f32(w, g.anchors.feature);
    write_f32(w, g.anchors.base_scale);
    w.u32(static_cast<std::uint32_t>(g.latents.cols()));
    write_f32(w, g.latents);
    w.u32(static_cast<std::uint32_t>(g.poses.size()));
    for (const auto& p : g.poses) {
      const std::uint8_t present = p.has_value() ? 1 : 0;
      w.bytes(&present, 1);
      write_pose(w, p.value_or(Pose::Identity()));
    }
  }
  w.u32(static_cast<std::uint32_t>(ck.extra.size()));
  for (const auto& b : ck.extra) {
    w.fixed_string(b.name, 32);
    w.u32(static_cast<std::uint32_t>(b.data.rows()));
    w.u32(static_cast<std::uint32_t>(b.data.cols()));
    write_f32(w, b.data);
  }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  BinaryReader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw ParseError("not a checkpoint: " + path.string());
  if (r.u32() != kCheckpointVersion) throw ParseError("unsupported checkpoint version");
  Checkpoint ck;
  SensorSpec& s = ck.spec;
  s.f_up = r.f64();
  s.f_down = r.f64();
  s.range_min = r.f64();
  s.range_max = r.f64();
  s.divergence = r.f64();
  s.beams = static_cast<int>(r.u32());
  s.width = static_cast<int>(r.u32());
  s.validate();
  Field<float>& f = ck.field;
  f.options.scale_max = r.f64();
  f.options.range_max = r.f64();
  f.options.view_inputs = r.u32() != 0;
  f.version = r.u64();
  const std::uint32_t frames = r.u32();
  for (std::uint32_t i = 0; i < frames; ++i) f.frame_poses.push_back(read_pose(r));
  const std::uint32_t trained = r.u32();
  for (std::uint32_t i = 0; i < trained; ++i) f.train_frames.push_back(static_cast<int>(r.u32()));
  f.nets.covariance = read_mlp(r);
  f.nets.intensity = read_mlp(r);
  f.nets.raydrop = read_mlp(r);
  f.nets.opacity = read_mlp(r);
  check_net(f.nets.covariance, kBaseInputDim, kCovarianceOutputs);
  check_net(f.nets.intensity, kLatentInputDim, 1);
  check_net(f.nets.raydrop, kLatentInputDim, 1);
  check_net(f.nets.opacity, kBaseInputDim, 1);
  const std::uint32_t group_count = r.u32();
  for (std::uint32_t gi = 0; gi < group_count; ++gi) {
    AnchorGroup<float> g;
    g.id = r.i32();
    const auto n = static_cast<Eigen::Index>(r.u64());
    g.anchors = Anchors<float>::zeros(n);
    read_f32(r, g.anchors.position);
    read_f32(r, g.anchors.feature);
    read_f32(r, g.anchors.base_scale);
    const std::uint32_t cols = r.u32();
    g.latents.resize(kLatentDim, cols);
    read_f32(r, g.latents);
    const std::uint32_t poses = r.u32();
    for (std::uint32_t i = 0; i < poses; ++i) {
      std::uint8_t present = 0;
      r.bytes(&present, 1);
      const Pose p = read_pose(r);
      g.poses.push_back(present ? std::optional<Pose>(p) : std::nullopt);
    }
    f.groups.push_back(std::move(g));
  }
  const std::uint32_t blocks = r.u32();
  for (std::uint32_t i = 0; i < blocks; ++i) {
    NamedBlock b;
    b.name = r.fixed_string(32);
    const std::uint32_t rows = r.u32(), cols = r.u32();
    b.data.resize(rows, cols);
    read_f32(r, b.data);
    ck.extra.push_back(std::move(b));
  }
  return ck;
}

// ------------------------------------------------------------ instantiation

#define BEAMSPLAT_FIELD_INSTANTIATE(S)                                                                          \
  template struct Anchors<S>;                                                                                   \
  template struct FieldWeights<S>;                                                                              \
  template struct Field<S>;                                                                                     \
  template struct Primitives<S>;                                                                                \
  template struct PrimitiveGrads<S>;                                                                            \
  template Eigen::Matrix<S, kViewInputDim, 1> view_encoding<S>(const Vec3<S>&, S, double);                      \
  template Mat3<S> quat_to_rotation<S>(const Eigen::Matrix<S, 4, 1>&);                                          \
  template Eigen::Matrix<S, 4, 1> quat_to_rotation_backward<S>(const Eigen::Matrix<S, 4, 1>&, const Mat3<S>&);  \
  template Primitives<S> spawn<S>(const Anchors<S>&, const Vec3<S>&, const VecX<S>&, const FieldWeights<S>&,    \
                                  const FieldOptions&, std::span<const Eigen::Index>, SpawnCache<S>*);          \
  template void spawn_backward<S>(const Anchors<S>&, const FieldWeights<S>&, const FieldOptions&,               \
                                  const SpawnCache<S>&, const Primitives<S>&,                                   \
                                  const PrimitiveGrads<S>&, AnchorGrads<S>&, FieldWeights<S>&);

BEAMSPLAT_FIELD_INSTANTIATE(float)
BEAMSPLAT_FIELD_INSTANTIATE(double)

}  // namespace beamsplat
