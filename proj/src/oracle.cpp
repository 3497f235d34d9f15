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

#include "beamsplat/oracle.hpp"

#include "beamsplat/kv_config.hpp"
#include "beamsplat/parallel.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace beamsplat {

namespace {

constexpr double kHitEpsilon = 1e-9;

void consider(std::optional<SurfaceHit>& best, double t, const Vec3d& normal, double refl, int instance) {
  if (!(t > kHitEpsilon)) return;
  if (best && best->distance <= t) return;
  best = SurfaceHit{t, normal, refl, instance};
}

/// Slab test against [lo, hi]; returns entry distance and face normal.
bool slab_hit(const Vec3d& o, const Vec3d& d, const Vec3d& lo, const Vec3d& hi, double& t_hit, Vec3d& normal) {
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  double near_sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-15) {
      if (o[a] < lo[a] || o[a] > hi[a]) return false;
      continue;
    }
    double t0 = (lo[a] - o[a]) / d[a];
    double t1 = (hi[a] - o[a]) / d[a];
    double sign = -1.0;  // entering through the low face
    if (t0 > t1) {
      std::swap(t0, t1);
      sign = 1.0;
    }
    if (t0 > t_near) {
      t_near = t0;
      near_axis = a;
      near_sign = sign;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_far <= kHitEpsilon) return false;
  if (t_near > kHitEpsilon && near_axis >= 0) {
    t_hit = t_near;
    normal = Vec3d::Zero();
    normal[near_axis] = near_sign;
    return true;
  }
  return false;  // origin inside the box: no outward-facing return
}

}  // namespace

Pose MovingBox::pose_at(int frame) const {
  return make_pose(center + velocity * frame, yaw + yaw_rate * frame);
}

void AnalyticScene::validate() const {
  auto check_refl = [](double r) {
    if (!(r >= 0.0 && r <= 1.0)) throw DomainError("reflectance must lie in [0, 1]");
  };
  for (const auto& p : planes) {
    check_refl(p.reflectance);
    if (!(p.normal.norm() > 0.0)) throw DomainError("plane normal must be nonzero");
  }
  for (const auto& r : rectangles) {
    check_refl(r.reflectance);
    if (!(r.half_u > 0.0 && r.half_v > 0.0)) throw DomainError("rectangle extents must be positive");
    if (std::abs(r.normal.normalized().dot(r.axis_u.normalized())) > 1e-9) {
      throw DomainError("rectangle axis_u must be perpendicular to its normal");
    }
  }
  for (const auto& s : spheres) {
    check_refl(s.reflectance);
    if (!(s.radius > 0.0)) throw DomainError("sphere radius must be positive");
  }
  for (const auto& b : boxes) {
    check_refl(b.reflectance);
    if (!((b.max - b.min).array() > 0.0).all()) throw DomainError("box must have positive extent");
  }
  for (const auto& m : movers) {
    check_refl(m.reflectance);
    if (!(m.extents.array() > 0.0).all()) throw DomainError("mover extents must be positive");
  }
  if (!(d0 > 0.0)) throw DomainError("d0 must be positive");
  if (!(drop_rate >= 0.0 && drop_rate <= 1.0)) throw DomainError("drop_rate must lie in [0, 1]");
}

std::optional<SurfaceHit> intersect(const AnalyticScene& scene, const Vec3d& o, const Vec3d& d, int frame) {
  std::optional<SurfaceHit> best;
  for (const auto& p : scene.planes) {
    const Vec3d n = p.normal.normalized();
    const double denom = n.dot(d);
    if (std::abs(denom) < 1e-15) continue;
    consider(best, n.dot(p.point - o) / denom, n, p.reflectance, -1);
  }
  for (const auto& r : scene.rectangles) {
    const Vec3d n = r.normal.normalized();
    const double denom = n.dot(d);
    if (std::abs(denom) < 1e-15) continue;
    const double t = n.dot(r.center - o) / denom;
    if (!(t > kHitEpsilon)) continue;
    const Vec3d u = r.axis_u.normalized();
    const Vec3d v = n.cross(u);
    const Vec3d rel = o + t * d - r.center;
    if (std::abs(rel.dot(u)) > r.half_u || std::abs(rel.dot(v)) > r.half_v) continue;
    consider(best, t, n, r.reflectance, -1);
  }
  for (const auto& s : scene.spheres) {
    const Vec3d oc = o - s.center;
    const double b = oc.dot(d);
    const double c = oc.squaredNorm() - s.radius * s.radius;
    const double disc = b * b - c;
    if (disc < 0.0) continue;
    const double root = std::sqrt(disc);
    // Numerically stable near root.
    double t = (b > 0.0) ? c / (-b - root) : -b - root;
    if (!(t > kHitEpsilon)) t = -b + root;
    if (!(t > kHitEpsilon)) continue;
    consider(best, t, (o + t * d - s.center) / s.radius, s.reflectance, -1);
  }
  for (const auto& bx : scene.boxes) {
    double t;
    Vec3d n;
    if (slab_hit(o, d, bx.min, bx.max, t, n)) consider(best, t, n, bx.reflectance, -1);
  }
  for (const auto& m : scene.movers) {
    const Pose pose = m.pose_at(frame);
    const Mat3d rot = pose.linear();
    const Vec3d ol = rot.transpose() * (o - pose.translation());
    const Vec3d dl = rot.transpose() * d;
    double t;
    Vec3d n;
    if (slab_hit(ol, dl, -0.5 * m.extents, 0.5 * m.extents, t, n)) consider(best, t, rot * n, m.reflectance, m.id);
  }
  return best;
}

double return_intensity(double reflectance, double cos_incidence, double distance, double d0) {
  const double falloff = (d0 / distance) * (d0 / distance);
  return std::clamp(reflectance * std::abs(cos_incidence) * falloff, 0.0, 1.0);
}

RangeImage raycast_frame(const AnalyticScene& scene, const Pose& pose, const SensorSpec& spec, int frame) {
  require_rigid(pose);
  RangeImage img = RangeImage::empty(spec);
  const Vec3d origin = pose.translation();
  const Mat3d rot = pose.linear();
  parallel_for(static_cast<std::size_t>(spec.beams), [&](std::size_t row) {
    const int r = static_cast<int>(row);
    for (int c = 0; c < spec.width; ++c) {
      const Vec3d dir = rot * pixel_center_ray(r, c, spec);
      const auto hit = intersect(scene, origin, dir, frame);
      if (!hit) continue;
      const double dist = hit->distance;
      if (dist < spec.range_min || dist > spec.range_max || dist < scene.near_blind) continue;
      const std::uint64_t pixel = static_cast<std::uint64_t>(r) * spec.width + c;
      if (scene.drop_rate > 0.0 &&
          hash_uniform(scene.seed, static_cast<std::uint64_t>(frame), pixel) < scene.drop_rate) {
        continue;
      }
      img.depth(r, c) = dist;
      img.intensity(r, c) = return_intensity(hit->reflectance, hit->normal.dot(dir), dist, scene.d0);
      img.raydrop(r, c) = 0.0;
      img.accum_alpha(r, c) = 1.0;
      img.valid(r, c) = true;
    }
  });
  return img;
}

std::vector<int> interleaved_validation(int frames, int val_count) {
  std::vector<int> val;
  if (frames < 2 || val_count <= 0) return val;
  val_count = std::min(val_count, frames - 1);
  for (int k = 1; k <= val_count; ++k) {
    const int idx = static_cast<int>(std::lround(static_cast<double>(k) * frames / (val_count + 1)));
    if (val.empty() || val.back() != idx) val.push_back(std::clamp(idx, 0, frames - 1));
  }
  return val;
}

Dataset generate_sequence(const AnalyticScene& scene, const std::vector<Pose>& trajectory, const SensorSpec& spec,
                          int val_count) {
  scene.validate();
  spec.validate();
  if (trajectory.empty()) throw DomainError("trajectory must contain at least one pose");
  Dataset data;
  data.spec = spec;
  data.poses = trajectory;
  for (int f = 0; f < static_cast<int>(trajectory.size()); ++f) {
    data.frames.push_back(raycast_frame(scene, trajectory[f], spec, f));
    for (const auto& m : scene.movers) {
      const Pose p = m.pose_at(f);
      data.tracks.push_back({f, m.id, p.translation(), m.yaw + m.yaw_rate * f, m.extents});
    }
  }
  data.val = interleaved_validation(static_cast<int>(trajectory.size()), val_count);
  for (int f = 0; f < static_cast<int>(trajectory.size()); ++f) {
    if (std::find(data.val.begin(), data.val.end(), f) == data.val.end()) data.train.push_back(f);
  }
  return data;
}

AnalyticScene urban_toy(bool with_mover) {
  AnalyticScene s;
  s.planes.push_back({Vec3d::Zero(), Vec3d::UnitZ(), 0.35});
  s.rectangles.push_back({Vec3d(27.0, 9.0, 3.0), -Vec3d::UnitY(), Vec3d::UnitX(), 45.0, 3.0, 0.6});
  s.rectangles.push_back({Vec3d(27.0, -11.0, 4.0), Vec3d::UnitY(), Vec3d::UnitX(), 45.0, 4.0, 0.5});
  s.spheres.push_back({Vec3d(14.0, 4.5, 1.2), 1.2, 0.85});
  s.spheres.push_back({Vec3d(28.0, -5.5, 1.5), 1.5, 0.7});
  s.spheres.push_back({Vec3d(41.0, 3.5, 1.0), 1.0, 0.25});
  if (with_mover) {
    MovingBox car;
    car.id = 1;
    car.center = Vec3d(60.0, -4.0, 0.75);
    car.extents = Vec3d(4.2, 1.8, 1.5);
    car.velocity = Vec3d(-1.0, 0.0, 0.0);
    car.reflectance = 0.8;
    s.movers.push_back(car);
  }
  s.d0 = 10.0;
  s.near_blind = 1.0;
  s.drop_rate = 0.0;
  return s;
}

SensorSpec urban_toy_spec() {
  SensorSpec spec;
  spec.beams = 32;
  spec.width = 256;
  spec.f_up = 0.26;
  spec.f_down = 0.26;
  spec.range_min = 1.0;
  spec.range_max = 60.0;
  spec.divergence = 0.05;
  return spec;
}

std::vector<Pose> straight_trajectory(int frames, double step, double height, double y) {
  std::vector<Pose> poses;
  for (int i = 0; i < frames; ++i) poses.push_back(make_pose(Vec3d(i * step, y, height), 0.0));
  return poses;
}

// ---------------------------------------------------------------- scene text

namespace {

template <int N>
Eigen::Matrix<double, N, 1> read_vec(std::istringstream& ls, int line) {
  Eigen::Matrix<double, N, 1> v;
  for (int i = 0; i < N; ++i)
    if (!(ls >> v[i])) throw ParseError("expected a number", line);
  return v;
}

double read_num(std::istringstream& ls, int line) {
  double v;
  if (!(ls >> v)) throw ParseError("expected a number", line);
  return v;
}

void expect_end(std::istringstream& ls, int line) {
  std::string extra;
  if (ls >> extra) throw ParseError("unexpected token '" + extra + "'", line);
}

void write_vec(std::ostream& out, const Vec3d& v) { out << ' ' << v.x() << ' ' << v.y() << ' ' << v.z(); }

}  // namespace

AnalyticScene parse_scene(const std::string& text) {
  AnalyticScene s;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind)) continue;
    if (kind == "d0") {
      s.d0 = read_num(ls, line_no);
    } else if (kind == "near_blind") {
      s.near_blind = read_num(ls, line_no);
    } else if (kind == "drop_rate") {
      s.drop_rate = read_num(ls, line_no);
    } else if (kind == "seed") {
      s.seed = static_cast<std::uint64_t>(read_num(ls, line_no));
    } else if (kind == "plane") {
      InfinitePlane p;
      p.point = read_vec<3>(ls, line_no);
      p.normal = read_vec<3>(ls, line_no);
      p.reflectance = read_num(ls, line_no);
      s.planes.push_back(p);
    } else if (kind == "rect") {
      Rectangle r;
      r.center = read_vec<3>(ls, line_no);
      r.normal = read_vec<3>(ls, line_no);
      r.axis_u = read_vec<3>(ls, line_no);
      r.half_u = read_num(ls, line_no);
      r.half_v = read_num(ls, line_no);
      r.reflectance = read_num(ls, line_no);
      s.rectangles.push_back(r);
    } else if (kind == "sphere") {
      Sphere sp;
      sp.center = read_vec<3>(ls, line_no);
      sp.radius = read_num(ls, line_no);
      sp.reflectance = read_num(ls, line_no);
      s.spheres.push_back(sp);
    } else if (kind == "box") {
      AxisBox b;
      b.min = read_vec<3>(ls, line_no);
      b.max = read_vec<3>(ls, line_no);
      b.reflectance = read_num(ls, line_no);
      s.boxes.push_back(b);
    } else if (kind == "mover") {
      MovingBox m;
      m.id = static_cast<int>(read_num(ls, line_no));
      m.center = read_vec<3>(ls, line_no);
      m.extents = read_vec<3>(ls, line_no);
      m.yaw = read_num(ls, line_no);
      m.velocity = read_vec<3>(ls, line_no);
      m.yaw_rate = read_num(ls, line_no);
      m.reflectance = read_num(ls, line_no);
      s.movers.push_back(m);
    } else {
      throw ParseError("unknown scene entry '" + kind + "'", line_no);
    }
    expect_end(ls, line_no);
  }
  try {
    s.validate();
  } catch (const DomainError& e) {
    throw ParseError(e.what());
  }
  return s;
}

AnalyticScene load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scene(ss.str());
}

std::string format_scene(const AnalyticScene& s) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "d0 " << s.d0 << "\nnear_blind " << s.near_blind << "\ndrop_rate " << s.drop_rate << "\nseed " << s.seed
      << '\n';
  for (const auto& p : s.planes) {
    out << "plane";
    write_vec(out, p.point);
    write_vec(out, p.normal);
    out << ' ' << p.reflectance << '\n';
  }
  for (const auto& r : s.rectangles) {
    out << "rect";
    write_vec(out, r.center);
    write_vec(out, r.normal);
    write_vec(out, r.axis_u);
    out << ' ' << r.half_u << ' ' << r.half_v << ' ' << r.reflectance << '\n';
  }
  for (const auto& sp : s.spheres) {
    out << "sphere";
    write_vec(out, sp.center);
    out << ' ' << sp.radius << ' ' << sp.reflectance << '\n';
  }
  for (const auto& b : s.boxes) {
    out << "box";
    write_vec(out, b.min);
    write_vec(out, b.max);
    out << ' ' << b.reflectance << '\n';
  }
  for (const auto& m : s.movers) {
    out << "mover " << m.id;
    write_vec(out, m.center);
    write_vec(out, m.extents);
    out << ' ' << m.yaw;
    write_vec(out, m.velocity);
    out << ' ' << m.yaw_rate << ' ' << m.reflectance << '\n';
  }
  return out.str();
}

SensorSpec parse_sensor_spec(const std::string& text) {
  const KeyValues kv = KeyValues::parse(text);
  SensorSpec spec;
  kv.get("beams", spec.beams);
  kv.get("width", spec.width);
  kv.get("f_up", spec.f_up);
  kv.get("f_down", spec.f_down);
  kv.get("range_min", spec.range_min);
  kv.get("range_max", spec.range_max);
  kv.get("divergence", spec.divergence);
  kv.reject_unused();
  spec.validate();
  return spec;
}

std::string format_sensor_spec(const SensorSpec& spec) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "beams = " << spec.beams << "\nwidth = " << spec.width << "\nf_up = " << spec.f_up
      << "\nf_down = " << spec.f_down << "\nrange_min = " << spec.range_min << "\nrange_max = " << spec.range_max
      << "\ndivergence = " << spec.divergence << '\n';
  return out.str();
}

// ---------------------------------------------------------------- dataset io

void save_poses(const std::vector<Pose>& poses, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "frame,tx,ty,tz,qw,qx,qy,qz\n";
  for (std::size_t i = 0; i < poses.size(); ++i) {
    const Eigen::Quaterniond q(poses[i].linear());
    const Vec3d t = poses[i].translation();
    out << i << ',' << t.x() << ',' << t.y() << ',' << t.z() << ',' << q.w() << ',' << q.x() << ',' << q.y() << ','
        << q.z() << '\n';
  }
}

std::vector<Pose> load_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  int line_no = 1;
  std::vector<Pose> poses;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    double frame, tx, ty, tz, qw, qx, qy, qz;
    if (!(ls >> frame >> tx >> ty >> tz >> qw >> qx >> qy >> qz)) throw ParseError("malformed pose row", line_no);
    Pose p = Pose::Identity();
    p.linear() = Eigen::Quaterniond(qw, qx, qy, qz).normalized().toRotationMatrix();
    p.translation() = Vec3d(tx, ty, tz);
    poses.push_back(p);
  }
  return poses;
}

void save_tracks(const std::vector<TrackRecord>& tracks, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& t : tracks) {
    nlohmann::json j;
    j["frame"] = t.frame;
    j["id"] = t.id;
    j["center"] = {t.center.x(), t.center.y(), t.center.z()};
    j["yaw"] = t.yaw;
    j["extents"] = {t.extents.x(), t.extents.y(), t.extents.z()};
    out << j.dump() << '\n';
  }
}

std::vector<TrackRecord> load_tracks(const std::filesystem::path& path) {
  std::vector<TrackRecord> tracks;
  std::ifstream in(path);
  if (!in) return tracks;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      TrackRecord t;
      t.frame = j.at("frame").get<int>();
      t.id = j.at("id").get<int>();
      const auto c = j.at("center");
      const auto e = j.at("extents");
      t.center = Vec3d(c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>());
      t.yaw = j.at("yaw").get<double>();
      t.extents = Vec3d(e.at(0).get<double>(), e.at(1).get<double>(), e.at(2).get<double>());
      tracks.push_back(t);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(std::string("bad track record: ") + e.what(), line_no);
    }
  }
  return tracks;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  for (std::size_t i = 0; i < data.frames.size(); ++i) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i << ".rv";
    save_rangeimage(data.frames[i], dir / "frames" / name.str());
  }
  save_poses(data.poses, dir / "poses.csv");
  save_tracks(data.tracks, dir / "tracks.jsonl");
  nlohmann::json split;
  split["train"] = data.train;
  split["val"] = data.val;
  std::ofstream(dir / "split.json") << split.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Dataset data;
  data.poses = load_poses(dir / "poses.csv");
  for (std::size_t i = 0; i < data.poses.size(); ++i) {
    std::ostringstream name;
    name << std::setw(4) << std::setfill('0') << i << ".rv";
    const fs::path p = dir / "frames" / name.str();
    if (!fs::exists(p)) throw ParseError("dataset is missing frame " + p.string());
    data.frames.push_back(load_rangeimage(p));
  }
  if (data.frames.empty()) throw ParseError("dataset has no frames: " + dir.string());
  data.spec = data.frames.front().spec;
  for (const auto& f : data.frames) {
    if (!(f.spec == data.spec)) throw ParseError("dataset frames disagree on the sensor spec");
  }
  data.tracks = load_tracks(dir / "tracks.jsonl");
  std::ifstream split_in(dir / "split.json");
  if (split_in) {
    const auto split = nlohmann::json::parse(split_in);
    data.train = split.at("train").get<std::vector<int>>();
    data.val = split.at("val").get<std::vector<int>>();
  } else {
    for (int i = 0; i < static_cast<int>(data.frames.size()); ++i) data.train.push_back(i);
  }
  return data;
}

}  // namespace beamsplat
