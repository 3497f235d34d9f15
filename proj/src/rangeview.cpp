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

#include "beamsplat/rangeview.hpp"

#include "beamsplat/binary_io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

namespace beamsplat {

void SensorSpec::validate() const {
  if (beams <= 0 || width <= 0) throw DomainError("sensor spec needs positive beams and width");
  if (!(f_up >= 0.0) || !(f_down >= 0.0) || !(fov() > 0.0)) throw DomainError("sensor spec needs a positive vertical fov");
  if (!(range_min > 0.0) || !(range_min < range_max)) throw DomainError("sensor spec needs 0 < range_min < range_max");
  if (!(divergence > 0.0)) throw DomainError("sensor spec needs a positive divergence");
}

RangeCoord project_point(const Vec3d& p, const SensorSpec& spec) {
  const double d = p.norm();
  if (!(d > 0.0) || !std::isfinite(d)) throw DomainError("project_point: zero-norm or non-finite point");
  const double elevation = std::asin(std::clamp(p.z() / d, -1.0, 1.0));
  double azimuth = std::atan2(p.y(), p.x());
  if (azimuth <= -kPi) azimuth = kPi;  // keep (-pi, pi]
  RangeCoord c;
  c.h = (1.0 - (elevation + spec.f_down) / spec.fov()) * spec.beams;
  c.w = 0.5 * (1.0 - azimuth / kPi) * spec.width;
  c.d = d;
  return c;
}

Vec3d pixel_ray(double h, double w, const SensorSpec& spec) {
  const double elevation = spec.f_up - spec.fov() * h / spec.beams;
  const double azimuth = kPi - 2.0 * kPi * w / spec.width;
  const double ce = std::cos(elevation);
  return Vec3d(std::cos(azimuth) * ce, std::sin(azimuth) * ce, std::sin(elevation));
}

Mat3X<double> pixel_center_rays(const SensorSpec& spec) {
  Mat3X<double> rays(3, spec.pixels());
  for (int r = 0; r < spec.beams; ++r)
    for (int c = 0; c < spec.width; ++c) rays.col(r * spec.width + c) = pixel_center_ray(r, c, spec);
  return rays;
}

RangeImage RangeImage::empty(const SensorSpec& spec) {
  spec.validate();
  RangeImage img;
  img.spec = spec;
  img.depth = Plane::Zero(spec.beams, spec.width);
  img.intensity = Plane::Zero(spec.beams, spec.width);
  img.raydrop = Plane::Ones(spec.beams, spec.width);
  img.accum_alpha = Plane::Zero(spec.beams, spec.width);
  img.valid = Mask::Constant(spec.beams, spec.width, false);
  return img;
}

void RangeImage::invalidate(int row, int col) {
  depth(row, col) = 0.0;
  intensity(row, col) = 0.0;
  valid(row, col) = false;
}

RangeImage points_to_rangeimage(std::span<const LidarPoint> points, const SensorSpec& spec, BinningStats* stats) {
  RangeImage img = RangeImage::empty(spec);
  BinningStats local;
  for (const auto& pt : points) {
    const double d = pt.position.norm();
    if (!(d >= spec.range_min && d <= spec.range_max)) {
      ++local.out_of_range;
      continue;
    }
    const RangeCoord c = project_point(pt.position, spec);
    const int row = static_cast<int>(std::floor(c.h));
    if (row < 0 || row >= spec.beams) {
      ++local.out_of_fov;
      continue;
    }
    int col = static_cast<int>(std::floor(c.w));
    col = ((col % spec.width) + spec.width) % spec.width;
    ++local.accepted;
    // Nearest return wins; ties keep the brighter return so input order never matters.
    if (img.valid(row, col) && (img.depth(row, col) < d ||
                                (img.depth(row, col) == d && img.intensity(row, col) >= pt.intensity))) {
      continue;
    }
    img.depth(row, col) = d;
    img.intensity(row, col) = pt.intensity;
    img.raydrop(row, col) = 0.0;
    img.accum_alpha(row, col) = 1.0;
    img.valid(row, col) = true;
  }
  if (stats) *stats = local;
  return img;
}

std::vector<LidarPoint> rangeimage_to_points(const RangeImage& img, const Pose& sensor_to_world) {
  require_rigid(sensor_to_world);
  std::vector<LidarPoint> out;
  out.reserve(img.valid_count());
  for (int r = 0; r < img.rows(); ++r) {
    for (int c = 0; c < img.cols(); ++c) {
      if (!img.valid(r, c)) continue;
      const Vec3d local = img.depth(r, c) * pixel_center_ray(r, c, img.spec);
      out.push_back({sensor_to_world * local, img.intensity(r, c)});
    }
  }
  return out;
}

namespace {

constexpr std::array<char, 4> kRvMagic{'B', 'S', 'R', 'V'};
constexpr std::uint32_t kRvVersion = 1;
constexpr std::array<const char*, 5> kChannels{"depth", "intensity", "raydrop", "accum_alpha", "valid"};

}  // namespace

void save_rangeimage(const RangeImage& img, const std::filesystem::path& path) {
  BinaryWriter out(path);
  out.bytes(kRvMagic.data(), kRvMagic.size());
  out.u32(kRvVersion);
  out.u32(static_cast<std::uint32_t>(img.spec.beams));
  out.u32(static_cast<std::uint32_t>(img.spec.width));
  out.f64(img.spec.f_up);
  out.f64(img.spec.f_down);
  out.f64(img.spec.range_min);
  out.f64(img.spec.range_max);
  out.f64(img.spec.divergence);
  out.u32(static_cast<std::uint32_t>(kChannels.size()));
  for (const char* name : kChannels) out.fixed_string(name, 16);
  auto plane = [&](const auto& p) {
    for (int r = 0; r < img.rows(); ++r)
      for (int c = 0; c < img.cols(); ++c) out.f32(static_cast<float>(p(r, c)));
  };
  plane(img.depth);
  plane(img.intensity);
  plane(img.raydrop);
  plane(img.accum_alpha);
  plane(img.valid.cast<double>());
}

RangeImage load_rangeimage(const std::filesystem::path& path) {
  BinaryReader in(path);
  std::array<char, 4> magic{};
  in.bytes(magic.data(), magic.size());
  if (magic != kRvMagic) throw ParseError("not a range image file: " + path.string());
  if (in.u32() != kRvVersion) throw ParseError("unsupported range image version: " + path.string());
  SensorSpec spec;
  spec.beams = static_cast<int>(in.u32());
  spec.width = static_cast<int>(in.u32());
  spec.f_up = in.f64();
  spec.f_down = in.f64();
  spec.range_min = in.f64();
  spec.range_max = in.f64();
  spec.divergence = in.f64();
  spec.validate();
  RangeImage img = RangeImage::empty(spec);
  const std::uint32_t channels = in.u32();
  std::vector<std::string> names;
  for (std::uint32_t i = 0; i < channels; ++i) names.push_back(in.fixed_string(16));
  for (const auto& name : names) {
    Plane p(spec.beams, spec.width);
    for (int r = 0; r < spec.beams; ++r)
      for (int c = 0; c < spec.width; ++c) p(r, c) = in.f32();
    if (name == "depth") img.depth = p;
    else if (name == "intensity") img.intensity = p;
    else if (name == "raydrop") img.raydrop = p;
    else if (name == "accum_alpha") img.accum_alpha = p;
    else if (name == "valid") img.valid = p > 0.5;
  }
  return img;
}

void save_ply(std::span<const LidarPoint> points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty double x\nproperty double y\nproperty double z\nproperty double intensity\nend_header\n";
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const auto& p : points) {
    out << p.position.x() << ' ' << p.position.y() << ' ' << p.position.z() << ' ' << p.intensity << '\n';
  }
}

std::vector<LidarPoint> load_ply(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  int line_no = 0;
  std::size_t count = 0;
  std::vector<std::string> props;
  bool header_done = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line_no == 1 && line != "ply") throw ParseError("missing ply magic", line_no);
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      std::string fmt;
      ls >> fmt;
      if (fmt != "ascii") throw ParseError("only ascii ply is supported", line_no);
    } else if (key == "element") {
      std::string what;
      ls >> what >> count;
    } else if (key == "property") {
      std::string type, name;
      ls >> type >> name;
      props.push_back(name);
    } else if (key == "end_header") {
      header_done = true;
      break;
    }
  }
  if (!header_done) throw ParseError("unterminated ply header", line_no);
  auto index_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < props.size(); ++i)
      if (props[i] == name) return static_cast<int>(i);
    return -1;
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z"), ii = index_of("intensity");
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("ply lacks x/y/z properties", line_no);
  std::vector<LidarPoint> points;
  points.reserve(count);
  std::vector<double> values(props.size());
  for (std::size_t n = 0; n < count; ++n) {
    if (!std::getline(in, line)) throw ParseError("ply truncated", line_no);
    ++line_no;
    std::istringstream ls(line);
    for (auto& v : values) {
      if (!(ls >> v)) throw ParseError("malformed ply vertex", line_no);
    }
    LidarPoint p;
    p.position = Vec3d(values[ix], values[iy], values[iz]);
    p.intensity = ii >= 0 ? values[ii] : 0.0;
    points.push_back(p);
  }
  return points;
}

}  // namespace beamsplat
