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

#include "beamsplat/metrics.hpp"

#include "beamsplat/parallel.hpp"
#include "beamsplat/spatial_index.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace beamsplat {

namespace {

std::vector<double> nearest_distances(std::span<const Vec3d> queries, std::span<const Vec3d> targets) {
  const VoxelGrid grid(std::vector<Vec3d>(targets.begin(), targets.end()));
  std::vector<double> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) { out[i] = grid.nearest(queries[i]).distance; });
  return out;
}

void require_nonempty(std::span<const Vec3d> a, std::span<const Vec3d> b) {
  if (a.empty() || b.empty()) throw DomainError("point metrics need two nonempty sets");
}

}  // namespace

double chamfer(std::span<const Vec3d> a, std::span<const Vec3d> b, ChamferVariant variant) {
  require_nonempty(a, b);
  auto mean_of = [&](const std::vector<double>& dist) {
    double sum = 0.0;
    for (double d : dist) sum += variant == ChamferVariant::kSquared ? d * d : d;
    return sum / static_cast<double>(dist.size());
  };
  return 0.5 * mean_of(nearest_distances(a, b)) + 0.5 * mean_of(nearest_distances(b, a));
}

FScore fscore(std::span<const Vec3d> a, std::span<const Vec3d> b, double tau) {
  require_nonempty(a, b);
  auto fraction_within = [&](const std::vector<double>& dist) {
    std::size_t hits = 0;
    for (double d : dist) hits += d <= tau ? 1 : 0;
    return static_cast<double>(hits) / static_cast<double>(dist.size());
  };
  FScore f;
  f.threshold = tau;
  f.precision = fraction_within(nearest_distances(a, b));
  f.recall = fraction_within(nearest_distances(b, a));
  const double denom = f.precision + f.recall;
  f.fscore = denom > 0.0 ? 2.0 * f.precision * f.recall / denom : 0.0;
  return f;
}

// ---------------------------------------------------------------------- SSIM

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> w{};
  double sum = 0.0;
  const int half = kSsimWindow / 2;
  for (int i = 0; i < kSsimWindow; ++i) {
    w[i] = std::exp(-static_cast<double>((i - half) * (i - half)) / (2.0 * kSsimSigma * kSsimSigma));
    sum += w[i];
  }
  for (auto& v : w) v /= sum;
  return w;
}

/// Separable zero-padded "same" filtering with the SSIM window. The window is
/// symmetric, so this operator is its own adjoint.
Plane blur(const Plane& in) {
  static const auto w = gaussian_window();
  const int half = kSsimWindow / 2;
  const Eigen::Index rows = in.rows(), cols = in.cols();
  Plane tmp = Plane::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) {
        const Eigen::Index cc = c + k;
        if (cc >= 0 && cc < cols) acc += w[k + half] * in(r, cc);
      }
      tmp(r, c) = acc;
    }
  Plane out = Plane::Zero(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -half; k <= half; ++k) {
        const Eigen::Index rr = r + k;
        if (rr >= 0 && rr < rows) acc += w[k + half] * tmp(rr, c);
      }
      out(r, c) = acc;
    }
  return out;
}

}  // namespace

double ssim_with_grad(const Plane& x, const Plane& y, Plane& grad_x) {
  if (x.rows() != y.rows() || x.cols() != y.cols()) throw DomainError("ssim: shape mismatch");
  const Plane mx = blur(x), my = blur(y);
  const Plane exx = blur(x * x), eyy = blur(y * y), exy = blur(x * y);
  const Plane vx = exx - mx * mx, vy = eyy - my * my, cxy = exy - mx * my;
  const Plane n1 = 2.0 * mx * my + kC1, n2 = 2.0 * cxy + kC2;
  const Plane d1 = mx * mx + my * my + kC1, d2 = vx + vy + kC2;
  const Plane s = (n1 * n2) / (d1 * d2);
  const double n = static_cast<double>(x.size());
  // Partials of each local SSIM w.r.t. the local moments E[x], E[x^2], E[xy].
  const Plane d_mx = s * (2.0 * my / n1 - 2.0 * my / n2 - 2.0 * mx / d1 + 2.0 * mx / d2);
  const Plane d_exx = -s / d2;
  const Plane d_exy = s * 2.0 / n2;
  grad_x = (blur(d_mx) + 2.0 * x * blur(d_exx) + y * blur(d_exy)) / n;
  return s.mean();
}

double ssim(const Plane& x, const Plane& y) {
  Plane unused;
  return ssim_with_grad(x, y, unused);
}

double psnr_from_mse(double mse) {
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

double median(std::vector<double> values) {
  if (values.empty()) throw DomainError("median of an empty set");
  const std::size_t mid = values.size() / 2;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid), values.end());
  const double hi = values[mid];
  if (values.size() % 2 == 1) return hi;
  const double lo = *std::max_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(mid));
  return 0.5 * (lo + hi);
}

EvalReport image_metrics(const RangeImage& pred, const RangeImage& gt, double fscore_tau, ChamferVariant variant) {
  if (!(pred.spec == gt.spec)) throw DomainError("image_metrics: sensor specs differ");
  if (gt.valid_count() == 0) throw DomainError("image_metrics: ground truth has no valid pixels");
  EvalReport r;
  r.fscore_threshold = fscore_tau;

  std::vector<double> abs_err;
  abs_err.reserve(gt.valid_count());
  double sq = 0.0;
  for (int row = 0; row < gt.rows(); ++row)
    for (int col = 0; col < gt.cols(); ++col) {
      if (!gt.valid(row, col)) continue;
      const double p = pred.valid(row, col) ? pred.depth(row, col) : 0.0;
      const double e = p - gt.depth(row, col);
      abs_err.push_back(std::abs(e));
      sq += e * e;
    }
  double sum_abs = 0.0;
  for (double e : abs_err) sum_abs += e;
  r.depth_mae = sum_abs / static_cast<double>(abs_err.size());
  r.depth_rmse = std::sqrt(sq / static_cast<double>(abs_err.size()));
  r.depth_medae = median(abs_err);

  const Plane pi = pred.valid.select(pred.intensity, 0.0);
  const Plane gi = gt.valid.select(gt.intensity, 0.0);
  const Plane diff = pi - gi;
  r.int_mae = diff.abs().mean();
  const double mse = diff.square().mean();
  r.int_rmse = std::sqrt(mse);
  r.psnr = psnr_from_mse(mse);
  r.ssim = ssim(pi, gi);

  auto positions = [](const RangeImage& img) {
    std::vector<Vec3d> pts;
    for (const auto& p : rangeimage_to_points(img, Pose::Identity())) pts.push_back(p.position);
    return pts;
  };
  const auto pp = positions(pred), gp = positions(gt);
  if (pp.empty()) {
    r.cd = std::numeric_limits<double>::infinity();
    r.fscore = 0.0;
  } else {
    r.cd = chamfer(pp, gp, variant);
    r.fscore = fscore(pp, gp, fscore_tau).fscore;
  }
  return r;
}

EvalReport mean_report(std::span<const EvalReport> reports) {
  EvalReport m;
  if (reports.empty()) return m;
  m.fscore_threshold = reports.front().fscore_threshold;
  m.cd = m.fscore = m.depth_rmse = m.depth_mae = m.depth_medae = 0.0;
  m.int_mae = m.int_rmse = m.psnr = m.ssim = 0.0;
  for (const auto& r : reports) {
    m.cd += r.cd;
    m.fscore += r.fscore;
    m.depth_rmse += r.depth_rmse;
    m.depth_mae += r.depth_mae;
    m.depth_medae += r.depth_medae;
    m.int_mae += r.int_mae;
    m.int_rmse += r.int_rmse;
    m.psnr += std::min(r.psnr, 99.0);
    m.ssim += r.ssim;
  }
  const double n = static_cast<double>(reports.size());
  m.cd /= n;
  m.fscore /= n;
  m.depth_rmse /= n;
  m.depth_mae /= n;
  m.depth_medae /= n;
  m.int_mae /= n;
  m.int_rmse /= n;
  m.psnr /= n;
  m.ssim /= n;
  return m;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["cd"] = r.cd;
  j["fscore"] = r.fscore;
  j["fscore_threshold"] = r.fscore_threshold;
  j["depth_rmse"] = r.depth_rmse;
  j["depth_mae"] = r.depth_mae;
  j["depth_medae"] = r.depth_medae;
  j["int_mae"] = r.int_mae;
  j["int_rmse"] = r.int_rmse;
  j["psnr"] = std::min(r.psnr, 99.0);
  j["ssim"] = r.ssim;
  return j.dump(2);
}

std::string report_table_header() {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-10s | %8s %8s %8s %8s | %8s %8s %8s %8s", "frame", "CD", "F-score", "RMSE",
                "MAE", "MAE", "RMSE", "PSNR", "SSIM");
  return buf;
}

std::string report_table_row(const std::string& label, const EvalReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%-10s | %8.4f %8.4f %8.4f %8.4f | %8.4f %8.4f %8.3f %8.4f", label.c_str(), r.cd,
                r.fscore, r.depth_rmse, r.depth_mae, r.int_mae, r.int_rmse, std::min(r.psnr, 99.0), r.ssim);
  return buf;
}

}  // namespace beamsplat
