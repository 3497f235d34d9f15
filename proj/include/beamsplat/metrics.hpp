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
#include "beamsplat/rangeview.hpp"

#include <span>
#include <string>
#include <vector>

namespace beamsplat {

enum class ChamferVariant { kUnsquared, kSquared };

/// 0.5 * mean_a min_b |a-b| + 0.5 * mean_b min_a |a-b| (squared distances in
/// the squared variant).
double chamfer(std::span<const Vec3d> a, std::span<const Vec3d> b,
               ChamferVariant variant = ChamferVariant::kUnsquared);

struct FScore {
  double precision = 0.0;
  double recall = 0.0;
  double fscore = 0.0;
  double threshold = 0.05;
};

/// Precision: fraction of a within tau of b; recall: fraction of b within tau of a.
FScore fscore(std::span<const Vec3d> a, std::span<const Vec3d> b, double tau = 0.05);

// SSIM with an 11x11 Gaussian window (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2,
// zero padding and the mean taken over every pixel.
constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;

double ssim(const Plane& x, const Plane& y);
/// SSIM and d(SSIM)/dx.
double ssim_with_grad(const Plane& x, const Plane& y, Plane& grad_x);

/// Peak 1.0; +inf when mse == 0.
double psnr_from_mse(double mse);

struct EvalReport {
  double cd = 0.0;
  double fscore = 0.0;
  double fscore_threshold = 0.05;
  double depth_rmse = 0.0;
  double depth_mae = 0.0;
  double depth_medae = 0.0;
  double int_mae = 0.0;
  double int_rmse = 0.0;
  double psnr = 0.0;
  double ssim = 0.0;
};

/// Depth errors over pixels valid in gt (invalid predictions count as depth 0);
/// intensity over all pixels; points via pixel-center back-projection.
EvalReport image_metrics(const RangeImage& pred, const RangeImage& gt, double fscore_tau = 0.05,
                         ChamferVariant variant = ChamferVariant::kUnsquared);

/// Exact 50th percentile (mean of the two middle values for even counts).
double median(std::vector<double> values);

EvalReport mean_report(std::span<const EvalReport> reports);

/// JSON object; psnr is capped at 99 dB.
std::string report_json(const EvalReport& r);
std::string report_table_header();
std::string report_table_row(const std::string& label, const EvalReport& r);

}  // namespace beamsplat
