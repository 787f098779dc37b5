#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "mtsplat/image.hpp"
#include "mtsplat/losses.hpp"

namespace mtsplat {

inline constexpr double kPsnrCap = 100.0;  // reported for exact matches

// 10*log10(1/MSE) over masked pixels, capped at 100 dB for exact matches.
// Returns nullopt when the mask leaves no pixels.
template <class T>
std::optional<double> psnr(const Image<T>& render, const Image<T>& gt,
                           const Image<std::uint8_t>* mask) {
  MTS_REQUIRE(render.same_shape(gt), "psnr: image shapes differ");
  double mse = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < render.height; ++y)
    for (int x = 0; x < render.width; ++x) {
      if (mask && mask->at(x, y) == 0) continue;
      ++n;
      for (int c = 0; c < render.channels; ++c) {
        double d = static_cast<double>(render.at(x, y, c)) - gt.at(x, y, c);
        mse += d * d;
      }
    }
  if (n == 0) return std::nullopt;
  mse /= static_cast<double>(n) * render.channels;
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

// Fits per-channel scale/offset minimizing the masked squared error, then
// reports the PSNR of the fitted image. A constant render channel falls back
// to an offset-only fit, so the identity is always in the search space and
// psnr_affine >= psnr.
template <class T>
std::optional<double> psnr_affine(const Image<T>& render, const Image<T>& gt,
                                  const Image<std::uint8_t>* mask) {
  MTS_REQUIRE(render.same_shape(gt), "psnr_affine: image shapes differ");
  std::size_t n = 0;
  for (int y = 0; y < render.height; ++y)
    for (int x = 0; x < render.width; ++x)
      if (!mask || mask->at(x, y) != 0) ++n;
  if (n == 0) return std::nullopt;

  Image<T> fitted = render;
  for (int c = 0; c < render.channels; ++c) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (int y = 0; y < render.height; ++y)
      for (int x = 0; x < render.width; ++x) {
        if (mask && mask->at(x, y) == 0) continue;
        double r = render.at(x, y, c), g = gt.at(x, y, c);
        sx += r;
        sy += g;
        sxx += r * r;
        sxy += r * g;
      }
    double det = static_cast<double>(n) * sxx - sx * sx;
    double a, b;
    if (std::abs(det) < 1e-12) {
      a = 1.0;  // constant channel: offset-only
      b = (sy - sx) / static_cast<double>(n);
    } else {
      a = (static_cast<double>(n) * sxy - sx * sy) / det;
      b = (sy - a * sx) / static_cast<double>(n);
    }
    for (int y = 0; y < render.height; ++y)
      for (int x = 0; x < render.width; ++x)
        fitted.at(x, y, c) = static_cast<T>(a * render.at(x, y, c) + b);
  }
  return psnr(fitted, gt, mask);
}

// Masked mean of the per-pixel SSIM map (same kernel as the loss module).
template <class T>
std::optional<double> ssim_metric(const Image<T>& render, const Image<T>& gt,
                                  const Image<std::uint8_t>* mask) {
  std::size_t count = 0;
  T value = ssim_mean(render, gt, mask, &count);
  if (count == 0) return std::nullopt;
  return static_cast<double>(value);
}

struct DepthMetrics {
  double absrel = 0.0;
  double delta1 = 0.0;
  std::size_t samples_used = 0;
};

// AbsRel and delta(1.25) at masked-in LiDAR-hit pixels within range_cap meters.
template <class T>
std::optional<DepthMetrics> depth_metrics(const Image<T>& pred_depth,
                                          const std::vector<DepthSample<T>>& gt_samples,
                                          const Image<std::uint8_t>* mask,
                                          double range_cap = 80.0) {
  DepthMetrics out;
  double absrel = 0.0;
  std::size_t hits = 0;
  for (const auto& s : gt_samples) {
    if (s.depth <= T(0) || static_cast<double>(s.depth) > range_cap) continue;
    if (mask && mask->at(s.x, s.y) == 0) continue;
    double pred = pred_depth.at(s.x, s.y);
    double gt = s.depth;
    absrel += std::abs(pred - gt) / gt;
    double ratio = pred > 0.0 ? std::max(pred / gt, gt / pred)
                              : std::numeric_limits<double>::infinity();
    if (ratio < 1.25) out.delta1 += 1.0;
    ++hits;
  }
  if (hits == 0) return std::nullopt;
  out.absrel = absrel / static_cast<double>(hits);
  out.delta1 /= static_cast<double>(hits);
  out.samples_used = hits;
  return out;
}

// Per-frame metric row of an evaluation report; aggregates are equal-weight
// means over frames with valid values. LPIPS and feature-similarity are out of
// scope and stay absent in the report schema.
struct FrameMetrics {
  int traversal_id = 0;
  int frame_id = 0;
  std::optional<double> psnr;
  std::optional<double> psnr_affine;
  std::optional<double> ssim;
  std::optional<double> absrel;
  std::optional<double> delta1;
  std::size_t pixels_used = 0;
  std::size_t depth_samples = 0;
  bool mask_missing = false;
};

struct EvalReport {
  std::vector<FrameMetrics> frames;
  std::optional<double> mean_psnr;
  std::optional<double> mean_psnr_affine;
  std::optional<double> mean_ssim;
  std::optional<double> mean_absrel;
  std::optional<double> mean_delta1;

  void aggregate() {
    auto mean_of = [this](std::optional<double> FrameMetrics::*field) -> std::optional<double> {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& f : frames)
        if (f.*field) {
          sum += *(f.*field);
          ++n;
        }
      if (n == 0) return std::nullopt;
      return sum / static_cast<double>(n);
    };
    mean_psnr = mean_of(&FrameMetrics::psnr);
    mean_psnr_affine = mean_of(&FrameMetrics::psnr_affine);
    mean_ssim = mean_of(&FrameMetrics::ssim);
    mean_absrel = mean_of(&FrameMetrics::absrel);
    mean_delta1 = mean_of(&FrameMetrics::delta1);
  }
};

}  // namespace mtsplat
