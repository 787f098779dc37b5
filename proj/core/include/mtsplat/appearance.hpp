#pragma once

#include <Eigen/Dense>
#include <map>
#include <vector>

#include "mtsplat/camera.hpp"
#include "mtsplat/image.hpp"
#include "mtsplat/losses.hpp"

namespace mtsplat {

template <class T>
struct ProjectedPoint {
  int px = 0, py = 0;      // integer pixel
  T u = T(0), v = T(0);    // continuous pixel coordinates
  T depth = T(0);          // camera-space z
  Vec3<T> color = Vec3<T>::Zero();
};

// Projects a colored world-space point cloud into a camera: in-image,
// in-front-of-camera points only, nearest depth kept per pixel. Feeds both
// exposure alignment and the sparse depth ground truth.
template <class T>
std::vector<ProjectedPoint<T>> project_points(const std::vector<Vec3<T>>& points,
                                              const std::vector<Vec3<T>>& colors,
                                              const CameraFrame<T>& camera,
                                              bool apply_pose_delta = false) {
  MTS_CHECK(points.size() == colors.size(), "project_points: point/color count mismatch");
  const auto pose = camera.effective_pose(apply_pose_delta);
  const auto& K = camera.intrinsics;
  std::map<std::pair<int, int>, std::size_t> zbuffer;
  std::vector<ProjectedPoint<T>> out;
  for (std::size_t i = 0; i < points.size(); ++i) {
    Vec3<T> pc = pose.rot * points[i] + pose.trans;
    if (pc[2] <= T(0)) continue;
    T u = K.fx * pc[0] / pc[2] + K.cx;
    T v = K.fy * pc[1] / pc[2] + K.cy;
    int px = static_cast<int>(std::floor(u));
    int py = static_cast<int>(std::floor(v));
    if (px < 0 || px >= camera.width || py < 0 || py >= camera.height) continue;
    ProjectedPoint<T> p{px, py, u, v, pc[2], colors[i]};
    auto [it, inserted] = zbuffer.try_emplace({px, py}, out.size());
    if (inserted) {
      out.push_back(p);
    } else if (p.depth < out[it->second].depth) {
      out[it->second] = p;  // nearer point wins the pixel
    }
  }
  return out;
}

template <class T>
struct ExposureSolution {
  Mat3<T> gain = Mat3<T>::Identity();
  Vec3<T> bias = Vec3<T>::Zero();
  int inlier_count = 0;
  T residual_rms = T(0);
  bool identity_fallback = false;  // too few points or degenerate system
};

namespace detail {

// Least squares of gain*pixel + bias = point color; one 4-unknown system per
// output channel. Returns false when the normal equations are rank-deficient.
template <class T>
bool fit_affine_color(const std::vector<Vec3<T>>& pixel, const std::vector<Vec3<T>>& target,
                      const std::vector<std::uint8_t>& use, Mat3<T>* gain, Vec3<T>* bias) {
  Eigen::Matrix<T, 4, 4> ata = Eigen::Matrix<T, 4, 4>::Zero();
  Eigen::Matrix<T, 4, 3> atb = Eigen::Matrix<T, 4, 3>::Zero();
  for (std::size_t i = 0; i < pixel.size(); ++i) {
    if (!use[i]) continue;
    Eigen::Matrix<T, 4, 1> row(pixel[i][0], pixel[i][1], pixel[i][2], T(1));
    ata += row * row.transpose();
    for (int c = 0; c < 3; ++c) atb.col(c) += row * target[i][c];
  }
  Eigen::FullPivLU<Eigen::Matrix<T, 4, 4>> lu(ata);
  if (lu.rank() < 4) return false;
  for (int c = 0; c < 3; ++c) {
    Eigen::Matrix<T, 4, 1> sol = lu.solve(atb.col(c));
    gain->row(c) = sol.template head<3>().transpose();
    (*bias)[c] = sol[3];
  }
  return true;
}

// Diagonal fallback: independent scale + offset per channel.
template <class T>
bool fit_diagonal_color(const std::vector<Vec3<T>>& pixel, const std::vector<Vec3<T>>& target,
                        const std::vector<std::uint8_t>& use, Mat3<T>* gain, Vec3<T>* bias) {
  *gain = Mat3<T>::Identity();
  bias->setZero();
  for (int c = 0; c < 3; ++c) {
    T sx = T(0), sy = T(0), sxx = T(0), sxy = T(0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pixel.size(); ++i) {
      if (!use[i]) continue;
      ++n;
      sx += pixel[i][c];
      sy += target[i][c];
      sxx += pixel[i][c] * pixel[i][c];
      sxy += pixel[i][c] * target[i][c];
    }
    if (n < 2) return false;
    T det = T(n) * sxx - sx * sx;
    if (std::abs(det) < T(1e-12)) return false;
    T a = (T(n) * sxy - sx * sy) / det;
    T b = (sy - a * sx) / T(n);
    (*gain)(c, c) = a;
    (*bias)[c] = b;
  }
  return true;
}

}  // namespace detail

// LiDAR-guided exposure alignment for one image: fits gain/bias so that
// bilinearly sampled pixel colors at the projected LiDAR points match the
// point colors, with two rounds of 2-sigma residual rejection. Images with
// fewer than 30 usable points keep identity and are flagged.
template <class T>
ExposureSolution<T> exposure_align(const Image<T>& image,
                                   const std::vector<ProjectedPoint<T>>& points) {
  constexpr std::size_t kMinPoints = 30;
  ExposureSolution<T> sol;
  std::vector<Vec3<T>> pixel, target;
  pixel.reserve(points.size());
  target.reserve(points.size());
  for (const auto& p : points) {
    Vec3<T> c(bilinear_sample(image, p.u, p.v, 0), bilinear_sample(image, p.u, p.v, 1),
              bilinear_sample(image, p.u, p.v, 2));
    pixel.push_back(c);
    target.push_back(p.color);
  }
  if (pixel.size() < kMinPoints) {
    sol.identity_fallback = true;
    return sol;
  }
  std::vector<std::uint8_t> use(pixel.size(), 1);
  Mat3<T> gain = Mat3<T>::Identity();
  Vec3<T> bias = Vec3<T>::Zero();
  for (int round = 0; round < 3; ++round) {  // fit + 2 rejection refits
    bool ok = detail::fit_affine_color(pixel, target, use, &gain, &bias);
    if (!ok) ok = detail::fit_diagonal_color(pixel, target, use, &gain, &bias);
    if (!ok) {
      sol.identity_fallback = true;
      return sol;
    }
    std::vector<T> residuals(pixel.size(), T(0));
    T sum_sq = T(0);
    std::size_t n = 0;
    for (std::size_t i = 0; i < pixel.size(); ++i) {
      if (!use[i]) continue;
      residuals[i] = (gain * pixel[i] + bias - target[i]).norm();
      sum_sq += residuals[i] * residuals[i];
      ++n;
    }
    T rms = std::sqrt(sum_sq / T(n));
    sol.gain = gain;
    sol.bias = bias;
    sol.inlier_count = static_cast<int>(n);
    sol.residual_rms = rms;
    if (round == 2) break;
    std::size_t kept = 0;
    std::vector<std::uint8_t> next = use;
    for (std::size_t i = 0; i < pixel.size(); ++i) {
      if (!use[i]) continue;
      if (residuals[i] > T(2) * rms)
        next[i] = 0;
      else
        ++kept;
    }
    if (kept < kMinPoints) break;  // keep the current fit rather than starve
    use = next;
  }
  return sol;
}

template <class T>
Image<T> exposure_apply(const Image<T>& image, const ExposureSolution<T>& sol) {
  Image<T> out = image;
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) {
      Vec3<T> c(image.at(x, y, 0), image.at(x, y, 1), image.at(x, y, 2));
      Vec3<T> e = sol.gain * c + sol.bias;
      for (int ch = 0; ch < 3; ++ch)
        out.at(x, y, ch) = std::min(T(1), std::max(T(0), e[ch]));
    }
  return out;
}

// Learnable per-image affine color transform, applied to the rendered image
// before the photometric loss. Identity at novel-view evaluation.
template <class T>
Image<T> camera_affine_apply(const Image<T>& rendered, const CameraFrame<T>& frame) {
  MTS_CHECK(rendered.channels == 3, "camera_affine_apply expects RGB");
  Image<T> out = rendered;
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      Vec3<T> c(rendered.at(x, y, 0), rendered.at(x, y, 1), rendered.at(x, y, 2));
      Vec3<T> a = frame.affine_w * c + frame.affine_b;
      for (int ch = 0; ch < 3; ++ch) out.at(x, y, ch) = a[ch];
    }
  return out;
}

// Backward of the affine: turns dL/d(adjusted) into dL/d(rendered) and
// accumulates the affine parameter gradients on the frame.
template <class T>
void camera_affine_backward(const Image<T>& rendered, const Image<T>& g_adjusted,
                            CameraFrame<T>* frame, Image<T>* g_rendered) {
  for (int y = 0; y < rendered.height; ++y)
    for (int x = 0; x < rendered.width; ++x) {
      Vec3<T> c(rendered.at(x, y, 0), rendered.at(x, y, 1), rendered.at(x, y, 2));
      Vec3<T> g(g_adjusted.at(x, y, 0), g_adjusted.at(x, y, 1), g_adjusted.at(x, y, 2));
      frame->affine_w_grad += g * c.transpose();
      frame->affine_b_grad += g;
      Vec3<T> gc = frame->affine_w.transpose() * g;
      for (int ch = 0; ch < 3; ++ch) g_rendered->at(x, y, ch) += gc[ch];
    }
}

}  // namespace mtsplat
