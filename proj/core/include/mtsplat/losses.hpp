#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mtsplat/camera.hpp"
#include "mtsplat/image.hpp"
#include "mtsplat/scene_graph.hpp"

namespace mtsplat {

struct LossWeights {
  double lambda_r = 0.8;
  double lambda_depth = 0.5;
  double lambda_ncc = 0.1;
  double lambda_normal = 0.1;
  double lambda_flatten = 1.0;
  double lambda_oob = 1.0;
};

struct NCCConfig {
  int patch_size = 32;
  int stride = 16;
  double sigma_eps = 1e-6;
  double max_invalid_fraction = 0.2;
};

struct FlattenConfig {
  double ratio_cap = 10.0;
  int period = 10;
};

// Per-step loss values, pre-weighting.
template <class T>
struct LossBreakdown {
  T l1 = T(0);
  T ssim = T(0);  // stored as (1 - SSIM)
  T depth = T(0);
  T ncc = T(0);
  T normal = T(0);
  T flatten = T(0);
  T oob = T(0);
  bool photometric_empty = false;
  bool ncc_empty = false;

  T total(const LossWeights& w) const {
    struct Term {
      const char* name;
      T value;
    } terms[] = {{"l1", l1},         {"ssim", ssim},       {"depth", depth},
                 {"ncc", ncc},       {"normal", normal},   {"flatten", flatten},
                 {"oob", oob}};
    for (const auto& t : terms)
      MTS_CHECK(std::isfinite(static_cast<double>(t.value)),
                "non-finite loss term: " << t.name);
    return T(w.lambda_r) * l1 + T(1 - w.lambda_r) * ssim + T(w.lambda_depth) * depth +
           T(w.lambda_ncc) * ncc + T(w.lambda_normal) * normal +
           T(w.lambda_flatten) * flatten + T(w.lambda_oob) * oob;
  }
};

template <class T>
struct DepthSample {
  int x = 0, y = 0;
  T depth = T(0);
};

namespace detail {

// 11x11 Gaussian window, sigma 1.5, separable.
template <class T>
const std::vector<T>& ssim_kernel() {
  static const std::vector<T> k = [] {
    std::vector<T> v(11);
    T sum = T(0);
    for (int i = 0; i < 11; ++i) {
      T x = T(i - 5);
      v[i] = std::exp(-x * x / (T(2) * T(1.5) * T(1.5)));
      sum += v[i];
    }
    for (auto& e : v) e /= sum;
    return v;
  }();
  return k;
}

// Same-size separable correlation with zero padding, one channel.
template <class T>
void conv_gauss11(const Image<T>& in, int channel, Image<T>* out, int out_channel) {
  const auto& k = ssim_kernel<T>();
  const int w = in.width, h = in.height;
  Image<T> tmp(w, h, 1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int i = -5; i <= 5; ++i) {
        int xx = x + i;
        if (xx < 0 || xx >= w) continue;
        acc += k[i + 5] * in.at(xx, y, channel);
      }
      tmp.at(x, y) = acc;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      T acc = T(0);
      for (int i = -5; i <= 5; ++i) {
        int yy = y + i;
        if (yy < 0 || yy >= h) continue;
        acc += k[i + 5] * tmp.at(x, yy);
      }
      out->at(x, y, out_channel) = acc;
    }
}

// A pixel is SSIM-valid when its full 11x11 window lies inside the image and,
// with a mask, entirely on mask-in pixels.
inline Image<std::uint8_t> ssim_valid_map(int w, int h, const Image<std::uint8_t>* mask) {
  Image<std::uint8_t> valid(w, h, 1, 0);
  std::vector<std::int64_t> integral;
  if (mask) {
    integral.assign(static_cast<std::size_t>(w + 1) * (h + 1), 0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        integral[(y + 1) * (w + 1) + (x + 1)] = (mask->at(x, y) != 0 ? 1 : 0) +
                                                integral[y * (w + 1) + (x + 1)] +
                                                integral[(y + 1) * (w + 1) + x] -
                                                integral[y * (w + 1) + x];
  }
  for (int y = 5; y < h - 5; ++y)
    for (int x = 5; x < w - 5; ++x) {
      if (mask) {
        int x0 = x - 5, y0 = y - 5, x1 = x + 6, y1 = y + 6;
        std::int64_t inside = integral[y1 * (w + 1) + x1] - integral[y0 * (w + 1) + x1] -
                              integral[y1 * (w + 1) + x0] + integral[y0 * (w + 1) + x0];
        if (inside != 121) continue;
      }
      valid.at(x, y) = 1;
    }
  return valid;
}

}  // namespace detail

// Mean per-pixel single-scale SSIM between x and y over valid (window fully
// inside image and mask) pixels, averaged over channels. Returns the count of
// valid pixels through *out_count. When gx is non-null, accumulates
// d(mean SSIM)/dx scaled by grad_scale.
template <class T>
T ssim_mean(const Image<T>& x, const Image<T>& y, const Image<std::uint8_t>* mask,
            std::size_t* out_count, Image<T>* gx = nullptr, T grad_scale = T(1)) {
  MTS_REQUIRE(x.same_shape(y), "ssim: image shapes differ");
  const int w = x.width, h = x.height, ch = x.channels;
  const T c1 = T(0.01) * T(0.01), c2 = T(0.03) * T(0.03);
  Image<std::uint8_t> valid = detail::ssim_valid_map(w, h, mask);
  std::size_t count = 0;
  for (auto v : valid.data) count += v;
  if (out_count) *out_count = count;
  if (count == 0) return T(0);

  Image<T> mu_x(w, h, 1), mu_y(w, h, 1), xx(w, h, 1), yy(w, h, 1), xy(w, h, 1);
  Image<T> sq(w, h, 1);
  T total = T(0);
  for (int c = 0; c < ch; ++c) {
    detail::conv_gauss11(x, c, &mu_x, 0);
    detail::conv_gauss11(y, c, &mu_y, 0);
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) sq.at(px, py) = x.at(px, py, c) * x.at(px, py, c);
    detail::conv_gauss11(sq, 0, &xx, 0);
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) sq.at(px, py) = y.at(px, py, c) * y.at(px, py, c);
    detail::conv_gauss11(sq, 0, &yy, 0);
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) sq.at(px, py) = x.at(px, py, c) * y.at(px, py, c);
    detail::conv_gauss11(sq, 0, &xy, 0);

    Image<T> g_mu(w, h, 1, T(0)), g_sxx(w, h, 1, T(0)), g_sxy(w, h, 1, T(0));
    for (int py = 0; py < h; ++py) {
      for (int px = 0; px < w; ++px) {
        if (!valid.at(px, py)) continue;
        const T mx = mu_x.at(px, py), my = mu_y.at(px, py);
        const T sxx = xx.at(px, py) - mx * mx;
        const T syy = yy.at(px, py) - my * my;
        const T sxy = xy.at(px, py) - mx * my;
        const T a1 = T(2) * mx * my + c1, a2 = T(2) * sxy + c2;
        const T b1 = mx * mx + my * my + c1, b2 = sxx + syy + c2;
        const T denom = b1 * b2;
        total += (a1 * a2) / denom;
        if (gx) {
          const T up = grad_scale / (T(count) * T(ch));
          const T ds_da1 = a2 / denom;
          const T ds_da2 = a1 / denom;
          const T ds_db1 = -(a1 * a2) / (denom * b1);
          const T ds_db2 = -(a1 * a2) / (denom * b2);
          // through sxx = E[x^2]-mx^2 and sxy = E[xy]-mx my, the mu path
          // collects extra terms
          g_mu.at(px, py) = up * (T(2) * my * ds_da1 + T(2) * mx * ds_db1 +
                                  (-T(2) * mx) * ds_db2 + (-my) * T(2) * ds_da2);
          g_sxx.at(px, py) = up * ds_db2;   // against conv(x^2)
          g_sxy.at(px, py) = up * T(2) * ds_da2;  // against conv(xy)
        }
      }
    }
    if (gx) {
      Image<T> conv_mu(w, h, 1), conv_sxx(w, h, 1), conv_sxy(w, h, 1);
      detail::conv_gauss11(g_mu, 0, &conv_mu, 0);
      detail::conv_gauss11(g_sxx, 0, &conv_sxx, 0);
      detail::conv_gauss11(g_sxy, 0, &conv_sxy, 0);
      for (int py = 0; py < h; ++py)
        for (int px = 0; px < w; ++px)
          gx->at(px, py, c) += conv_mu.at(px, py) +
                               T(2) * x.at(px, py, c) * conv_sxx.at(px, py) +
                               y.at(px, py, c) * conv_sxy.at(px, py);
    }
  }
  return total / (T(count) * T(ch));
}

// lambda_r * L1 + (1 - lambda_r) * (1 - SSIM) over masked pixels.
// Accumulates the gradient with respect to `render` into g_render.
template <class T>
T photometric_loss(const Image<T>& render, const Image<T>& gt, const Image<std::uint8_t>* mask,
                   T lambda_r, T* l1_out, T* ssim_out, bool* empty_flag,
                   Image<T>* g_render = nullptr) {
  MTS_REQUIRE(render.same_shape(gt), "photometric: image shapes differ");
  const int w = render.width, h = render.height, ch = render.channels;
  std::size_t n = 0;
  T l1 = T(0);
  for (int py = 0; py < h; ++py)
    for (int px = 0; px < w; ++px) {
      if (mask && mask->at(px, py) == 0) continue;
      ++n;
      for (int c = 0; c < ch; ++c) l1 += std::abs(render.at(px, py, c) - gt.at(px, py, c));
    }
  if (n > 0) l1 /= T(n) * T(ch);
  if (g_render && n > 0) {
    const T up = lambda_r / (T(n) * T(ch));
    for (int py = 0; py < h; ++py)
      for (int px = 0; px < w; ++px) {
        if (mask && mask->at(px, py) == 0) continue;
        for (int c = 0; c < ch; ++c) {
          T d = render.at(px, py, c) - gt.at(px, py, c);
          g_render->at(px, py, c) += d > T(0) ? up : (d < T(0) ? -up : T(0));
        }
      }
  }
  std::size_t ssim_count = 0;
  // d(1-ssim)/dx = -d(ssim)/dx
  T ssim = ssim_mean(render, gt, mask, &ssim_count, g_render, -(T(1) - lambda_r));
  bool empty = (n == 0) && (ssim_count == 0);
  if (empty_flag) *empty_flag = empty;
  if (l1_out) *l1_out = l1;
  if (ssim_out) *ssim_out = ssim_count > 0 ? T(1) - ssim : T(0);
  return lambda_r * l1 + (T(1) - lambda_r) * (ssim_count > 0 ? T(1) - ssim : T(0));
}

// Mean |1/d_pred - 1/d_lidar| over LiDAR-hit pixels; pixels with accumulated
// alpha <= alpha_eps are skipped.
template <class T>
T depth_inv_l1(const Image<T>& pred_depth, const Image<T>& alpha,
               const std::vector<DepthSample<T>>& samples, T alpha_eps = T(1e-4),
               Image<T>* g_depth = nullptr) {
  std::size_t used = 0;
  T loss = T(0);
  for (const auto& s : samples) {
    MTS_CHECK(s.depth > T(0), "depth_inv_l1: non-positive LiDAR depth must be rejected earlier");
    if (alpha.at(s.x, s.y) <= alpha_eps) continue;
    ++used;
    loss += std::abs(T(1) / pred_depth.at(s.x, s.y) - T(1) / s.depth);
  }
  if (used == 0) return T(0);
  loss /= T(used);
  if (g_depth) {
    const T up = T(1) / T(used);
    for (const auto& s : samples) {
      if (alpha.at(s.x, s.y) <= alpha_eps) continue;
      T dp = pred_depth.at(s.x, s.y);
      T diff = T(1) / dp - T(1) / s.depth;
      T sign = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
      g_depth->at(s.x, s.y) += up * sign * (-T(1) / (dp * dp));
    }
  }
  return loss;
}

// Patch-wise normalized cross-correlation between rendered and pseudo depth:
// 1 - mean over patches of NCC. Pixels with non-positive pseudo or rendered
// depth are invalid; patches with more than max_invalid_fraction invalid are
// skipped, the rest use their valid pixels only.
template <class T>
T ncc_loss(const Image<T>& pred, const Image<T>& pseudo, const NCCConfig& cfg,
           bool* empty_flag = nullptr, Image<T>* g_pred = nullptr) {
  MTS_REQUIRE(pred.same_shape(pseudo), "ncc: image shapes differ");
  const int s = cfg.patch_size, k = cfg.stride;
  MTS_REQUIRE(s > 0 && k > 0 && k <= s, "ncc: invalid patch config");
  const int w = pred.width, h = pred.height;
  struct Patch {
    int x0, y0;
  };
  std::vector<Patch> patches;
  for (int y0 = 0; y0 + s <= h; y0 += k)
    for (int x0 = 0; x0 + s <= w; x0 += k) patches.push_back({x0, y0});

  const int max_invalid = static_cast<int>(cfg.max_invalid_fraction * s * s);
  std::vector<int> vx, vy;
  std::vector<T> va, vb;
  T total = T(0);
  std::size_t used = 0;

  // two passes when gradients are requested: first count patches, then walk
  // again with the final normalization known
  for (int pass = 0; pass < (g_pred ? 2 : 1); ++pass) {
    if (pass == 1 && used == 0) break;
    const T up = pass == 1 ? T(-1) / T(used) : T(0);
    for (const auto& p : patches) {
      vx.clear();
      vy.clear();
      va.clear();
      vb.clear();
      int invalid = 0;
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx) {
          T a = pred.at(p.x0 + dx, p.y0 + dy);
          T b = pseudo.at(p.x0 + dx, p.y0 + dy);
          if (a <= T(0) || b <= T(0)) {
            ++invalid;
            continue;
          }
          vx.push_back(p.x0 + dx);
          vy.push_back(p.y0 + dy);
          va.push_back(a);
          vb.push_back(b);
        }
      if (invalid > max_invalid || va.size() < 2) continue;
      const std::size_t m = va.size();
      T mean_a = T(0), mean_b = T(0);
      for (std::size_t i = 0; i < m; ++i) {
        mean_a += va[i];
        mean_b += vb[i];
      }
      mean_a /= T(m);
      mean_b /= T(m);
      T var_a = T(0), var_b = T(0), cov = T(0);
      for (std::size_t i = 0; i < m; ++i) {
        T ca = va[i] - mean_a, cb = vb[i] - mean_b;
        var_a += ca * ca;
        var_b += cb * cb;
        cov += ca * cb;
      }
      T sig_a = std::sqrt(var_a / T(m));
      T sig_b = std::sqrt(var_b / T(m));
      const bool floored_a = sig_a < T(cfg.sigma_eps);
      if (floored_a) sig_a = T(cfg.sigma_eps);
      if (sig_b < T(cfg.sigma_eps)) sig_b = T(cfg.sigma_eps);
      const T ncc = cov / (T(m) * sig_a * sig_b);
      if (pass == 0) {
        total += ncc;
        ++used;
      } else {
        // d ncc / d centered_a, then remove the mean component
        T mean_shift = T(0);
        std::vector<T> g(m);
        for (std::size_t i = 0; i < m; ++i) {
          T ca = va[i] - mean_a, cb = vb[i] - mean_b;
          T gi = cb / (T(m) * sig_a * sig_b);
          if (!floored_a) gi -= cov * ca / (T(m) * T(m) * sig_a * sig_a * sig_a * sig_b);
          g[i] = gi;
          mean_shift += gi;
        }
        mean_shift /= T(m);
        for (std::size_t i = 0; i < m; ++i)
          g_pred->at(vx[i], vy[i]) += up * (g[i] - mean_shift);
      }
    }
  }
  if (empty_flag) *empty_flag = (used == 0);
  if (used == 0) return T(0);
  return T(1) - total / T(used);
}

template <class T>
struct NormalMap {
  Image<T> normal;           // h x w x 3, camera frame
  Image<std::uint8_t> valid; // 1 = usable
};

// Normals from the gradients of a depth map: back-project pixels with the
// intrinsics, cross the central-difference tangents, face the camera.
template <class T>
NormalMap<T> pseudo_normal_from_depth(const Image<T>& depth, const Intrinsics<T>& K) {
  const int w = depth.width, h = depth.height;
  NormalMap<T> out{Image<T>(w, h, 3, T(0)), Image<std::uint8_t>(w, h, 1, 0)};
  auto backproject = [&](int x, int y) {
    T d = depth.at(x, y);
    T u = T(x) + T(0.5), v = T(y) + T(0.5);
    return Vec3<T>((u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d);
  };
  for (int y = 1; y < h - 1; ++y) {
    for (int x = 1; x < w - 1; ++x) {
      if (depth.at(x, y) <= T(0) || depth.at(x - 1, y) <= T(0) || depth.at(x + 1, y) <= T(0) ||
          depth.at(x, y - 1) <= T(0) || depth.at(x, y + 1) <= T(0))
        continue;
      Vec3<T> tx = backproject(x + 1, y) - backproject(x - 1, y);
      Vec3<T> ty = backproject(x, y + 1) - backproject(x, y - 1);
      Vec3<T> n = tx.cross(ty);
      T len = n.norm();
      if (len <= T(0)) continue;
      n /= len;
      if (n.dot(backproject(x, y)) > T(0)) n = -n;
      for (int c = 0; c < 3; ++c) out.normal.at(x, y, c) = n[c];
      out.valid.at(x, y) = 1;
    }
  }
  return out;
}

// Data term (mean L1 against the pseudo normal over valid pixels) plus an
// anisotropic TV term on the rendered normal. TV pairs require both pixels
// mask-in so masked and crop-support evaluations agree.
template <class T>
T normal_loss(const Image<T>& rendered, const Image<T>& pseudo,
              const Image<std::uint8_t>* pseudo_valid, const Image<std::uint8_t>* mask,
              Image<T>* g_rendered = nullptr) {
  MTS_REQUIRE(rendered.same_shape(pseudo), "normal_loss: shapes differ");
  const int w = rendered.width, h = rendered.height;
  auto inside_mask = [&](int x, int y) { return !mask || mask->at(x, y) != 0; };

  T data = T(0);
  std::size_t n_data = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!inside_mask(x, y)) continue;
      if (pseudo_valid && pseudo_valid->at(x, y) == 0) continue;
      ++n_data;
      for (int c = 0; c < 3; ++c) data += std::abs(rendered.at(x, y, c) - pseudo.at(x, y, c));
    }
  if (n_data > 0) data /= T(n_data);

  T tv = T(0);
  std::size_t n_pairs = 0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (!inside_mask(x, y)) continue;
      if (x + 1 < w && inside_mask(x + 1, y)) {
        ++n_pairs;
        for (int c = 0; c < 3; ++c)
          tv += std::abs(rendered.at(x + 1, y, c) - rendered.at(x, y, c));
      }
      if (y + 1 < h && inside_mask(x, y + 1)) {
        ++n_pairs;
        for (int c = 0; c < 3; ++c)
          tv += std::abs(rendered.at(x, y + 1, c) - rendered.at(x, y, c));
      }
    }
  if (n_pairs > 0) tv /= T(n_pairs);

  if (g_rendered) {
    auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
    if (n_data > 0) {
      const T up = T(1) / T(n_data);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!inside_mask(x, y)) continue;
          if (pseudo_valid && pseudo_valid->at(x, y) == 0) continue;
          for (int c = 0; c < 3; ++c)
            g_rendered->at(x, y, c) += up * sgn(rendered.at(x, y, c) - pseudo.at(x, y, c));
        }
    }
    if (n_pairs > 0) {
      const T up = T(1) / T(n_pairs);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          if (!inside_mask(x, y)) continue;
          if (x + 1 < w && inside_mask(x + 1, y))
            for (int c = 0; c < 3; ++c) {
              T s = sgn(rendered.at(x + 1, y, c) - rendered.at(x, y, c));
              g_rendered->at(x + 1, y, c) += up * s;
              g_rendered->at(x, y, c) -= up * s;
            }
          if (y + 1 < h && inside_mask(x, y + 1))
            for (int c = 0; c < 3; ++c) {
              T s = sgn(rendered.at(x, y + 1, c) - rendered.at(x, y, c));
              g_rendered->at(x, y + 1, c) += up * s;
              g_rendered->at(x, y, c) -= up * s;
            }
        }
    }
  }
  return data + tv;
}

// Sum over Gaussians of max{max(s)/median(s), r} - r + min(s), on activated
// scales. Optionally accumulates gradients into log-scale grads.
template <class T>
T flatten_loss(const std::vector<Vec3<T>>& log_scales, const FlattenConfig& cfg,
               std::vector<Vec3<T>>* g_log_scales = nullptr) {
  const T r = T(cfg.ratio_cap);
  T loss = T(0);
  for (std::size_t i = 0; i < log_scales.size(); ++i) {
    Vec3<T> s = activated_scale(log_scales[i]);
    int lo = 0, hi = 0;
    for (int k = 1; k < 3; ++k) {
      if (s[k] < s[lo]) lo = k;
      if (s[k] > s[hi]) hi = k;
    }
    if (hi == lo) hi = (lo + 1) % 3;      // all equal: any distinct pair
    const int mid = 3 - lo - hi;
    const T ratio = s[hi] / s[mid];
    loss += std::max(ratio, r) - r + s[lo];
    if (g_log_scales) {
      Vec3<T>& g = (*g_log_scales)[i];
      g[lo] += s[lo];  // d(min)/d(log s_lo) = s_lo
      if (ratio > r) {
        g[hi] += ratio;            // (1/s_mid) * s_hi
        g[mid] += -ratio;          // (-s_hi/s_mid^2) * s_mid
      }
    }
  }
  return loss;
}

// Out-of-box opacity suppression, Gaussians outside the dilated box only:
// per node, mean of -log(1 - alpha); summed over the given nodes.
template <class T>
T oob_loss(std::vector<TransientNode<T>*> nodes, bool accumulate_grads = false,
           T grad_scale = T(1)) {
  T loss = T(0);
  for (TransientNode<T>* node : nodes) {
    auto idx = node->oob_indices();
    if (idx.empty()) continue;
    const T up = T(1) / T(idx.size());
    for (std::size_t i : idx) {
      T alpha = sigmoid(node->gaussians.opacity_logits.value[i]);
      bool clamped = alpha > T(1) - T(1e-6);
      if (clamped) alpha = T(1) - T(1e-6);
      loss += -std::log(T(1) - alpha) * up;
      if (accumulate_grads && !clamped) {
        // d/dlogit of -log(1-sigmoid(x)) = sigmoid(x)
        node->gaussians.opacity_logits.grad[i] += grad_scale * up * alpha;
      }
    }
  }
  return loss;
}

}  // namespace mtsplat
