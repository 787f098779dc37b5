#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <type_traits>
#include <vector>

#include "mtsplat/geometry.hpp"

namespace mtsplat {

// Real spherical harmonics band limit. Coefficient count per channel is (l_max+1)^2.
struct SHConfig {
  int l_max = 3;
  int coeff_count() const { return (l_max + 1) * (l_max + 1); }
  int rest_count() const { return coeff_count() - 1; }
};

inline constexpr int kShRestMax = 15;  // l_max = 3
inline constexpr double kSh0 = 0.28209479177387814;

template <class T>
using ShRest = std::array<Vec3<T>, kShRestMax>;  // rows l>=1, RGB per row

template <class T>
ShRest<T> zero_sh_rest() {
  ShRest<T> r;
  for (auto& v : r) v.setZero();
  return r;
}

template <class V>
void param_set_zero(V& x) {
  if constexpr (std::is_arithmetic_v<V>) {
    x = V(0);
  } else if constexpr (requires { x.setZero(); }) {
    x.setZero();
  } else {
    for (auto& e : x) e.setZero();
  }
}

template <class V>
V param_zero() {
  V v{};
  param_set_zero(v);
  return v;
}

// One learnable array plus its gradient and Adam moment mirrors. Densification
// keeps all four in lockstep.
template <class T, class V>
struct Param {
  std::vector<V> value;
  std::vector<V> grad;
  std::vector<V> m1;
  std::vector<V> m2;

  std::size_t size() const { return value.size(); }

  void resize(std::size_t n, const V& fill) {
    value.resize(n, fill);
    sync_aux();
  }

  void push_back(const V& v) {
    value.push_back(v);
    sync_aux();
  }

  void zero_grad() {
    for (auto& g : grad) param_set_zero(g);
  }

  // Rebuilds value/moments as value[keep[i]] followed by `appended` fresh rows.
  // New rows get zero moments.
  void remap(const std::vector<std::size_t>& keep, const std::vector<V>& appended) {
    std::vector<V> nv, nm1, nm2;
    nv.reserve(keep.size() + appended.size());
    nm1.reserve(nv.capacity());
    nm2.reserve(nv.capacity());
    const V zero = param_zero<V>();
    for (std::size_t idx : keep) {
      nv.push_back(value[idx]);
      nm1.push_back(m1[idx]);
      nm2.push_back(m2[idx]);
    }
    for (const V& v : appended) {
      nv.push_back(v);
      nm1.push_back(zero);
      nm2.push_back(zero);
    }
    value = std::move(nv);
    m1 = std::move(nm1);
    m2 = std::move(nm2);
    grad.assign(value.size(), zero);
  }

 private:
  void sync_aux() {
    const V zero = param_zero<V>();
    grad.resize(value.size(), zero);
    m1.resize(value.size(), zero);
    m2.resize(value.size(), zero);
  }
};

// Structure-of-arrays Gaussian parameters. Scales are stored as logs (exp
// activation), opacities as logits (sigmoid activation); quaternions may drift
// off unit norm between optimizer steps and are normalized inside the
// rotation conversion. sh_rest may be absent (static node owns only sh_base).
template <class T>
struct GaussianSet {
  Param<T, Vec3<T>> positions;       // meters
  Param<T, Vec4<T>> quaternions;     // (w,x,y,z)
  Param<T, Vec3<T>> log_scales;      // log-meters
  Param<T, T> opacity_logits;
  Param<T, Vec3<T>> sh_base;         // band-0 coefficients
  Param<T, ShRest<T>> sh_rest;       // bands l>=1; empty when absent
  bool has_sh_rest = true;

  std::size_t size() const { return positions.size(); }

  void resize(std::size_t n) {
    positions.resize(n, Vec3<T>::Zero());
    quaternions.resize(n, Vec4<T>(T(1), T(0), T(0), T(0)));
    log_scales.resize(n, Vec3<T>::Zero());
    opacity_logits.resize(n, T(0));
    sh_base.resize(n, Vec3<T>::Zero());
    if (has_sh_rest) sh_rest.resize(n, zero_sh_rest<T>());
  }

  void zero_grads() {
    positions.zero_grad();
    quaternions.zero_grad();
    log_scales.zero_grad();
    opacity_logits.zero_grad();
    sh_base.zero_grad();
    sh_rest.zero_grad();
  }

  void check_consistent() const {
    std::size_t n = size();
    MTS_CHECK(quaternions.size() == n && log_scales.size() == n &&
                  opacity_logits.size() == n && sh_base.size() == n,
              "GaussianSet arrays must share one length");
    MTS_CHECK(sh_rest.size() == (has_sh_rest ? n : 0), "sh_rest length mismatch");
  }
};

template <class T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

template <class T>
T logit(T p) {
  return std::log(p / (T(1) - p));
}

template <class T>
Vec3<T> activated_scale(const Vec3<T>& log_scale) {
  return log_scale.array().exp();
}

// Covariance from rotation and activated scales: Sigma = R diag(s)^2 R^T.
// Symmetric positive semi-definite by construction; eigenvalues are s^2.
template <class T>
Mat3<T> covariance(const Mat3<T>& rot, const Vec3<T>& scale) {
  Mat3<T> rs = rot * scale.asDiagonal();
  return rs * rs.transpose();
}

// Given dL/dSigma (full 3x3), accumulates dL/dR and dL/ds.
template <class T>
void covariance_backward(const Mat3<T>& rot, const Vec3<T>& scale, const Mat3<T>& g_sigma,
                         Mat3<T>* g_rot, Vec3<T>* g_scale) {
  Mat3<T> sym = g_sigma + g_sigma.transpose();
  Mat3<T> s2 = (scale.array() * scale.array()).matrix().asDiagonal();
  if (g_rot) *g_rot += sym * rot * s2;
  if (g_scale) {
    for (int k = 0; k < 3; ++k) {
      Vec3<T> col = rot.col(k);
      (*g_scale)[k] += scale[k] * col.dot(sym * col);
    }
  }
}

// Normal of a Gaussian: direction of the smallest scaling axis. Exact ties
// break to the lowest axis index.
template <class T>
int min_scale_axis(const Vec3<T>& scale) {
  int a = 0;
  if (scale[1] < scale[0]) a = 1;
  if (scale[2] < scale[a]) a = 2;
  return a;
}

template <class T>
Vec3<T> gaussian_normal(const Mat3<T>& rot, const Vec3<T>& scale) {
  return rot.col(min_scale_axis(scale));
}

namespace sh {

// Widely used splatting constant table for real spherical harmonics.
template <class T>
struct Constants {
  static constexpr T c0 = T(0.28209479177387814);
  static constexpr T c1 = T(0.4886025119029199);
  static constexpr T c2[5] = {T(1.0925484305920792), T(-1.0925484305920792),
                              T(0.31539156525252005), T(-1.0925484305920792),
                              T(0.5462742152960396)};
  static constexpr T c3[7] = {T(-0.5900435899266435), T(2.890611442640554),
                              T(-0.4570457994644658), T(0.3731763325901154),
                              T(-0.4570457994644658), T(1.445305721320277),
                              T(-0.5900435899266435)};
};

// Basis values for a unit direction, bands 0..l_max (up to 16 entries).
template <class T>
void basis(const Vec3<T>& d, int l_max, T* out) {
  using C = Constants<T>;
  const T x = d[0], y = d[1], z = d[2];
  out[0] = C::c0;
  if (l_max < 1) return;
  out[1] = -C::c1 * y;
  out[2] = C::c1 * z;
  out[3] = -C::c1 * x;
  if (l_max < 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  const T xy = x * y, yz = y * z, xz = x * z;
  out[4] = C::c2[0] * xy;
  out[5] = C::c2[1] * yz;
  out[6] = C::c2[2] * (T(2) * zz - xx - yy);
  out[7] = C::c2[3] * xz;
  out[8] = C::c2[4] * (xx - yy);
  if (l_max < 3) return;
  out[9] = C::c3[0] * y * (T(3) * xx - yy);
  out[10] = C::c3[1] * xy * z;
  out[11] = C::c3[2] * y * (T(4) * zz - xx - yy);
  out[12] = C::c3[3] * z * (T(2) * zz - T(3) * xx - T(3) * yy);
  out[13] = C::c3[4] * x * (T(4) * zz - xx - yy);
  out[14] = C::c3[5] * z * (xx - yy);
  out[15] = C::c3[6] * x * (xx - T(3) * yy);
}

// d(basis)/d(direction components), same layout as basis().
template <class T>
void basis_grad(const Vec3<T>& d, int l_max, Vec3<T>* out) {
  using C = Constants<T>;
  const T x = d[0], y = d[1], z = d[2];
  out[0].setZero();
  if (l_max < 1) return;
  out[1] = Vec3<T>(T(0), -C::c1, T(0));
  out[2] = Vec3<T>(T(0), T(0), C::c1);
  out[3] = Vec3<T>(-C::c1, T(0), T(0));
  if (l_max < 2) return;
  const T xx = x * x, yy = y * y, zz = z * z;
  out[4] = C::c2[0] * Vec3<T>(y, x, T(0));
  out[5] = C::c2[1] * Vec3<T>(T(0), z, y);
  out[6] = C::c2[2] * Vec3<T>(T(-2) * x, T(-2) * y, T(4) * z);
  out[7] = C::c2[3] * Vec3<T>(z, T(0), x);
  out[8] = C::c2[4] * Vec3<T>(T(2) * x, T(-2) * y, T(0));
  if (l_max < 3) return;
  out[9] = C::c3[0] * Vec3<T>(T(6) * x * y, T(3) * xx - T(3) * yy, T(0));
  out[10] = C::c3[1] * Vec3<T>(y * z, x * z, x * y);
  out[11] = C::c3[2] * Vec3<T>(T(-2) * x * y, T(4) * zz - xx - T(3) * yy, T(8) * y * z);
  out[12] = C::c3[3] * Vec3<T>(T(-6) * x * z, T(-6) * y * z, T(6) * zz - T(3) * xx - T(3) * yy);
  out[13] = C::c3[4] * Vec3<T>(T(4) * zz - T(3) * xx - yy, T(-2) * x * y, T(8) * x * z);
  out[14] = C::c3[5] * Vec3<T>(T(2) * x * z, T(-2) * y * z, xx - yy);
  out[15] = C::c3[6] * Vec3<T>(T(3) * xx - T(3) * yy, T(-6) * x * y, T(0));
}

}  // namespace sh

// Color from spherical harmonics: sum of coefficients times basis plus the 0.5
// offset, clamped at zero. Band 0 reads sh_base only, bands l>=1 read sh_rest.
// A non-unit direction is renormalized. clamp_mask (optional, 3 bits) records
// which channels were clamped, for the backward pass.
template <class T>
Vec3<T> eval_sh(const Vec3<T>& sh_base, const ShRest<T>* rest, const Vec3<T>& dir, int l_max,
                int* clamp_mask = nullptr) {
  Vec3<T> d = dir;
  T n2 = d.squaredNorm();
  if (std::abs(n2 - T(1)) > T(1e-12)) d /= std::sqrt(n2);
  T b[16];
  sh::basis(d, rest ? l_max : 0, b);
  Vec3<T> c = sh_base * b[0];
  if (rest && l_max > 0) {
    int rest_count = (l_max + 1) * (l_max + 1) - 1;
    for (int k = 0; k < rest_count; ++k) c += (*rest)[k] * b[k + 1];
  }
  c.array() += T(0.5);
  int mask = 0;
  for (int ch = 0; ch < 3; ++ch) {
    if (c[ch] < T(0)) {
      c[ch] = T(0);
      mask |= 1 << ch;
    }
  }
  if (clamp_mask) *clamp_mask = mask;
  return c;
}

// Backward of eval_sh for the pre-normalization direction `dir` actually
// passed to the forward call. Accumulates into the provided outputs.
template <class T>
void eval_sh_backward(const Vec3<T>& sh_base, const ShRest<T>* rest, const Vec3<T>& dir,
                      int l_max, int clamp_mask, const Vec3<T>& g_color, Vec3<T>* g_base,
                      ShRest<T>* g_rest, Vec3<T>* g_dir) {
  Vec3<T> g = g_color;
  for (int ch = 0; ch < 3; ++ch)
    if (clamp_mask & (1 << ch)) g[ch] = T(0);
  Vec3<T> d = dir;
  T n = d.norm();
  d /= n;
  T b[16];
  Vec3<T> db[16];
  int effective_l = rest ? l_max : 0;
  sh::basis(d, effective_l, b);
  if (g_base) *g_base += g * b[0];
  if (!rest || l_max < 1) return;
  int rest_count = (l_max + 1) * (l_max + 1) - 1;
  if (g_rest)
    for (int k = 0; k < rest_count; ++k) (*g_rest)[k] += g * b[k + 1];
  if (g_dir) {
    sh::basis_grad(d, l_max, db);
    Vec3<T> g_unit = Vec3<T>::Zero();
    for (int k = 0; k < rest_count; ++k) g_unit += db[k + 1] * g.dot((*rest)[k]);
    // chain through normalization d = dir/|dir|
    *g_dir += (g_unit - d * d.dot(g_unit)) / n;
  }
}

}  // namespace mtsplat
