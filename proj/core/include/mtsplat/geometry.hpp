#pragma once

#include <Eigen/Dense>
#include <cmath>

#include "mtsplat/common.hpp"

namespace mtsplat {

template <class T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <class T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <class T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <class T> using Vec6 = Eigen::Matrix<T, 6, 1>;
template <class T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <class T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <class T> using Mat4 = Eigen::Matrix<T, 4, 4>;
template <class T> using Mat23 = Eigen::Matrix<T, 2, 3>;

// Quaternions are stored (w, x, y, z).

template <class T>
Mat3<T> quat_to_rot_unit(const Vec4<T>& q) {
  const T w = q[0], x = q[1], y = q[2], z = q[3];
  Mat3<T> r;
  r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
       T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
       T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
  return r;
}

// Normalizes internally; a zero quaternion is an invalid parameter.
template <class T>
Mat3<T> quat_to_rot(const Vec4<T>& q) {
  T n = q.norm();
  MTS_REQUIRE(n > T(0), "quat_to_rot: zero-norm quaternion");
  return quat_to_rot_unit<T>(q / n);
}

// d(quat_to_rot(q))/dq contracted with an upstream 3x3 gradient:
// returns dL/dq given dL/dR, including the normalization chain.
template <class T>
Vec4<T> quat_to_rot_backward(const Vec4<T>& q, const Mat3<T>& g_rot) {
  T n = q.norm();
  MTS_REQUIRE(n > T(0), "quat_to_rot_backward: zero-norm quaternion");
  Vec4<T> u = q / n;
  const T w = u[0], x = u[1], y = u[2], z = u[3];
  // Partial derivatives of R entries with respect to the unit quaternion.
  Mat3<T> dw, dx, dy, dz;
  dw << T(0), T(-2) * z, T(2) * y,
        T(2) * z, T(0), T(-2) * x,
        T(-2) * y, T(2) * x, T(0);
  dx << T(0), T(2) * y, T(2) * z,
        T(2) * y, T(-4) * x, T(-2) * w,
        T(2) * z, T(2) * w, T(-4) * x;
  dy << T(-4) * y, T(2) * x, T(2) * w,
        T(2) * x, T(0), T(2) * z,
        T(-2) * w, T(2) * z, T(-4) * y;
  dz << T(-4) * z, T(-2) * w, T(2) * x,
        T(2) * w, T(-4) * z, T(2) * y,
        T(2) * x, T(2) * y, T(0);
  Vec4<T> g_unit;
  g_unit[0] = (dw.array() * g_rot.array()).sum();
  g_unit[1] = (dx.array() * g_rot.array()).sum();
  g_unit[2] = (dy.array() * g_rot.array()).sum();
  g_unit[3] = (dz.array() * g_rot.array()).sum();
  // u = q / |q|  =>  du/dq = (I - u u^T) / |q|
  return (g_unit - u * u.dot(g_unit)) / n;
}

// Shepperd's method.
template <class T>
Vec4<T> rot_to_quat(const Mat3<T>& r) {
  Vec4<T> q;
  T trace = r.trace();
  if (trace > T(0)) {
    T s = std::sqrt(trace + T(1)) * T(2);
    q << T(0.25) * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    T s = std::sqrt(T(1) + r(0, 0) - r(1, 1) - r(2, 2)) * T(2);
    q << (r(2, 1) - r(1, 2)) / s, T(0.25) * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    T s = std::sqrt(T(1) + r(1, 1) - r(0, 0) - r(2, 2)) * T(2);
    q << (r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, T(0.25) * s, (r(1, 2) + r(2, 1)) / s;
  } else {
    T s = std::sqrt(T(1) + r(2, 2) - r(0, 0) - r(1, 1)) * T(2);
    q << (r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, T(0.25) * s;
  }
  return q.normalized();
}

// Hamilton product a * b.
template <class T>
Vec4<T> quat_mul(const Vec4<T>& a, const Vec4<T>& b) {
  return Vec4<T>(
      a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
      a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
      a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
      a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

// Left-multiplication matrix L(a) with quat_mul(a, b) == L(a) * b.
template <class T>
Mat4<T> quat_left_matrix(const Vec4<T>& a) {
  Mat4<T> m;
  m << a[0], -a[1], -a[2], -a[3],
       a[1],  a[0], -a[3],  a[2],
       a[2],  a[3],  a[0], -a[1],
       a[3], -a[2],  a[1],  a[0];
  return m;
}

// Right-multiplication matrix R(b) with quat_mul(a, b) == R(b) * a.
template <class T>
Mat4<T> quat_right_matrix(const Vec4<T>& b) {
  Mat4<T> m;
  m << b[0], -b[1], -b[2], -b[3],
       b[1],  b[0],  b[3], -b[2],
       b[2], -b[3],  b[0],  b[1],
       b[3],  b[2], -b[1],  b[0];
  return m;
}

// Unit quaternion of the rotation exp([omega]x), Taylor-safe near zero.
template <class T>
Vec4<T> so3_exp_quat(const Vec3<T>& omega) {
  T theta2 = omega.squaredNorm();
  T theta = std::sqrt(theta2);
  T w, s;  // s = sin(theta/2)/theta
  if (theta < T(1e-4)) {
    w = T(1) - theta2 / T(8) + theta2 * theta2 / T(384);
    s = T(0.5) - theta2 / T(48);
  } else {
    w = std::cos(theta / T(2));
    s = std::sin(theta / T(2)) / theta;
  }
  return Vec4<T>(w, s * omega[0], s * omega[1], s * omega[2]);
}

// dL/domega given dL/dq of so3_exp_quat.
template <class T>
Vec3<T> so3_exp_quat_backward(const Vec3<T>& omega, const Vec4<T>& g_q) {
  T theta2 = omega.squaredNorm();
  T theta = std::sqrt(theta2);
  T s, dw_dtheta_over_theta, ds_dtheta_over_theta;
  if (theta < T(1e-4)) {
    s = T(0.5) - theta2 / T(48);
    // w = cos(theta/2): dw/dtheta = -sin(theta/2)/2 ~ -theta/4; divided by theta.
    dw_dtheta_over_theta = -T(0.25) + theta2 / T(96);
    // ds/dtheta = (cos(theta/2)/2 * theta - sin(theta/2)) / theta^2 ~ -theta/24
    ds_dtheta_over_theta = -T(1) / T(24) + theta2 / T(960);
  } else {
    s = std::sin(theta / T(2)) / theta;
    dw_dtheta_over_theta = -std::sin(theta / T(2)) / (T(2) * theta);
    ds_dtheta_over_theta = (std::cos(theta / T(2)) / T(2) - s) / theta2;
  }
  // q = (w(theta), s(theta) * omega); dtheta/domega = omega / theta.
  Vec3<T> g = s * g_q.template tail<3>();
  T radial = dw_dtheta_over_theta * g_q[0] +
             ds_dtheta_over_theta * omega.dot(g_q.template tail<3>());
  return g + radial * omega;
}

template <class T>
Vec3<T> normalize_with_backward(const Vec3<T>& v, const Vec3<T>& g_unit, Vec3<T>* g_v) {
  T n = v.norm();
  Vec3<T> u = v / n;
  if (g_v) *g_v += (g_unit - u * u.dot(g_unit)) / n;
  return u;
}

}  // namespace mtsplat
