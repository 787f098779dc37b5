#pragma once

#include "mtsplat/geometry.hpp"

namespace mtsplat {

template <class T>
struct Intrinsics {
  T fx = T(0), fy = T(0), cx = T(0), cy = T(0);  // zero skew
};

// Effective world-to-camera pose after the learnable se(3) correction:
// W_eff = [R(omega) | nu] * W, applied on the left.
template <class T>
struct CameraPose {
  Mat3<T> rot;            // rotation part of W_eff
  Vec3<T> trans;          // translation part of W_eff
  Mat3<T> rot_base;       // rotation part of W (before correction)
  Vec3<T> trans_base;
  Mat3<T> rot_delta;      // R(omega)
  Vec4<T> quat_delta;     // exp quaternion of omega
  Vec3<T> center;         // camera center in world coordinates
  bool delta_enabled = false;
};

// One camera sample: fixed calibration plus the learnable pose delta and the
// learnable per-image affine color transform (identity at initialization and
// at novel-view evaluation).
template <class T>
struct CameraFrame {
  Mat4<T> extrinsic = Mat4<T>::Identity();  // world-to-camera
  Intrinsics<T> intrinsics;
  int width = 0;
  int height = 0;
  double timestamp = 0.0;
  int traversal_id = 0;
  int frame_id = 0;
  int camera_id = 0;

  Vec6<T> pose_delta = Vec6<T>::Zero();      // (omega, nu)
  Vec6<T> pose_delta_grad = Vec6<T>::Zero();
  Vec6<T> pose_delta_m1 = Vec6<T>::Zero();
  Vec6<T> pose_delta_m2 = Vec6<T>::Zero();

  Mat3<T> affine_w = Mat3<T>::Identity();
  Vec3<T> affine_b = Vec3<T>::Zero();
  Mat3<T> affine_w_grad = Mat3<T>::Zero();
  Vec3<T> affine_b_grad = Vec3<T>::Zero();
  Mat3<T> affine_w_m1 = Mat3<T>::Zero();
  Mat3<T> affine_w_m2 = Mat3<T>::Zero();
  Vec3<T> affine_b_m1 = Vec3<T>::Zero();
  Vec3<T> affine_b_m2 = Vec3<T>::Zero();

  void validate() const {
    MTS_REQUIRE(intrinsics.fx > T(0) && intrinsics.fy > T(0),
                "camera: focal lengths must be positive");
    MTS_REQUIRE(width > 0 && height > 0, "camera: image size must be positive");
    Eigen::Matrix<T, 1, 4> bottom = extrinsic.row(3);
    MTS_REQUIRE(std::abs(bottom[0]) < T(1e-9) && std::abs(bottom[1]) < T(1e-9) &&
                    std::abs(bottom[2]) < T(1e-9) && std::abs(bottom[3] - T(1)) < T(1e-9),
                "camera: extrinsic bottom row must be (0,0,0,1)");
  }

  // Pose with the learnable correction applied (left-multiplied small rigid
  // transform). With apply_delta = false the stored extrinsic is used verbatim.
  CameraPose<T> effective_pose(bool apply_delta) const {
    CameraPose<T> p;
    p.rot_base = extrinsic.template topLeftCorner<3, 3>();
    p.trans_base = extrinsic.template topRightCorner<3, 1>();
    p.delta_enabled = apply_delta;
    if (apply_delta) {
      Vec3<T> omega = pose_delta.template head<3>();
      Vec3<T> nu = pose_delta.template tail<3>();
      p.quat_delta = so3_exp_quat(omega);
      p.rot_delta = quat_to_rot_unit(p.quat_delta);
      p.rot = p.rot_delta * p.rot_base;
      p.trans = p.rot_delta * p.trans_base + nu;
    } else {
      p.quat_delta = Vec4<T>(T(1), T(0), T(0), T(0));
      p.rot_delta = Mat3<T>::Identity();
      p.rot = p.rot_base;
      p.trans = p.trans_base;
    }
    p.center = -p.rot.transpose() * p.trans;
    return p;
  }
};

}  // namespace mtsplat
