#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <utility>
#include <vector>

#include "mtsplat/camera.hpp"
#include "mtsplat/image.hpp"
#include "mtsplat/scene_graph.hpp"

namespace mtsplat {

template <class T>
struct RasterizerOptions {
  T z_near = T(0.2);
  T blur = T(0.3);                  // 2D covariance dilation, px^2
  T frustum_margin = T(0.5);        // center cull beyond this image-size fraction
  T alpha_clip = T(0.999);
  T alpha_cutoff = T(1.0 / 255.0);  // per-pixel contributions below this are skipped
  T transmittance_min = T(1e-4);    // front-to-back termination
  T alpha_norm_eps = T(1e-4);       // depth/normal normalization guard
  Vec3<T> background = Vec3<T>::Zero();
  int tile_size = 16;
  int workers = 1;
  bool apply_pose_delta = true;
  int l_max = 3;
  bool record_transient_weight = false;
};

// A Gaussian surviving projection. The binning radius is chosen so that any
// contribution outside it is below alpha_cutoff, which keeps the tiled path
// exactly equal to a full per-pixel reference using the same cutoff.
template <class T>
struct ProjectedSplat {
  std::int32_t index = -1;  // into the render view
  Vec2<T> mean2d = Vec2<T>::Zero();
  T cov_a = T(0), cov_b = T(0), cov_c = T(0);    // 2D covariance (a b; b c)
  T conic_a = T(0), conic_b = T(0), conic_c = T(0);
  T view_depth = T(0);
  T alpha = T(0);            // activated opacity
  Vec3<T> rgb = Vec3<T>::Zero();
  int clamp_mask = 0;
  Vec3<T> normal_cam = Vec3<T>::Zero();  // camera-facing sign applied
  T normal_sign = T(1);
  T radius = T(0);
};

template <class T>
struct RenderBuffers {
  Image<T> color;   // h x w x 3
  Image<T> depth;   // h x w, expected depth (meters), alpha-normalized
  Image<T> normal;  // h x w x 3, camera frame, alpha-normalized
  Image<T> alpha;   // h x w accumulated opacity

  RenderBuffers() = default;
  RenderBuffers(int w, int h)
      : color(w, h, 3), depth(w, h, 1), normal(w, h, 3), alpha(w, h, 1) {}
};

// Per-pixel upstream gradients for the backward pass, in the same
// (normalized) space as the forward buffers.
template <class T>
struct PixelGrads {
  Image<T> color;
  Image<T> depth;
  Image<T> normal;
  Image<T> alpha;

  PixelGrads(int w, int h)
      : color(w, h, 3), depth(w, h, 1), normal(w, h, 3), alpha(w, h, 1) {}
};

// Everything the backward pass needs to replay compositing exactly.
template <class T>
struct RenderResult {
  RenderBuffers<T> buffers;
  Image<T> transient_weight;  // optional, see options

  RenderView<T> view;
  CameraPose<T> pose;
  std::vector<ProjectedSplat<T>> splats;              // sorted by view depth
  std::vector<std::vector<std::int32_t>> tile_lists;  // indices into splats
  Image<T> final_transmittance;
  Image<std::int32_t> last_contrib;  // position in the tile list, -1 if none
  int tiles_x = 0, tiles_y = 0;
};

namespace detail {

template <class T>
bool project_one(const RenderView<T>& view, std::size_t i, const CameraPose<T>& pose,
                 const Intrinsics<T>& K, int width, int height,
                 const RasterizerOptions<T>& opts, ProjectedSplat<T>* out) {
  const T alpha = sigmoid(view.opacity_logits[i]);
  if (alpha < opts.alpha_cutoff) return false;

  const Vec3<T> p_cam = pose.rot * view.positions[i] + pose.trans;
  const T z = p_cam[2];
  if (z <= opts.z_near) return false;

  const T inv_z = T(1) / z;
  Vec2<T> mean2d(K.fx * p_cam[0] * inv_z + K.cx, K.fy * p_cam[1] * inv_z + K.cy);
  // centers far outside the frustum are culled outright: the perspective
  // linearization is meaningless there and grazing splats would otherwise
  // smear across the image
  if (mean2d[0] < -opts.frustum_margin * T(width) ||
      mean2d[0] > (T(1) + opts.frustum_margin) * T(width) ||
      mean2d[1] < -opts.frustum_margin * T(height) ||
      mean2d[1] > (T(1) + opts.frustum_margin) * T(height))
    return false;

  const Vec4<T> q = view.quaternions[i] / view.quaternions[i].norm();
  const Mat3<T> rot = quat_to_rot_unit(q);
  const Vec3<T> scale = activated_scale(view.log_scales[i]);
  const Mat3<T> sigma = covariance(rot, scale);

  Mat23<T> jac;
  jac << K.fx * inv_z, T(0), -K.fx * p_cam[0] * inv_z * inv_z,
         T(0), K.fy * inv_z, -K.fy * p_cam[1] * inv_z * inv_z;
  const Mat23<T> m = jac * pose.rot;
  const Mat2<T> cov2d_raw = m * sigma * m.transpose();
  const T a = cov2d_raw(0, 0) + opts.blur;
  const T b = cov2d_raw(0, 1);
  const T c = cov2d_raw(1, 1) + opts.blur;
  const T det = a * c - b * b;
  if (!(det > T(0))) return false;  // degenerate: skip

  const T mid = T(0.5) * (a + c);
  const T lambda_max = mid + std::sqrt(std::max(T(0), mid * mid - det));
  const T radius =
      std::sqrt(std::max(T(0), T(2) * std::log(alpha / opts.alpha_cutoff))) * std::sqrt(lambda_max);
  if (mean2d[0] + radius < T(0) || mean2d[0] - radius > T(width) ||
      mean2d[1] + radius < T(0) || mean2d[1] - radius > T(height))
    return false;

  out->index = static_cast<std::int32_t>(i);
  out->mean2d = mean2d;
  out->cov_a = a;
  out->cov_b = b;
  out->cov_c = c;
  const T inv_det = T(1) / det;
  out->conic_a = c * inv_det;
  out->conic_b = -b * inv_det;
  out->conic_c = a * inv_det;
  out->view_depth = z;
  out->alpha = alpha;
  out->radius = radius;

  Vec3<T> to_point = view.positions[i] - pose.center;
  T dist = to_point.norm();
  Vec3<T> dir = dist > T(0) ? Vec3<T>(to_point / dist) : Vec3<T>(T(0), T(0), T(1));
  out->rgb = eval_sh(view.sh_base[i], view.sh_rest[i], dir, opts.l_max, &out->clamp_mask);

  const Vec3<T> n_world = rot.col(min_scale_axis(scale));
  Vec3<T> n_cam = pose.rot * n_world;
  out->normal_sign = n_cam.dot(p_cam) > T(0) ? T(-1) : T(1);
  out->normal_cam = out->normal_sign * n_cam;
  return true;
}

}  // namespace detail

// Projection, depth sort, tile binning, and front-to-back compositing of
// color, expected depth, and normals. Deterministic: tiles are partitioned in
// fixed chunks and each pixel belongs to exactly one tile.
template <class T>
RenderResult<T> render_forward(RenderView<T> view_in, const CameraFrame<T>& camera,
                               const RasterizerOptions<T>& opts) {
  const int w = camera.width, h = camera.height;
  RenderResult<T> res;
  res.view = std::move(view_in);
  res.pose = camera.effective_pose(opts.apply_pose_delta);
  res.buffers = RenderBuffers<T>(w, h);
  res.final_transmittance = Image<T>(w, h, 1, T(1));
  res.last_contrib = Image<std::int32_t>(w, h, 1, -1);
  if (opts.record_transient_weight) res.transient_weight = Image<T>(w, h, 1, T(0));

  const RenderView<T>& view = res.view;
  const std::size_t n = view.size();

  // Project in parallel, then compact in index order for determinism.
  std::vector<ProjectedSplat<T>> projected(n);
  std::vector<std::uint8_t> keep(n, 0);
  parallel_for(n, opts.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t i = begin; i < end; ++i)
      keep[i] = detail::project_one(view, i, res.pose, camera.intrinsics, w, h, opts,
                                    &projected[i])
                    ? 1
                    : 0;
  });
  res.splats.reserve(n);
  for (std::size_t i = 0; i < n; ++i)
    if (keep[i]) res.splats.push_back(projected[i]);

  // Stable depth sort; ties keep ascending Gaussian index.
  std::stable_sort(res.splats.begin(), res.splats.end(),
                   [](const ProjectedSplat<T>& x, const ProjectedSplat<T>& y) {
                     return x.view_depth < y.view_depth;
                   });

  const int tile = opts.tile_size;
  res.tiles_x = (w + tile - 1) / tile;
  res.tiles_y = (h + tile - 1) / tile;
  res.tile_lists.assign(static_cast<std::size_t>(res.tiles_x) * res.tiles_y, {});
  for (std::size_t s = 0; s < res.splats.size(); ++s) {
    const auto& sp = res.splats[s];
    int x0 = std::max(0, static_cast<int>(std::floor(sp.mean2d[0] - sp.radius)) / tile);
    int x1 = std::min(res.tiles_x - 1,
                      static_cast<int>(std::floor(sp.mean2d[0] + sp.radius)) / tile);
    int y0 = std::max(0, static_cast<int>(std::floor(sp.mean2d[1] - sp.radius)) / tile);
    int y1 = std::min(res.tiles_y - 1,
                      static_cast<int>(std::floor(sp.mean2d[1] + sp.radius)) / tile);
    for (int ty = y0; ty <= y1; ++ty)
      for (int tx = x0; tx <= x1; ++tx)
        res.tile_lists[static_cast<std::size_t>(ty) * res.tiles_x + tx].push_back(
            static_cast<std::int32_t>(s));
  }

  const std::size_t n_tiles = res.tile_lists.size();
  parallel_for(n_tiles, opts.workers, [&](std::size_t begin, std::size_t end, int) {
    for (std::size_t t = begin; t < end; ++t) {
      const auto& list = res.tile_lists[t];
      const int tx = static_cast<int>(t % res.tiles_x);
      const int ty = static_cast<int>(t / res.tiles_x);
      const int px0 = tx * tile, px1 = std::min(w, px0 + tile);
      const int py0 = ty * tile, py1 = std::min(h, py0 + tile);
      for (int py = py0; py < py1; ++py) {
        for (int px = px0; px < px1; ++px) {
          const T fx = T(px) + T(0.5), fy = T(py) + T(0.5);
          T trans = T(1);
          Vec3<T> color = Vec3<T>::Zero();
          Vec3<T> normal = Vec3<T>::Zero();
          T depth = T(0), acc_alpha = T(0), tsnt_w = T(0);
          std::int32_t last = -1;
          for (std::size_t pos = 0; pos < list.size(); ++pos) {
            const ProjectedSplat<T>& sp = res.splats[list[pos]];
            const T dx = fx - sp.mean2d[0];
            const T dy = fy - sp.mean2d[1];
            const T power = T(-0.5) * (sp.conic_a * dx * dx + sp.conic_c * dy * dy) -
                            sp.conic_b * dx * dy;
            if (power > T(0)) continue;
            T a = sp.alpha * std::exp(power);
            if (a < opts.alpha_cutoff) continue;
            if (a > opts.alpha_clip) a = opts.alpha_clip;
            const T weight = a * trans;
            color += weight * sp.rgb;
            depth += weight * sp.view_depth;
            normal += weight * sp.normal_cam;
            acc_alpha += weight;
            if (opts.record_transient_weight &&
                view.prov[sp.index].kind == NodeKind::kTransient)
              tsnt_w += weight;
            trans *= (T(1) - a);
            last = static_cast<std::int32_t>(pos);
            if (trans < opts.transmittance_min) break;
          }
          color += trans * opts.background;
          for (int c = 0; c < 3; ++c) res.buffers.color.at(px, py, c) = color[c];
          res.buffers.alpha.at(px, py) = acc_alpha;
          const bool norm_ok = acc_alpha > opts.alpha_norm_eps;
          res.buffers.depth.at(px, py) = norm_ok ? depth / acc_alpha : T(0);
          for (int c = 0; c < 3; ++c)
            res.buffers.normal.at(px, py, c) = norm_ok ? normal[c] / acc_alpha : T(0);
          res.final_transmittance.at(px, py) = trans;
          res.last_contrib.at(px, py) = last;
          if (opts.record_transient_weight) res.transient_weight.at(px, py) = tsnt_w;
        }
      }
    }
  });
  return res;
}

template <class T>
RenderResult<T> render(const SceneGraph<T>& graph, const CameraFrame<T>& camera, int traversal,
                       double t, const RasterizerOptions<T>& opts, int appearance_id = -1) {
  return render_forward(assemble_subgraph(graph, traversal, t, appearance_id), camera, opts);
}

namespace detail {

// Per-splat gradients accumulated while replaying compositing.
template <class T>
struct SplatGrads {
  Vec3<T> rgb = Vec3<T>::Zero();
  T view_depth = T(0);
  Vec3<T> normal = Vec3<T>::Zero();
  Vec2<T> mean2d = Vec2<T>::Zero();
  T conic_a = T(0), conic_b = T(0), conic_c = T(0);
  T alpha = T(0);
};

template <class T>
struct PoseAccum {
  Mat3<T> rot = Mat3<T>::Zero();     // dL/d(pose rotation matrix)
  Vec4<T> quat = Vec4<T>::Zero();    // dL/d(effective pose quaternion)
  Vec3<T> trans = Vec3<T>::Zero();
};

template <class T>
struct CameraAccum {
  Mat3<T> rot_delta = Mat3<T>::Zero();
  Vec3<T> nu = Vec3<T>::Zero();
  Vec3<T> center = Vec3<T>::Zero();

  void add(const CameraAccum& o) {
    rot_delta += o.rot_delta;
    nu += o.nu;
    center += o.center;
  }
};

}  // namespace detail

// Analytic adjoint of the forward pass. Accumulates gradients into the graph
// node parameters (through the provenance tags and transient pose chains) and
// into the camera pose delta. Per-worker accumulators are reduced in worker
// order, so results depend only on the worker count.
template <class T>
void render_backward(const RenderResult<T>& res, const PixelGrads<T>& pixel_grads,
                     const RasterizerOptions<T>& opts, SceneGraph<T>* graph,
                     CameraFrame<T>* camera,
                     std::vector<T>* view_mean2d_grad_norm = nullptr) {
  const int w = camera->width, h = camera->height;
  MTS_CHECK(pixel_grads.color.width == w && pixel_grads.color.height == h,
            "render_backward: pixel gradient shape mismatch");
  const RenderView<T>& view = res.view;
  const CameraPose<T>& pose = res.pose;
  const Intrinsics<T>& K = camera->intrinsics;
  const std::size_t n_splats = res.splats.size();
  const int tile = opts.tile_size;

  int workers = std::max(1, opts.workers);
  std::vector<std::vector<detail::SplatGrads<T>>> worker_grads(
      workers, std::vector<detail::SplatGrads<T>>(n_splats));

  // Pass 1: replay compositing per tile, back to front.
  const std::size_t n_tiles = res.tile_lists.size();
  parallel_for(n_tiles, workers, [&](std::size_t begin, std::size_t end, int worker) {
    auto& grads = worker_grads[worker];
    for (std::size_t t = begin; t < end; ++t) {
      const auto& list = res.tile_lists[t];
      if (list.empty()) continue;
      const int tx = static_cast<int>(t % res.tiles_x);
      const int ty = static_cast<int>(t / res.tiles_x);
      const int px0 = tx * tile, px1 = std::min(w, px0 + tile);
      const int py0 = ty * tile, py1 = std::min(h, py0 + tile);
      for (int py = py0; py < py1; ++py) {
        for (int px = px0; px < px1; ++px) {
          const std::int32_t last = res.last_contrib.at(px, py);
          if (last < 0) continue;
          const T fx = T(px) + T(0.5), fy = T(py) + T(0.5);
          const T acc_alpha = res.buffers.alpha.at(px, py);
          const T t_final = res.final_transmittance.at(px, py);

          Vec3<T> g_color(pixel_grads.color.at(px, py, 0), pixel_grads.color.at(px, py, 1),
                          pixel_grads.color.at(px, py, 2));
          Vec3<T> g_normal_n(pixel_grads.normal.at(px, py, 0),
                             pixel_grads.normal.at(px, py, 1),
                             pixel_grads.normal.at(px, py, 2));
          T g_depth_n = pixel_grads.depth.at(px, py);
          T g_alpha = pixel_grads.alpha.at(px, py);

          // Undo the alpha normalization of depth and normal.
          Vec3<T> g_normal_raw = Vec3<T>::Zero();
          T g_depth_raw = T(0);
          if (acc_alpha > opts.alpha_norm_eps) {
            g_depth_raw = g_depth_n / acc_alpha;
            g_alpha -= g_depth_n * res.buffers.depth.at(px, py) / acc_alpha;
            for (int c = 0; c < 3; ++c) {
              g_normal_raw[c] = g_normal_n[c] / acc_alpha;
              g_alpha -= g_normal_n[c] * res.buffers.normal.at(px, py, c) / acc_alpha;
            }
          }
          const T g_t_final = opts.background.dot(g_color);

          T suffix = t_final * g_t_final;
          T t_after = t_final;
          for (std::int32_t pos = last; pos >= 0; --pos) {
            const ProjectedSplat<T>& sp = res.splats[list[pos]];
            const T dx = fx - sp.mean2d[0];
            const T dy = fy - sp.mean2d[1];
            const T power = T(-0.5) * (sp.conic_a * dx * dx + sp.conic_c * dy * dy) -
                            sp.conic_b * dx * dy;
            if (power > T(0)) continue;
            const T g_exp = sp.alpha * std::exp(power);
            if (g_exp < opts.alpha_cutoff) continue;
            const bool clipped = g_exp > opts.alpha_clip;
            const T a = clipped ? opts.alpha_clip : g_exp;
            const T one_minus = T(1) - a;
            const T t_before = t_after / one_minus;
            const T weight = a * t_before;

            detail::SplatGrads<T>& g = grads[list[pos]];
            g.rgb += weight * g_color;
            g.view_depth += weight * g_depth_raw;
            g.normal += weight * g_normal_raw;

            const T g_w = sp.rgb.dot(g_color) + sp.view_depth * g_depth_raw +
                          sp.normal_cam.dot(g_normal_raw) + g_alpha;
            if (!clipped) {
              const T g_a = t_before * g_w - suffix / one_minus;
              // a = alpha * exp(power)
              const T g_power = g_a * a;
              g.alpha += g_a * std::exp(power);
              g.mean2d[0] += g_power * (sp.conic_a * dx + sp.conic_b * dy);
              g.mean2d[1] += g_power * (sp.conic_c * dy + sp.conic_b * dx);
              g.conic_a += g_power * T(-0.5) * dx * dx;
              g.conic_b += g_power * -dx * dy;
              g.conic_c += g_power * T(-0.5) * dy * dy;
            }
            suffix += weight * g_w;
            t_after = t_before;
          }
        }
      }
    }
  });

  // Ordered reduction over workers.
  std::vector<detail::SplatGrads<T>>& total = worker_grads[0];
  for (int wk = 1; wk < workers; ++wk) {
    const auto& src = worker_grads[wk];
    parallel_for(n_splats, workers, [&](std::size_t begin, std::size_t end, int) {
      for (std::size_t s = begin; s < end; ++s) {
        total[s].rgb += src[s].rgb;
        total[s].view_depth += src[s].view_depth;
        total[s].normal += src[s].normal;
        total[s].mean2d += src[s].mean2d;
        total[s].conic_a += src[s].conic_a;
        total[s].conic_b += src[s].conic_b;
        total[s].conic_c += src[s].conic_c;
        total[s].alpha += src[s].alpha;
      }
    });
  }

  // Pass 2: chain per-splat gradients to node and camera parameters. Each
  // splat owns its target parameter rows, so scatters are race-free; shared
  // accumulators (camera, transient poses) are per-worker and reduced in order.
  GaussianSet<T>& st = graph->static_node.gaussians;
  AppearanceNode<T>& appr = graph->appearance.at(view.appearance_id);
  if (view_mean2d_grad_norm) view_mean2d_grad_norm->assign(view.size(), T(0));
  std::vector<detail::CameraAccum<T>> cam_acc(workers);
  std::vector<std::vector<detail::PoseAccum<T>>> pose_acc(
      workers, std::vector<detail::PoseAccum<T>>(view.transients.size()));

  parallel_for(n_splats, workers, [&](std::size_t begin, std::size_t end, int worker) {
    for (std::size_t s = begin; s < end; ++s) {
      const detail::SplatGrads<T>& g = total[s];
      const ProjectedSplat<T>& sp = res.splats[s];
      const std::size_t i = static_cast<std::size_t>(sp.index);
      if (view_mean2d_grad_norm) (*view_mean2d_grad_norm)[i] = g.mean2d.norm();

      // Recompute forward intermediates for this splat.
      const Vec3<T> x_world = view.positions[i];
      const Vec3<T> p_cam = pose.rot * x_world + pose.trans;
      const T z = p_cam[2];
      const T inv_z = T(1) / z;
      const Vec4<T> q_raw = view.quaternions[i];
      const Vec4<T> q_unit = q_raw / q_raw.norm();
      const Mat3<T> rot = quat_to_rot_unit(q_unit);
      const Vec3<T> scale = activated_scale(view.log_scales[i]);
      const Mat3<T> sigma = covariance(rot, scale);
      Mat23<T> jac;
      jac << K.fx * inv_z, T(0), -K.fx * p_cam[0] * inv_z * inv_z,
             T(0), K.fy * inv_z, -K.fy * p_cam[1] * inv_z * inv_z;
      const Mat23<T> m = jac * pose.rot;

      // Conic -> 2D covariance.
      Mat2<T> conic;
      conic << sp.conic_a, sp.conic_b, sp.conic_b, sp.conic_c;
      Mat2<T> g_conic_full;
      g_conic_full << g.conic_a, T(0.5) * g.conic_b, T(0.5) * g.conic_b, g.conic_c;
      const Mat2<T> g_cov2d = -conic * g_conic_full * conic;

      // cov2d = M Sigma M^T (+ blur I).
      const Mat23<T> g_m = T(2) * g_cov2d * m * sigma;
      const Mat3<T> g_sigma = m.transpose() * g_cov2d * m;

      Vec3<T> g_pcam = Vec3<T>::Zero();
      g_pcam[0] = g.mean2d[0] * K.fx * inv_z;
      g_pcam[1] = g.mean2d[1] * K.fy * inv_z;
      g_pcam[2] = -g.mean2d[0] * K.fx * p_cam[0] * inv_z * inv_z -
                  g.mean2d[1] * K.fy * p_cam[1] * inv_z * inv_z + g.view_depth;

      // M = J * R_pose: gradients through J's dependence on p_cam.
      const Mat3<T> g_rot_pose_m = jac.transpose() * g_m;  // dL/d(pose.rot) via M
      const Mat23<T> g_jac = g_m * pose.rot.transpose();
      g_pcam[0] += g_jac(0, 2) * (-K.fx * inv_z * inv_z);
      g_pcam[1] += g_jac(1, 2) * (-K.fy * inv_z * inv_z);
      g_pcam[2] += g_jac(0, 0) * (-K.fx * inv_z * inv_z) +
                   g_jac(1, 1) * (-K.fy * inv_z * inv_z) +
                   g_jac(0, 2) * (T(2) * K.fx * p_cam[0] * inv_z * inv_z * inv_z) +
                   g_jac(1, 2) * (T(2) * K.fy * p_cam[1] * inv_z * inv_z * inv_z);

      // Covariance chain.
      Mat3<T> g_rot_world = Mat3<T>::Zero();
      Vec3<T> g_scale = Vec3<T>::Zero();
      covariance_backward(rot, scale, g_sigma, &g_rot_world, &g_scale);

      // Normal chain: n = sign * R_pose * R_world.col(axis).
      const int axis = min_scale_axis(scale);
      const Vec3<T> n_world = rot.col(axis);
      Mat3<T> g_rot_pose = g_rot_pose_m;
      g_rot_pose += sp.normal_sign * g.normal * n_world.transpose();
      g_rot_world.col(axis) += sp.normal_sign * pose.rot.transpose() * g.normal;

      // SH color chain.
      Vec3<T> g_x_world = Vec3<T>::Zero();
      Vec3<T> g_center = Vec3<T>::Zero();
      {
        Vec3<T> g_base = Vec3<T>::Zero();
        Vec3<T> g_dir_unit = Vec3<T>::Zero();
        Vec3<T> to_point = x_world - pose.center;
        T dist = to_point.norm();
        if (dist > T(0)) {
          Vec3<T> dir = to_point / dist;
          ShRest<T> g_rest = zero_sh_rest<T>();
          eval_sh_backward(view.sh_base[i], view.sh_rest[i], dir, opts.l_max, sp.clamp_mask,
                           g.rgb, &g_base, view.sh_rest[i] ? &g_rest : nullptr, &g_dir_unit);
          Vec3<T> g_to_point = Vec3<T>::Zero();
          normalize_with_backward(to_point, g_dir_unit, &g_to_point);
          g_x_world += g_to_point;
          g_center -= g_to_point;
          // Scatter SH gradients (rows owned by this splat alone).
          const Provenance& pv = view.prov[i];
          if (pv.kind == NodeKind::kStatic) {
            st.sh_base.grad[pv.local] += g_base;
            ShRest<T>& dst = appr.residuals.grad[pv.local];
            for (int k = 0; k < kShRestMax; ++k) dst[k] += g_rest[k];
          } else {
            TransientNode<T>& node = graph->transients[view.transients[pv.node].graph_index];
            node.gaussians.sh_base.grad[pv.local] += g_base;
            ShRest<T>& dst = node.gaussians.sh_rest.grad[pv.local];
            for (int k = 0; k < kShRestMax; ++k) dst[k] += g_rest[k];
          }
        }
      }

      // Position chain: p_cam = R_pose x + t_pose.
      g_x_world += pose.rot.transpose() * g_pcam;
      g_rot_pose += g_pcam * x_world.transpose();

      // Activations.
      const T g_logit = g.alpha * sp.alpha * (T(1) - sp.alpha);
      const Vec3<T> g_log_scale = g_scale.cwiseProduct(scale);
      const Vec4<T> g_quat = quat_to_rot_backward(q_raw, g_rot_world);

      // Camera accumulations (pose.rot = R_delta * R_base; center path).
      if (pose.delta_enabled) {
        detail::CameraAccum<T>& ca = cam_acc[worker];
        ca.rot_delta += g_rot_pose * pose.rot_base.transpose();
        ca.nu += g_pcam;  // trans = R_delta t_base + nu contributes via p_cam only
        // t_base part of trans:
        ca.rot_delta += g_pcam * pose.trans_base.transpose();
        ca.center += g_center;
      }

      // Scatter to owning node.
      const Provenance& pv = view.prov[i];
      if (pv.kind == NodeKind::kStatic) {
        st.positions.grad[pv.local] += g_x_world;
        st.quaternions.grad[pv.local] += g_quat;
        st.log_scales.grad[pv.local] += g_log_scale;
        st.opacity_logits.grad[pv.local] += g_logit;
      } else {
        const TransientRef<T>& ref = view.transients[pv.node];
        TransientNode<T>& node = graph->transients[ref.graph_index];
        const PoseSample<T>& ps = ref.pose;
        // x_world = R_pose x_local + T_pose
        node.gaussians.positions.grad[pv.local] += ps.rot.transpose() * g_x_world;
        // q_view = normalize(q_pose * q_local)
        const Vec4<T> q_local = node.gaussians.quaternions.value[pv.local];
        const Vec4<T> qm = quat_mul(ps.quat, q_local);
        const T qn = qm.norm();
        const Vec4<T> qu = qm / qn;
        const Vec4<T> g_qm = (g_quat - qu * qu.dot(g_quat)) / qn;
        node.gaussians.quaternions.grad[pv.local] +=
            quat_left_matrix(ps.quat).transpose() * g_qm;
        node.gaussians.log_scales.grad[pv.local] += g_log_scale;
        node.gaussians.opacity_logits.grad[pv.local] += g_logit;
        if (ps.exact_keyframe >= 0) {
          detail::PoseAccum<T>& pa = pose_acc[worker][pv.node];
          pa.trans += g_x_world;
          pa.rot += g_x_world * node.gaussians.positions.value[pv.local].transpose();
          pa.quat += quat_right_matrix(q_local).transpose() * g_qm;
        }
      }
    }
  });

  // Ordered reductions.
  detail::CameraAccum<T> cam;
  for (int wk = 0; wk < workers; ++wk) cam.add(cam_acc[wk]);
  for (std::size_t tn = 0; tn < view.transients.size(); ++tn) {
    detail::PoseAccum<T> pa;
    for (int wk = 0; wk < workers; ++wk) {
      pa.rot += pose_acc[wk][tn].rot;
      pa.quat += pose_acc[wk][tn].quat;
      pa.trans += pose_acc[wk][tn].trans;
    }
    const TransientRef<T>& ref = view.transients[tn];
    TransientNode<T>& node = graph->transients[ref.graph_index];
    const PoseSample<T>& ps = ref.pose;
    if (ps.exact_keyframe < 0) continue;
    PoseKeyframe<T>& kf = node.keyframes[ps.exact_keyframe];
    kf.translation_grad += pa.trans;
    // Effective pose quaternion gets contributions from the rotation matrix
    // path and the quaternion composition path.
    Vec4<T> g_pose_quat = pa.quat + quat_to_rot_backward(ps.quat, pa.rot);
    // ps.quat = normalize(delta_quat * base_quat)
    const Vec4<T> qm = quat_mul(kf.delta_quat, kf.base_quat);
    const T qn = qm.norm();
    const Vec4<T> qu = qm / qn;
    const Vec4<T> g_qm = (g_pose_quat - qu * qu.dot(g_pose_quat)) / qn;
    kf.delta_quat_grad += quat_right_matrix(kf.base_quat).transpose() * g_qm;
  }

  if (pose.delta_enabled) {
    // Camera center: c = -R_base^T (t_base + R_delta^T nu).
    const Vec3<T> nu = camera->pose_delta.template tail<3>();
    cam.nu += -(pose.rot_delta * (pose.rot_base * cam.center));
    cam.rot_delta += nu * (-(pose.rot_base * cam.center)).transpose();
    const Vec3<T> omega = camera->pose_delta.template head<3>();
    const Vec4<T> g_qd = quat_to_rot_backward(pose.quat_delta, cam.rot_delta);
    const Vec3<T> g_omega = so3_exp_quat_backward(omega, g_qd);
    camera->pose_delta_grad.template head<3>() += g_omega;
    camera->pose_delta_grad.template tail<3>() += cam.nu;
  }
}

}  // namespace mtsplat
