#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtsplat/camera.hpp"
#include "mtsplat/scene_graph.hpp"

namespace mtsplat {

// Learning-rate schedule of one parameter group: linear warmup from zero,
// then exponential interpolation from the initial to the final rate over the
// configured total step count.
struct ParamGroupSchedule {
  std::string name;
  double initial_lr = 1e-3;
  double final_lr = 1e-3;
  int warmup_steps = 0;

  double lr_at(std::int64_t step, std::int64_t total_steps) const {
    double t = total_steps > 0
                   ? std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps))
                   : 1.0;
    double lr = initial_lr * std::pow(final_lr / initial_lr, t);
    if (warmup_steps > 0 && step < warmup_steps)
      lr *= static_cast<double>(step) / static_cast<double>(warmup_steps);
    return lr;
  }
};

enum class ParamGroup : int {
  kMeans = 0,
  kStaticDc,
  kAppearanceRest,
  kTransientDc,
  kTransientRest,
  kOpacities,
  kScales,
  kQuats,
  kCameraPose,
  kCameraAffine,
  kInsRotation,
  kInsTranslation,
  kCount
};

inline const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kMeans: return "means";
    case ParamGroup::kStaticDc: return "static.features_dc";
    case ParamGroup::kAppearanceRest: return "appearance.features_rest";
    case ParamGroup::kTransientDc: return "transient.features_dc";
    case ParamGroup::kTransientRest: return "transient.feature_rest";
    case ParamGroup::kOpacities: return "opacities";
    case ParamGroup::kScales: return "scales";
    case ParamGroup::kQuats: return "quats";
    case ParamGroup::kCameraPose: return "camera_pose_opt";
    case ParamGroup::kCameraAffine: return "camera_affine";
    case ParamGroup::kInsRotation: return "ins_rotation";
    case ParamGroup::kInsTranslation: return "ins_translation";
    default: return "?";
  }
}

// Training hyperparameter table: every learnable parameter lives in exactly
// one of these scheduled groups.
inline std::vector<ParamGroupSchedule> default_schedules() {
  return {
      {"means", 8e-4, 8e-6, 0},
      {"static.features_dc", 1.25e-4, 1.25e-4, 0},
      {"appearance.features_rest", 1.25e-4, 1.25e-4, 0},
      {"transient.features_dc", 2.5e-3, 2.5e-3, 0},
      {"transient.feature_rest", 1.25e-4, 1.25e-4, 0},
      {"opacities", 5e-2, 5e-2, 0},
      {"scales", 5e-3, 5e-3, 0},
      {"quats", 1e-3, 1e-3, 0},
      {"camera_pose_opt", 1e-4, 5e-7, 1500},
      {"camera_affine", 1e-3, 1e-4, 5000},
      {"ins_rotation", 1e-5, 1e-6, 0},
      {"ins_translation", 5e-4, 1e-4, 0},
  };
}

struct DensifyConfig {
  double grad_threshold = 0.001;           // mean 2D position-gradient magnitude
  double densify_scale_threshold = 0.2;    // meters: split above, clone below
  double cull_scale_threshold = 0.5;       // meters
  double opacity_cull = 0.005;
  int interval = 100;
  int start_step = 500;
  int stop_step = 15000;
  int opacity_reset_interval = 3000;
  double opacity_reset_value = 0.01;
  double split_scale_factor = 1.6;
  int split_children = 2;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps_positions = 1e-15;
  double eps_default = 1e-8;
};

namespace detail {

// Flat scalar view over one learnable array and its grad/moment mirrors.
// All parameter containers here are densely packed (checked below).
template <class T>
struct ScalarSpan {
  T* value;
  T* grad;
  T* m1;
  T* m2;
  std::size_t count;
};

template <class T, class V>
void add_param_span(Param<T, V>& p, std::vector<ScalarSpan<T>>* spans) {
  if (p.size() == 0) return;
  constexpr std::size_t per = sizeof(V) / sizeof(T);
  static_assert(sizeof(V) % sizeof(T) == 0, "parameter rows must be densely packed");
  spans->push_back({reinterpret_cast<T*>(p.value.data()), reinterpret_cast<T*>(p.grad.data()),
                    reinterpret_cast<T*>(p.m1.data()), reinterpret_cast<T*>(p.m2.data()),
                    p.size() * per});
}

template <class T>
void add_raw_span(T* v, T* g, T* m1, T* m2, std::size_t n, std::vector<ScalarSpan<T>>* spans) {
  spans->push_back({v, g, m1, m2, n});
}

}  // namespace detail

// Enumerates the scalar storage of one parameter group across the graph and
// cameras.
template <class T>
std::vector<detail::ScalarSpan<T>> collect_group(SceneGraph<T>& graph,
                                                 std::vector<CameraFrame<T>*>& cameras,
                                                 ParamGroup group) {
  using detail::add_param_span;
  using detail::add_raw_span;
  std::vector<detail::ScalarSpan<T>> spans;
  GaussianSet<T>& st = graph.static_node.gaussians;
  switch (group) {
    case ParamGroup::kMeans:
      add_param_span(st.positions, &spans);
      for (auto& n : graph.transients) add_param_span(n.gaussians.positions, &spans);
      break;
    case ParamGroup::kStaticDc:
      add_param_span(st.sh_base, &spans);
      break;
    case ParamGroup::kAppearanceRest:
      for (auto& [tid, node] : graph.appearance) add_param_span(node.residuals, &spans);
      break;
    case ParamGroup::kTransientDc:
      for (auto& n : graph.transients) add_param_span(n.gaussians.sh_base, &spans);
      break;
    case ParamGroup::kTransientRest:
      for (auto& n : graph.transients) add_param_span(n.gaussians.sh_rest, &spans);
      break;
    case ParamGroup::kOpacities:
      add_param_span(st.opacity_logits, &spans);
      for (auto& n : graph.transients) add_param_span(n.gaussians.opacity_logits, &spans);
      break;
    case ParamGroup::kScales:
      add_param_span(st.log_scales, &spans);
      for (auto& n : graph.transients) add_param_span(n.gaussians.log_scales, &spans);
      break;
    case ParamGroup::kQuats:
      add_param_span(st.quaternions, &spans);
      for (auto& n : graph.transients) add_param_span(n.gaussians.quaternions, &spans);
      break;
    case ParamGroup::kCameraPose:
      for (auto* cam : cameras)
        add_raw_span(cam->pose_delta.data(), cam->pose_delta_grad.data(),
                     cam->pose_delta_m1.data(), cam->pose_delta_m2.data(), 6, &spans);
      break;
    case ParamGroup::kCameraAffine:
      for (auto* cam : cameras) {
        add_raw_span(cam->affine_w.data(), cam->affine_w_grad.data(), cam->affine_w_m1.data(),
                     cam->affine_w_m2.data(), 9, &spans);
        add_raw_span(cam->affine_b.data(), cam->affine_b_grad.data(), cam->affine_b_m1.data(),
                     cam->affine_b_m2.data(), 3, &spans);
      }
      break;
    case ParamGroup::kInsRotation:
      for (auto& n : graph.transients)
        for (auto& kf : n.keyframes)
          add_raw_span(kf.delta_quat.data(), kf.delta_quat_grad.data(), kf.delta_quat_m1.data(),
                       kf.delta_quat_m2.data(), 4, &spans);
      break;
    case ParamGroup::kInsTranslation:
      for (auto& n : graph.transients)
        for (auto& kf : n.keyframes)
          add_raw_span(kf.translation.data(), kf.translation_grad.data(),
                       kf.translation_m1.data(), kf.translation_m2.data(), 3, &spans);
      break;
    default:
      MTS_CHECK(false, "unknown parameter group");
  }
  return spans;
}

// One Adam update of a parameter group with bias correction. Returns false
// (and applies nothing) when any gradient in the group is non-finite.
template <class T>
bool adam_step(std::vector<detail::ScalarSpan<T>>& spans, T lr, T eps, const AdamConfig& cfg,
               std::int64_t t) {
  MTS_CHECK(t >= 1, "adam step count starts at 1");
  for (const auto& s : spans)
    for (std::size_t i = 0; i < s.count; ++i)
      if (!std::isfinite(static_cast<double>(s.grad[i]))) return false;
  const T b1 = T(cfg.beta1), b2 = T(cfg.beta2);
  const T bc1 = T(1) - std::pow(b1, T(t));
  const T bc2 = T(1) - std::pow(b2, T(t));
  for (const auto& s : spans) {
    for (std::size_t i = 0; i < s.count; ++i) {
      const T g = s.grad[i];
      s.m1[i] = b1 * s.m1[i] + (T(1) - b1) * g;
      s.m2[i] = b2 * s.m2[i] + (T(1) - b2) * g * g;
      const T mhat = s.m1[i] / bc1;
      const T vhat = s.m2[i] / bc2;
      s.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  return true;
}

// Accumulated 2D position-gradient statistics driving density control.
struct DensifyStats {
  std::vector<double> grad_sum;
  std::vector<int> seen;

  void resize(std::size_t n) {
    grad_sum.assign(n, 0.0);
    seen.assign(n, 0);
  }
  void remap(const std::vector<std::size_t>& keep, std::size_t appended) {
    std::vector<double> gs;
    std::vector<int> sn;
    gs.reserve(keep.size() + appended);
    sn.reserve(keep.size() + appended);
    for (std::size_t i : keep) {
      gs.push_back(grad_sum[i]);
      sn.push_back(seen[i]);
    }
    gs.resize(keep.size() + appended, 0.0);
    sn.resize(keep.size() + appended, 0);
    grad_sum = std::move(gs);
    seen = std::move(sn);
  }
  void reset() {
    std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
    std::fill(seen.begin(), seen.end(), 0);
  }
};

namespace detail {

template <class T>
T gauss_sample(std::mt19937& rng) {
  // Box-Muller on explicit engine draws keeps sampling platform-independent
  double u1 = (static_cast<double>(rng()) + 1.0) / 4294967297.0;
  double u2 = static_cast<double>(rng()) / 4294967296.0;
  return T(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2));
}

struct DensifyPlan {
  std::vector<std::size_t> keep;
  std::vector<std::size_t> clone_parents;  // appended copies
  std::vector<std::size_t> split_parents;  // appended sampled children (x2)
};

template <class T>
DensifyPlan plan_density_control(const GaussianSet<T>& set, const DensifyStats& stats,
                                 const DensifyConfig& cfg) {
  DensifyPlan plan;
  const std::size_t n = set.size();
  MTS_CHECK(stats.grad_sum.size() == n, "densify stats out of lockstep");
  for (std::size_t i = 0; i < n; ++i) {
    const double alpha = sigmoid(static_cast<double>(set.opacity_logits.value[i]));
    const double smax =
        std::exp(static_cast<double>(set.log_scales.value[i].maxCoeff()));
    const bool cull = alpha < cfg.opacity_cull || smax > cfg.cull_scale_threshold;
    if (cull) continue;
    const double mean_grad =
        stats.seen[i] > 0 ? stats.grad_sum[i] / stats.seen[i] : 0.0;
    if (mean_grad > cfg.grad_threshold) {
      if (smax < cfg.densify_scale_threshold) {
        plan.keep.push_back(i);
        plan.clone_parents.push_back(i);
      } else {
        plan.split_parents.push_back(i);  // parent removed
      }
    } else {
      plan.keep.push_back(i);
    }
  }
  return plan;
}

// Applies a densification plan to one Gaussian set; children from splits are
// sampled from the parent's own distribution and shrink by the split factor.
template <class T>
std::vector<std::size_t> apply_plan(GaussianSet<T>* set, const DensifyPlan& plan,
                                    const DensifyConfig& cfg, std::mt19937* rng) {
  std::vector<Vec3<T>> add_pos, add_scale, add_base;
  std::vector<Vec4<T>> add_quat;
  std::vector<T> add_logit;
  std::vector<ShRest<T>> add_rest;
  std::vector<std::size_t> parents;  // satellite arrays copy these rows

  auto push_row = [&](std::size_t i, const Vec3<T>& pos, const Vec3<T>& log_scale) {
    add_pos.push_back(pos);
    add_quat.push_back(set->quaternions.value[i]);
    add_scale.push_back(log_scale);
    add_logit.push_back(set->opacity_logits.value[i]);
    add_base.push_back(set->sh_base.value[i]);
    if (set->has_sh_rest) add_rest.push_back(set->sh_rest.value[i]);
    parents.push_back(i);
  };

  for (std::size_t i : plan.clone_parents)
    push_row(i, set->positions.value[i], set->log_scales.value[i]);
  const T shrink = T(std::log(cfg.split_scale_factor));
  for (std::size_t i : plan.split_parents) {
    const Vec4<T> q = set->quaternions.value[i] / set->quaternions.value[i].norm();
    const Mat3<T> rot = quat_to_rot_unit(q);
    const Vec3<T> scale = activated_scale(set->log_scales.value[i]);
    for (int c = 0; c < cfg.split_children; ++c) {
      Vec3<T> z(gauss_sample<T>(*rng), gauss_sample<T>(*rng), gauss_sample<T>(*rng));
      Vec3<T> pos = set->positions.value[i] + rot * scale.cwiseProduct(z);
      push_row(i, pos, Vec3<T>(set->log_scales.value[i].array() - shrink));
    }
  }

  set->positions.remap(plan.keep, add_pos);
  set->quaternions.remap(plan.keep, add_quat);
  set->log_scales.remap(plan.keep, add_scale);
  set->opacity_logits.remap(plan.keep, add_logit);
  set->sh_base.remap(plan.keep, add_base);
  if (set->has_sh_rest) set->sh_rest.remap(plan.keep, add_rest);
  return parents;
}

}  // namespace detail

struct DensifyOutcome {
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t culled = 0;
  std::size_t static_count = 0;
};

// Adaptive density control over the static node (with appearance residuals in
// lockstep across every traversal) and all transient nodes. Also handles the
// periodic opacity reset. Stats arrays are remapped alongside.
template <class T>
DensifyOutcome density_control(SceneGraph<T>* graph, DensifyStats* static_stats,
                               std::vector<DensifyStats>* transient_stats,
                               const DensifyConfig& cfg, std::int64_t step, std::mt19937* rng) {
  DensifyOutcome out;

  {
    GaussianSet<T>& st = graph->static_node.gaussians;
    const std::size_t before = st.size();
    auto plan = detail::plan_density_control(st, *static_stats, cfg);
    auto parents = detail::apply_plan(&st, plan, cfg, rng);
    out.cloned += plan.clone_parents.size();
    out.split += plan.split_parents.size();
    out.culled += before - plan.keep.size() - plan.split_parents.size();
    for (auto& [tid, node] : graph->appearance) {
      std::vector<ShRest<T>> add;
      add.reserve(parents.size());
      for (std::size_t p : parents) add.push_back(node.residuals.value[p]);
      node.residuals.remap(plan.keep, add);
      MTS_CHECK(node.residuals.size() == st.size(),
                "appearance residuals out of lockstep after density control");
    }
    static_stats->remap(plan.keep, parents.size());
    out.static_count = st.size();
  }

  for (std::size_t n = 0; n < graph->transients.size(); ++n) {
    GaussianSet<T>& set = graph->transients[n].gaussians;
    const std::size_t before = set.size();
    auto plan = detail::plan_density_control(set, (*transient_stats)[n], cfg);
    auto parents = detail::apply_plan(&set, plan, cfg, rng);
    out.cloned += plan.clone_parents.size();
    out.split += plan.split_parents.size();
    out.culled += before - plan.keep.size() - plan.split_parents.size();
    (*transient_stats)[n].remap(plan.keep, parents.size());
  }

  if (cfg.opacity_reset_interval > 0 && step > 0 && step % cfg.opacity_reset_interval == 0) {
    const T cap = logit(T(cfg.opacity_reset_value));
    for (auto& v : graph->static_node.gaussians.opacity_logits.value) v = std::min(v, cap);
    for (auto& node : graph->transients)
      for (auto& v : node.gaussians.opacity_logits.value) v = std::min(v, cap);
  }
  graph->check_invariants();
  return out;
}

}  // namespace mtsplat
