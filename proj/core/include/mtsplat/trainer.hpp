#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <random>

#include "mtsplat/appearance.hpp"
#include "mtsplat/dataio.hpp"
#include "mtsplat/losses.hpp"
#include "mtsplat/optimizer.hpp"
#include "mtsplat/rasterizer.hpp"

namespace mtsplat {

// Ground truth and priors of one training view.
template <class T>
struct FrameTargets {
  Image<T> gt;                        // exposure-corrected ground truth
  Image<T> pseudo_depth;              // meters, <=0 invalid
  Image<T> pseudo_normal;             // camera frame
  Image<std::uint8_t> pseudo_normal_valid;
  std::vector<DepthSample<T>> lidar;  // projected sparse depth
  Image<std::uint8_t> mask;           // optional, 0 = excluded from supervision
  bool has_mask = false;
  int appearance_id = -1;             // -1: use the camera's traversal id
};

template <class T>
struct StepFlags {
  bool use_depth = true;
  bool use_normal = true;
  bool use_flatten = true;
  bool use_oob = true;
  bool apply_affine = true;
  bool with_grads = true;
};

// Renders one frame, evaluates the full training objective, and (optionally)
// backpropagates into every parameter group. This is the single code path
// shared by the trainer and by gradient-checking harnesses.
template <class T>
LossBreakdown<T> training_step_eval(SceneGraph<T>* graph, CameraFrame<T>* camera,
                                    const FrameTargets<T>& targets,
                                    const RasterizerOptions<T>& ropts, const LossWeights& weights,
                                    const NCCConfig& ncc_cfg, const FlattenConfig& flatten_cfg,
                                    const StepFlags<T>& flags,
                                    std::vector<T>* view_grad_norms = nullptr,
                                    RenderResult<T>* render_out = nullptr) {
  LossBreakdown<T> bd;
  const int traversal = camera->traversal_id;
  const int appearance = targets.appearance_id >= 0 ? targets.appearance_id : traversal;
  RenderResult<T> res =
      render(*graph, *camera, traversal, camera->timestamp, ropts, appearance);
  const int w = camera->width, h = camera->height;

  PixelGrads<T> pixel_grads(w, h);
  Image<T>* g_color = flags.with_grads ? &pixel_grads.color : nullptr;
  Image<T>* g_depth = flags.with_grads ? &pixel_grads.depth : nullptr;
  Image<T>* g_normal = flags.with_grads ? &pixel_grads.normal : nullptr;

  const Image<std::uint8_t>* mask = targets.has_mask ? &targets.mask : nullptr;

  // photometric, through the learnable per-image affine on the render side
  {
    Image<T> adjusted =
        flags.apply_affine ? camera_affine_apply(res.buffers.color, *camera) : res.buffers.color;
    if (flags.with_grads) {
      Image<T> g_adjusted(w, h, 3, T(0));
      photometric_loss<T>(adjusted, targets.gt, mask, T(weights.lambda_r), &bd.l1, &bd.ssim,
                          &bd.photometric_empty, &g_adjusted);
      if (flags.apply_affine)
        camera_affine_backward(res.buffers.color, g_adjusted, camera, g_color);
      else
        for (std::size_t i = 0; i < g_adjusted.data.size(); ++i)
          g_color->data[i] += g_adjusted.data[i];
    } else {
      photometric_loss<T>(adjusted, targets.gt, mask, T(weights.lambda_r), &bd.l1, &bd.ssim,
                          &bd.photometric_empty, nullptr);
    }
  }

  if (flags.use_depth) {
    Image<T> g_tmp(w, h, 1, T(0));
    bd.depth = depth_inv_l1<T>(res.buffers.depth, res.buffers.alpha, targets.lidar,
                               ropts.alpha_norm_eps, flags.with_grads ? &g_tmp : nullptr);
    if (flags.with_grads)
      for (std::size_t i = 0; i < g_tmp.data.size(); ++i)
        g_depth->data[i] += T(weights.lambda_depth) * g_tmp.data[i];
    Image<T> g_ncc(w, h, 1, T(0));
    bd.ncc = ncc_loss<T>(res.buffers.depth, targets.pseudo_depth, ncc_cfg, &bd.ncc_empty,
                         flags.with_grads ? &g_ncc : nullptr);
    if (flags.with_grads)
      for (std::size_t i = 0; i < g_ncc.data.size(); ++i)
        g_depth->data[i] += T(weights.lambda_ncc) * g_ncc.data[i];
  }

  if (flags.use_normal) {
    Image<T> g_tmp(w, h, 3, T(0));
    bd.normal = normal_loss<T>(res.buffers.normal, targets.pseudo_normal,
                               &targets.pseudo_normal_valid, mask,
                               flags.with_grads ? &g_tmp : nullptr);
    if (flags.with_grads)
      for (std::size_t i = 0; i < g_tmp.data.size(); ++i)
        g_normal->data[i] += T(weights.lambda_normal) * g_tmp.data[i];
  }

  if (flags.with_grads) render_backward(res, pixel_grads, ropts, graph, camera, view_grad_norms);

  if (flags.use_flatten) {
    std::vector<Vec3<T>> g_scales;
    if (flags.with_grads) g_scales.assign(res.view.size(), Vec3<T>::Zero());
    bd.flatten = flatten_loss<T>(res.view.log_scales, flatten_cfg,
                                 flags.with_grads ? &g_scales : nullptr);
    if (flags.with_grads) {
      GaussianSet<T>& st = graph->static_node.gaussians;
      for (std::size_t i = 0; i < res.view.size(); ++i) {
        const Provenance& pv = res.view.prov[i];
        Vec3<T> g = T(weights.lambda_flatten) * g_scales[i];
        if (pv.kind == NodeKind::kStatic)
          st.log_scales.grad[pv.local] += g;
        else
          graph->transients[res.view.transients[pv.node].graph_index]
              .gaussians.log_scales.grad[pv.local] += g;
      }
    }
  }

  if (flags.use_oob) {
    std::vector<TransientNode<T>*> nodes;
    for (auto& node : graph->transients)
      if (node.traversal_id == traversal) nodes.push_back(&node);
    bd.oob = oob_loss<T>(nodes, flags.with_grads, T(weights.lambda_oob));
  }

  if (render_out) *render_out = std::move(res);
  return bd;
}

struct TrainConfig {
  std::int64_t steps = 30000;
  unsigned seed = 0;
  int workers = 0;  // 0 = default worker count
  LossWeights weights;
  NCCConfig ncc;
  FlattenConfig flatten;
  DensifyConfig densify;
  AdamConfig adam;
  std::vector<ParamGroupSchedule> schedules = default_schedules();
  int log_interval = 10;
  bool pose_opt = true;
  bool no_normal_loss = false;
  bool no_depth_loss = false;
  Vec3<float> background = Vec3<float>::Zero();
};

// One loaded training view plus its precomputed targets.
struct TrainView {
  CameraFrame<float> camera;
  FrameTargets<float> targets;
};

struct TrainLogRow {
  std::int64_t step = 0;
  LossBreakdown<float> losses;
  float total = 0;
  std::size_t gaussian_count = 0;
};

// Adam training loop over all parameter groups with per-group schedules,
// density control on its interval, and deterministic seeded frame sampling.
class Trainer {
 public:
  Trainer(SceneGraph<float> graph, std::vector<TrainView> views, TrainConfig config)
      : graph_(std::move(graph)), views_(std::move(views)), config_(std::move(config)),
        rng_(config_.seed) {
    MTS_REQUIRE(!views_.empty(), "trainer needs at least one training view");
    graph_.check_invariants();
    static_stats_.resize(graph_.static_node.gaussians.size());
    transient_stats_.resize(graph_.transients.size());
    for (std::size_t n = 0; n < graph_.transients.size(); ++n)
      transient_stats_[n].resize(graph_.transients[n].gaussians.size());
    for (std::size_t g = 0; g < schedule_steps_.size(); ++g) schedule_steps_[g] = 0;
  }

  const SceneGraph<float>& graph() const { return graph_; }
  SceneGraph<float>& graph() { return graph_; }
  std::vector<TrainView>& views() { return views_; }
  const std::vector<TrainLogRow>& log() const { return log_; }
  std::int64_t step() const { return step_; }
  std::int64_t skipped_group_steps() const { return skipped_; }

  RasterizerOptions<float> rasterizer_options() const {
    RasterizerOptions<float> opts;
    opts.workers = config_.workers > 0 ? config_.workers : default_worker_count();
    opts.background = config_.background;
    return opts;
  }

  // Runs `n` steps (or until config.steps). Returns the last total loss.
  float run(std::int64_t n = -1) {
    const std::int64_t until = n < 0 ? config_.steps : std::min(config_.steps, step_ + n);
    while (step_ < until) step_once();
    return log_.empty() ? 0.0f : log_.back().total;
  }

  void step_once() {
    const std::int64_t step = ++step_;
    const std::size_t idx = rng_() % views_.size();
    TrainView& view = views_[idx];

    graph_.zero_grads();
    for (auto& v : views_) {
      v.camera.pose_delta_grad.setZero();
      v.camera.affine_w_grad.setZero();
      v.camera.affine_b_grad.setZero();
    }

    RasterizerOptions<float> ropts = rasterizer_options();
    ropts.apply_pose_delta = config_.pose_opt;

    StepFlags<float> flags;
    flags.use_depth = !config_.no_depth_loss;
    flags.use_normal = !config_.no_normal_loss;
    flags.use_flatten = config_.flatten.period > 0 && step % config_.flatten.period == 0;
    flags.use_oob = true;
    flags.apply_affine = true;

    std::vector<float> grad_norms;
    RenderResult<float> res;
    LossBreakdown<float> bd =
        training_step_eval<float>(&graph_, &view.camera, view.targets, ropts, config_.weights,
                                  config_.ncc, config_.flatten, flags, &grad_norms, &res);
    float total = bd.total(config_.weights);
    MTS_CHECK(std::isfinite(total), "non-finite total loss at step " << step);

    // densification statistics from the 2D position gradients
    for (std::size_t i = 0; i < res.view.size(); ++i) {
      if (grad_norms[i] == 0.0f) continue;
      const Provenance& pv = res.view.prov[i];
      if (pv.kind == NodeKind::kStatic) {
        static_stats_.grad_sum[pv.local] += grad_norms[i];
        static_stats_.seen[pv.local] += 1;
      } else {
        auto& stats = transient_stats_[res.view.transients[pv.node].graph_index];
        stats.grad_sum[pv.local] += grad_norms[i];
        stats.seen[pv.local] += 1;
      }
    }

    // Adam over every group with its schedule
    std::vector<CameraFrame<float>*> cams;
    for (auto& v : views_) cams.push_back(&v.camera);
    for (int g = 0; g < static_cast<int>(ParamGroup::kCount); ++g) {
      ParamGroup group = static_cast<ParamGroup>(g);
      if (group == ParamGroup::kCameraPose && !config_.pose_opt) continue;
      auto spans = collect_group<float>(graph_, cams, group);
      if (spans.empty()) continue;
      const ParamGroupSchedule& sched = schedule_for(group);
      const float lr = static_cast<float>(sched.lr_at(step, config_.steps));
      const float eps = static_cast<float>(
          group == ParamGroup::kMeans ? config_.adam.eps_positions : config_.adam.eps_default);
      if (adam_step<float>(spans, lr, eps, config_.adam, schedule_steps_[g] + 1)) {
        ++schedule_steps_[g];
      } else {
        ++skipped_;
      }
    }

    if (config_.densify.interval > 0 && step >= config_.densify.start_step &&
        step <= config_.densify.stop_step && step % config_.densify.interval == 0) {
      density_control<float>(&graph_, &static_stats_, &transient_stats_, config_.densify, step,
                             &rng_);
      static_stats_.reset();
      for (auto& s : transient_stats_) s.reset();
    } else if (config_.densify.opacity_reset_interval > 0 &&
               step % config_.densify.opacity_reset_interval == 0) {
      const float cap = logit(static_cast<float>(config_.densify.opacity_reset_value));
      for (auto& v : graph_.static_node.gaussians.opacity_logits.value) v = std::min(v, cap);
      for (auto& node : graph_.transients)
        for (auto& v : node.gaussians.opacity_logits.value) v = std::min(v, cap);
    }

    if (config_.log_interval > 0 &&
        (step % config_.log_interval == 0 || step == config_.steps)) {
      TrainLogRow row;
      row.step = step;
      row.losses = bd;
      row.total = total;
      row.gaussian_count = graph_.static_node.gaussians.size();
      for (const auto& node : graph_.transients) row.gaussian_count += node.gaussians.size();
      log_.push_back(row);
    }
  }

  std::vector<CameraLearnable> camera_learnables() const {
    std::vector<CameraLearnable> out;
    for (const auto& v : views_) {
      CameraLearnable c;
      c.traversal_id = v.camera.traversal_id;
      c.frame_id = v.camera.frame_id;
      c.camera_id = v.camera.camera_id;
      c.pose_delta = v.camera.pose_delta;
      c.affine_w = v.camera.affine_w;
      c.affine_b = v.camera.affine_b;
      out.push_back(c);
    }
    return out;
  }

  void write_log_csv(const std::string& path) const {
    std::ofstream out(path);
    MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
    out << "step,l1,ssim,depth,ncc,normal,flatten,oob,total,gaussians\n";
    for (const auto& row : log_)
      out << row.step << "," << row.losses.l1 << "," << row.losses.ssim << ","
          << row.losses.depth << "," << row.losses.ncc << "," << row.losses.normal << ","
          << row.losses.flatten << "," << row.losses.oob << "," << row.total << ","
          << row.gaussian_count << "\n";
  }

 private:
  const ParamGroupSchedule& schedule_for(ParamGroup group) const {
    const char* name = param_group_name(group);
    for (const auto& s : config_.schedules)
      if (s.name == name) return s;
    MTS_CHECK(false, "no schedule for parameter group " << name);
    return config_.schedules.front();
  }

  SceneGraph<float> graph_;
  std::vector<TrainView> views_;
  TrainConfig config_;
  std::mt19937 rng_;
  std::int64_t step_ = 0;
  std::int64_t skipped_ = 0;
  DensifyStats static_stats_;
  std::vector<DensifyStats> transient_stats_;
  std::array<std::int64_t, static_cast<std::size_t>(ParamGroup::kCount)> schedule_steps_{};
  std::vector<TrainLogRow> log_;
};

// Builds training views from a loaded dataset: projects each frame's cloud
// for sparse depth, derives pseudo normals, and applies the appearance-id
// mapping (per-traversal by default, or one shared id).
inline std::vector<TrainView> build_train_views(const TraversalDataset& dataset,
                                                const std::vector<int>& traversals,
                                                int shared_appearance_id = -1) {
  std::vector<TrainView> views;
  for (const auto& trav : dataset.traversals) {
    if (std::find(traversals.begin(), traversals.end(), trav.traversal_id) == traversals.end())
      continue;
    for (const auto& frame : trav.frames) {
      TrainView v;
      v.camera = frame.camera;
      v.targets.gt = frame.image;
      v.targets.pseudo_depth = frame.pseudo_depth;
      auto nm = pseudo_normal_from_depth<float>(frame.pseudo_depth, frame.camera.intrinsics);
      v.targets.pseudo_normal = std::move(nm.normal);
      v.targets.pseudo_normal_valid = std::move(nm.valid);
      auto projected = project_points(frame.cloud.points, frame.cloud.colors, frame.camera);
      for (const auto& p : projected)
        if (p.depth > 0) v.targets.lidar.push_back({p.px, p.py, p.depth});
      v.targets.appearance_id = shared_appearance_id;
      views.push_back(std::move(v));
    }
  }
  return views;
}

}  // namespace mtsplat
