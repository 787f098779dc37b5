#pragma once

#include <map>
#include <memory>
#include <random>
#include <vector>

#include "mtsplat/pointcloud.hpp"
#include "mtsplat/scene_graph.hpp"
#include "mtsplat/spatial_grid.hpp"

namespace mtsplat {

struct InitializerConfig {
  double voxel_size = 0.15;          // meters
  int outlier_neighbors = 20;        // statistical outlier removal
  double outlier_sigma = 2.0;        // discard above mean + sigma * std
  double box_tolerance = 0.4;        // theta_tol, reused as assignment dilation
  double initial_opacity = 0.1;
  double scale_clamp_min = 0.01;     // meters
  double scale_clamp_max = 0.5;
  std::size_t sky_point_count = 100000;
  unsigned sky_seed = 0;
  bool use_boxes = true;             // false: everything becomes background
};

template <class T>
struct AggregatedPoints {
  std::vector<Vec3<T>> background_points;
  std::vector<Vec3<T>> background_colors;
  // box-local point sets, keyed by (traversal, node) in box-track order
  std::vector<std::vector<Vec3<T>>> box_points;
  std::vector<std::vector<Vec3<T>>> box_colors;
};

namespace detail {

template <class T>
bool box_covers_time(const std::vector<PoseKeyframe<T>>& keyframes, double t, bool is_static) {
  if (keyframes.empty()) return false;
  if (is_static) return true;
  return t >= keyframes.front().time - TransientNode<T>::kOutOfSpanSlack &&
         t <= keyframes.back().time + TransientNode<T>::kOutOfSpanSlack;
}

}  // namespace detail

// Converts a box track into an (empty) transient node: annotated rotations
// become fixed base quaternions, centers become learnable translations, and
// tracks moving less than 3 meters are pinned to their first pose.
template <class T>
TransientNode<T> transient_from_box(const BoxTrack<T>& box, T tolerance) {
  box.validate();
  TransientNode<T> node;
  node.traversal_id = box.traversal_id;
  node.node_id = box.node_id;
  node.category = box.category;
  node.size = box.extent;
  node.tolerance = tolerance;
  for (const auto& bk : box.keyframes) {
    PoseKeyframe<T> kf;
    kf.time = bk.time;
    kf.base_quat = bk.quat / bk.quat.norm();
    kf.translation = bk.center;
    node.keyframes.push_back(kf);
  }
  node.is_static_object = classify_static(node.keyframes);
  return node;
}

// Voxel-grid downsampling: centroid position and mean color per occupied
// voxel, emitted in deterministic voxel order. Idempotent at a fixed size.
template <class T>
void voxel_downsample(const std::vector<Vec3<T>>& points, const std::vector<Vec3<T>>& colors,
                      T voxel_size, std::vector<Vec3<T>>* out_points,
                      std::vector<Vec3<T>>* out_colors) {
  struct Accum {
    Vec3<T> pos = Vec3<T>::Zero();
    Vec3<T> color = Vec3<T>::Zero();
    int count = 0;
  };
  std::map<std::array<std::int64_t, 3>, Accum> voxels;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const Vec3<T>& p = points[i];
    std::array<std::int64_t, 3> key{static_cast<std::int64_t>(std::floor(p[0] / voxel_size)),
                                    static_cast<std::int64_t>(std::floor(p[1] / voxel_size)),
                                    static_cast<std::int64_t>(std::floor(p[2] / voxel_size))};
    Accum& acc = voxels[key];
    acc.pos += p;
    acc.color += colors[i];
    acc.count += 1;
  }
  out_points->clear();
  out_colors->clear();
  for (const auto& [key, acc] : voxels) {
    out_points->push_back(acc.pos / T(acc.count));
    out_colors->push_back(acc.color / T(acc.count));
  }
}

// Splits aggregated clouds into per-box local point sets (a point joins a box
// of its own traversal when inside the extent dilated by the tolerance at the
// cloud's timestamp) and a cleaned background: statistical outlier removal
// followed by voxel-grid downsampling with color averaging.
template <class T>
AggregatedPoints<T> aggregate_and_clean(const std::vector<PointCloud<T>>& clouds,
                                        const std::vector<TransientNode<T>>& nodes,
                                        const InitializerConfig& cfg) {
  AggregatedPoints<T> out;
  out.box_points.resize(nodes.size());
  out.box_colors.resize(nodes.size());

  std::vector<Vec3<T>> raw_points, raw_colors;
  for (const auto& cloud : clouds) {
    cloud.validate();
    // poses of this traversal's boxes at the cloud timestamp
    std::vector<int> active;
    std::vector<PoseSample<T>> poses;
    if (cfg.use_boxes) {
      for (std::size_t n = 0; n < nodes.size(); ++n) {
        if (nodes[n].traversal_id != cloud.traversal_id) continue;
        if (!detail::box_covers_time(nodes[n].keyframes, cloud.timestamp,
                                     nodes[n].is_static_object))
          continue;
        active.push_back(static_cast<int>(n));
        poses.push_back(nodes[n].pose_at(cloud.timestamp));
      }
    }
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const Vec3<T>& p = cloud.points[i];
      bool assigned = false;
      for (std::size_t a = 0; a < active.size(); ++a) {
        const TransientNode<T>& node = nodes[active[a]];
        Vec3<T> local = poses[a].rot.transpose() * (p - poses[a].trans);
        bool inside = true;
        for (int k = 0; k < 3; ++k)
          if (std::abs(local[k]) > node.size[k] / T(2) + T(cfg.box_tolerance)) {
            inside = false;
            break;
          }
        if (inside) {
          out.box_points[active[a]].push_back(local);
          out.box_colors[active[a]].push_back(cloud.colors[i]);
          assigned = true;
          break;
        }
      }
      if (!assigned) {
        raw_points.push_back(p);
        raw_colors.push_back(cloud.colors[i]);
      }
    }
  }

  // statistical outlier removal on the background pool
  std::vector<std::size_t> keep;
  if (raw_points.size() > static_cast<std::size_t>(cfg.outlier_neighbors)) {
    SpatialGrid<T> grid(raw_points, knn_cell_heuristic(raw_points));
    std::vector<T> mean_dist(raw_points.size(), T(0));
    for (std::size_t i = 0; i < raw_points.size(); ++i) {
      auto d2 = grid.knn_sq_dists(i, cfg.outlier_neighbors);
      T sum = T(0);
      for (T d : d2) sum += std::sqrt(d);
      mean_dist[i] = d2.empty() ? T(0) : sum / T(d2.size());
    }
    double mu = 0, var = 0;
    for (T d : mean_dist) mu += d;
    mu /= mean_dist.size();
    for (T d : mean_dist) var += (d - mu) * (d - mu);
    var /= mean_dist.size();
    const double cutoff = mu + cfg.outlier_sigma * std::sqrt(var);
    for (std::size_t i = 0; i < raw_points.size(); ++i)
      if (mean_dist[i] <= T(cutoff)) keep.push_back(i);
  } else {
    for (std::size_t i = 0; i < raw_points.size(); ++i) keep.push_back(i);
  }

  std::vector<Vec3<T>> kept_points, kept_colors;
  kept_points.reserve(keep.size());
  kept_colors.reserve(keep.size());
  for (std::size_t i : keep) {
    kept_points.push_back(raw_points[i]);
    kept_colors.push_back(raw_colors[i]);
  }
  voxel_downsample(kept_points, kept_colors, T(cfg.voxel_size), &out.background_points,
                   &out.background_colors);
  MTS_REQUIRE(!out.background_points.empty(),
              "initialization left no background points after cleaning");
  return out;
}

// Fills a Gaussian set from points: inverse-offset colors into sh_base,
// isotropic scales from the mean distance to the 3 nearest neighbors
// (clamped), fixed initial opacity, identity rotations.
template <class T>
void gaussians_from_points(const std::vector<Vec3<T>>& points,
                           const std::vector<Vec3<T>>& colors, const InitializerConfig& cfg,
                           GaussianSet<T>* set) {
  MTS_REQUIRE(!points.empty(), "gaussians_from_points: empty input");
  const std::size_t n = points.size();
  set->resize(n);
  const T opacity = logit(T(cfg.initial_opacity));
  std::unique_ptr<SpatialGrid<T>> grid;
  if (n > 1) grid = std::make_unique<SpatialGrid<T>>(points, knn_cell_heuristic(points));
  for (std::size_t i = 0; i < n; ++i) {
    set->positions.value[i] = points[i];
    set->quaternions.value[i] = Vec4<T>(T(1), T(0), T(0), T(0));
    set->opacity_logits.value[i] = opacity;
    set->sh_base.value[i] = (colors[i].array() - T(0.5)) / T(kSh0);
    T scale = T(cfg.scale_clamp_min);
    if (grid) {
      auto d2 = grid->knn_sq_dists(i, 3);
      if (!d2.empty()) {
        T sum = T(0);
        for (T d : d2) sum += std::sqrt(d);
        scale = sum / T(d2.size());
      }
    }
    scale = std::min(T(cfg.scale_clamp_max), std::max(T(cfg.scale_clamp_min), scale));
    set->log_scales.value[i] = Vec3<T>::Constant(std::log(scale));
  }
}

// Sky initialization: points uniform on a semisphere shell of radius twice the
// farthest background distance, polar angles in [pi/4, pi/2] from +z, light
// gray and faint. Deterministic for a fixed seed.
template <class T>
void sky_init(const Vec3<T>& center, T d_max, const InitializerConfig& cfg,
              GaussianSet<T>* set) {
  const std::size_t n = cfg.sky_point_count;
  const T radius = T(2) * d_max;
  std::mt19937 rng(cfg.sky_seed);
  auto uniform = [&rng](T lo, T hi) {
    return lo + (hi - lo) * T(static_cast<double>(rng()) / 4294967296.0);
  };
  std::vector<Vec3<T>> points(n), colors(n, Vec3<T>::Constant(T(0.7)));
  const T pi = T(M_PI);
  for (std::size_t i = 0; i < n; ++i) {
    // area-uniform on the band: cos(theta) uniform in [0, cos(pi/4)]
    T cos_theta = uniform(T(0), std::cos(pi / T(4)));
    T sin_theta = std::sqrt(std::max(T(0), T(1) - cos_theta * cos_theta));
    T phi = uniform(T(0), T(2) * pi);
    points[i] = center + radius * Vec3<T>(sin_theta * std::cos(phi),
                                          sin_theta * std::sin(phi), cos_theta);
  }
  gaussians_from_points(points, colors, cfg, set);
}

struct GraphBuildOptions {
  std::vector<int> traversal_ids;  // appearance nodes to create
  bool with_sky = true;
};

// Assembles the initial scene graph from clouds, box tracks and per-traversal
// camera trajectories.
template <class T>
SceneGraph<T> build_initial_graph(const std::vector<PointCloud<T>>& clouds,
                                  const std::vector<BoxTrack<T>>& boxes,
                                  const std::map<int, std::vector<Vec3<T>>>& trajectories,
                                  const InitializerConfig& cfg,
                                  const GraphBuildOptions& opts) {
  SceneGraph<T> graph;
  std::vector<TransientNode<T>> nodes;
  if (cfg.use_boxes)
    for (const auto& box : boxes) nodes.push_back(transient_from_box(box, T(cfg.box_tolerance)));

  AggregatedPoints<T> agg = aggregate_and_clean(clouds, nodes, cfg);

  GaussianSet<T>& st = graph.static_node.gaussians;
  gaussians_from_points(agg.background_points, agg.background_colors, cfg, &st);

  if (opts.with_sky) {
    Vec3<T> center = Vec3<T>::Zero();
    for (const auto& p : agg.background_points) center += p;
    center /= T(agg.background_points.size());
    T d_max = T(0);
    for (const auto& p : agg.background_points)
      d_max = std::max(d_max, T((p - center).norm()));
    GaussianSet<T> sky;
    sky.has_sh_rest = false;
    sky_init(center, d_max, cfg, &sky);
    for (std::size_t i = 0; i < sky.size(); ++i) {
      st.positions.push_back(sky.positions.value[i]);
      st.quaternions.push_back(sky.quaternions.value[i]);
      st.log_scales.push_back(sky.log_scales.value[i]);
      st.opacity_logits.push_back(sky.opacity_logits.value[i]);
      st.sh_base.push_back(sky.sh_base.value[i]);
    }
  }

  for (int tid : opts.traversal_ids) {
    AppearanceNode<T> appr;
    appr.traversal_id = tid;
    appr.residuals.resize(st.size(), zero_sh_rest<T>());
    auto it = trajectories.find(tid);
    if (it != trajectories.end()) appr.trajectory = it->second;
    graph.appearance[tid] = appr;
  }

  if (cfg.use_boxes) {
    for (std::size_t n = 0; n < nodes.size(); ++n) {
      if (agg.box_points[n].empty()) continue;
      if (!graph.appearance.count(nodes[n].traversal_id)) continue;
      TransientNode<T> node = std::move(nodes[n]);
      gaussians_from_points(agg.box_points[n], agg.box_colors[n], cfg, &node.gaussians);
      graph.transients.push_back(std::move(node));
    }
  }
  graph.check_invariants();
  return graph;
}

}  // namespace mtsplat
