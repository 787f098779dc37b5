#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "mtsplat/gaussian.hpp"

namespace mtsplat {

// One keyframe of a transient node's rigid pose track. The annotated rotation
// is kept fixed; the learnable part is a delta quaternion composed on the left
// plus the translation itself.
template <class T>
struct PoseKeyframe {
  double time = 0.0;
  Vec4<T> base_quat = Vec4<T>(T(1), T(0), T(0), T(0));

  Vec3<T> translation = Vec3<T>::Zero();
  Vec4<T> delta_quat = Vec4<T>(T(1), T(0), T(0), T(0));

  Vec3<T> translation_grad = Vec3<T>::Zero();
  Vec4<T> delta_quat_grad = Vec4<T>::Zero();
  Vec3<T> translation_m1 = Vec3<T>::Zero();
  Vec3<T> translation_m2 = Vec3<T>::Zero();
  Vec4<T> delta_quat_m1 = Vec4<T>::Zero();
  Vec4<T> delta_quat_m2 = Vec4<T>::Zero();

  Vec4<T> effective_quat() const {
    Vec4<T> q = quat_mul(delta_quat, base_quat);
    return q / q.norm();
  }
};

// Sampled rigid pose. exact_keyframe >= 0 when the query time resolved to a
// single keyframe, in which case pose gradients flow back to its parameters;
// interpolated samples carry no pose-parameter gradients.
template <class T>
struct PoseSample {
  Mat3<T> rot = Mat3<T>::Identity();
  Vec3<T> trans = Vec3<T>::Zero();
  Vec4<T> quat = Vec4<T>(T(1), T(0), T(0), T(0));
  int exact_keyframe = -1;
};

template <class T>
Vec4<T> quat_slerp(const Vec4<T>& a, const Vec4<T>& b, T u) {
  Vec4<T> bb = b;
  T d = a.dot(b);
  if (d < T(0)) {
    bb = -bb;
    d = -d;
  }
  if (d > T(0.9995)) {
    Vec4<T> q = a + u * (bb - a);
    return q / q.norm();
  }
  T theta = std::acos(std::min(d, T(1)));
  T sa = std::sin((T(1) - u) * theta), sb = std::sin(u * theta), s = std::sin(theta);
  Vec4<T> q = (sa * a + sb * bb) / s;
  return q / q.norm();
}

// Background Gaussians shared by all traversals. Owns sh_base only; the
// per-traversal sh_rest blocks live in appearance nodes.
template <class T>
struct StaticNode {
  GaussianSet<T> gaussians;

  StaticNode() { gaussians.has_sh_rest = false; }
};

// Per-traversal residual SH coefficients (bands l>=1) for the static node,
// kept in lockstep with it under density control. Also records the traversal's
// camera trajectory for nearest-appearance selection.
template <class T>
struct AppearanceNode {
  int traversal_id = 0;
  Param<T, ShRest<T>> residuals;
  std::vector<Vec3<T>> trajectory;
};

// Rigid object in box-local coordinates, existing in exactly one traversal.
template <class T>
struct TransientNode {
  int traversal_id = 0;
  int node_id = 0;
  std::string category;
  GaussianSet<T> gaussians;  // local coordinates, owns full SH blocks
  Vec3<T> size = Vec3<T>::Ones();       // box extent, meters
  T tolerance = T(0.4);                 // theta_tol
  bool is_static_object = false;
  std::vector<PoseKeyframe<T>> keyframes;  // time-ordered

  static constexpr double kOutOfSpanSlack = 0.1;  // seconds
  static constexpr double kExactEps = 1e-7;

  // Pose at time t: exact keyframe hit, linear/slerp interpolation between
  // keyframes, nearest keyframe within 0.1 s beyond the span, else error.
  // Static objects always use the first keyframe.
  PoseSample<T> pose_at(double t) const {
    MTS_REQUIRE(!keyframes.empty(), "transient node has an empty pose track");
    PoseSample<T> s;
    if (is_static_object) {
      s.exact_keyframe = 0;
    } else if (t <= keyframes.front().time) {
      MTS_REQUIRE(keyframes.front().time - t <= kOutOfSpanSlack,
                  "timestamp " << t << " outside pose-track span of node " << node_id);
      s.exact_keyframe = 0;
    } else if (t >= keyframes.back().time) {
      MTS_REQUIRE(t - keyframes.back().time <= kOutOfSpanSlack,
                  "timestamp " << t << " outside pose-track span of node " << node_id);
      s.exact_keyframe = static_cast<int>(keyframes.size()) - 1;
    } else {
      std::size_t hi = 1;
      while (keyframes[hi].time < t) ++hi;
      if (std::abs(keyframes[hi].time - t) <= kExactEps) {
        s.exact_keyframe = static_cast<int>(hi);
      } else if (std::abs(keyframes[hi - 1].time - t) <= kExactEps) {
        s.exact_keyframe = static_cast<int>(hi - 1);
      } else {
        const auto& a = keyframes[hi - 1];
        const auto& b = keyframes[hi];
        T u = static_cast<T>((t - a.time) / (b.time - a.time));
        s.trans = (T(1) - u) * a.translation + u * b.translation;
        s.quat = quat_slerp(a.effective_quat(), b.effective_quat(), u);
        s.rot = quat_to_rot_unit(s.quat);
        return s;
      }
    }
    const auto& k = keyframes[s.exact_keyframe];
    s.trans = k.translation;
    s.quat = k.effective_quat();
    s.rot = quat_to_rot_unit(s.quat);
    return s;
  }

  // Indices of local Gaussians outside the box dilated by the tolerance:
  // out-of-box when |x[a]| > size[a]/2 + tolerance on some axis.
  std::vector<std::size_t> oob_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < gaussians.size(); ++i) {
      const Vec3<T>& p = gaussians.positions.value[i];
      for (int a = 0; a < 3; ++a) {
        if (std::abs(p[a]) > size[a] / T(2) + tolerance) {
          out.push_back(i);
          break;
        }
      }
    }
    return out;
  }

  void zero_grads() {
    gaussians.zero_grads();
    for (auto& k : keyframes) {
      k.translation_grad.setZero();
      k.delta_quat_grad.setZero();
    }
  }
};

// A pose track is considered static when its keyframe translations never move
// farther than 3 meters apart; static objects keep their first pose.
template <class T>
bool classify_static(const std::vector<PoseKeyframe<T>>& keyframes) {
  MTS_REQUIRE(!keyframes.empty(), "classify_static: empty pose track");
  constexpr T kStaticLimit = T(3);
  for (std::size_t i = 0; i < keyframes.size(); ++i)
    for (std::size_t j = i + 1; j < keyframes.size(); ++j)
      if ((keyframes[i].translation - keyframes[j].translation).norm() >= kStaticLimit)
        return false;
  return true;
}

// Transforms a transient node's Gaussians into world coordinates at time t:
// x_world = R x + t, q_world = q_pose * q_local.
template <class T>
void transient_to_world(const TransientNode<T>& node, const PoseSample<T>& pose,
                        std::vector<Vec3<T>>* positions, std::vector<Vec4<T>>* quaternions) {
  std::size_t n = node.gaussians.size();
  positions->resize(n);
  quaternions->resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*positions)[i] = pose.rot * node.gaussians.positions.value[i] + pose.trans;
    Vec4<T> q = quat_mul(pose.quat, node.gaussians.quaternions.value[i]);
    (*quaternions)[i] = q / q.norm();
  }
}

enum class NodeKind : std::uint8_t { kStatic = 0, kTransient = 1 };

// Where a flattened Gaussian came from: node kind, index of the transform
// record (transient) and the index inside the owning node.
struct Provenance {
  NodeKind kind;
  std::int32_t node;   // index into RenderView::transients; -1 for static
  std::int32_t local;
};

template <class T>
struct TransientRef {
  std::size_t graph_index;  // index into SceneGraph::transients
  PoseSample<T> pose;
};

// Flattened per-(traversal, time) view of the graph, ready for projection.
// sh_rest entries point into the owning node (appearance residuals for static
// Gaussians, the node's own block for transients).
template <class T>
struct RenderView {
  int traversal_id = 0;
  int appearance_id = 0;
  double time = 0.0;
  std::vector<Vec3<T>> positions;
  std::vector<Vec4<T>> quaternions;
  std::vector<Vec3<T>> log_scales;
  std::vector<T> opacity_logits;
  std::vector<Vec3<T>> sh_base;
  std::vector<const ShRest<T>*> sh_rest;
  std::vector<Provenance> prov;
  std::vector<TransientRef<T>> transients;

  std::size_t size() const { return positions.size(); }
};

template <class T>
struct SceneGraph {
  StaticNode<T> static_node;
  std::map<int, AppearanceNode<T>> appearance;   // keyed by traversal id
  std::vector<TransientNode<T>> transients;

  void check_invariants() const {
    static_node.gaussians.check_consistent();
    for (const auto& [tid, node] : appearance) {
      MTS_CHECK(node.traversal_id == tid, "appearance node key/id mismatch");
      MTS_CHECK(node.residuals.size() == static_node.gaussians.size(),
                "appearance residuals must match static Gaussian count");
    }
    for (const auto& t : transients) {
      t.gaussians.check_consistent();
      MTS_CHECK(appearance.count(t.traversal_id) == 1,
                "transient node " << t.node_id << " has no appearance node for traversal "
                                  << t.traversal_id);
    }
  }

  void zero_grads() {
    static_node.gaussians.zero_grads();
    for (auto& [tid, node] : appearance) node.residuals.zero_grad();
    for (auto& t : transients) t.zero_grads();
  }
};

// Assembles the render view for traversal T at time t: the shared static node
// with appearance_id's residuals, plus the world-transformed transient nodes
// of traversal T. Transients of other traversals are excluded.
template <class T>
RenderView<T> assemble_subgraph(const SceneGraph<T>& graph, int traversal, double t,
                                int appearance_id = -1) {
  if (appearance_id < 0) appearance_id = traversal;
  auto it = graph.appearance.find(appearance_id);
  MTS_REQUIRE(it != graph.appearance.end(),
              "no appearance node for traversal " << appearance_id);
  const AppearanceNode<T>& appr = it->second;
  const GaussianSet<T>& st = graph.static_node.gaussians;
  MTS_CHECK(appr.residuals.size() == st.size(),
            "appearance residuals out of lockstep with static node");

  RenderView<T> view;
  view.traversal_id = traversal;
  view.appearance_id = appearance_id;
  view.time = t;

  std::size_t total = st.size();
  for (const auto& node : graph.transients)
    if (node.traversal_id == traversal) total += node.gaussians.size();
  view.positions.reserve(total);
  view.quaternions.reserve(total);
  view.log_scales.reserve(total);
  view.opacity_logits.reserve(total);
  view.sh_base.reserve(total);
  view.sh_rest.reserve(total);
  view.prov.reserve(total);

  for (std::size_t i = 0; i < st.size(); ++i) {
    view.positions.push_back(st.positions.value[i]);
    view.quaternions.push_back(st.quaternions.value[i]);
    view.log_scales.push_back(st.log_scales.value[i]);
    view.opacity_logits.push_back(st.opacity_logits.value[i]);
    view.sh_base.push_back(st.sh_base.value[i]);
    view.sh_rest.push_back(&appr.residuals.value[i]);
    view.prov.push_back({NodeKind::kStatic, -1, static_cast<std::int32_t>(i)});
  }

  for (std::size_t n = 0; n < graph.transients.size(); ++n) {
    const TransientNode<T>& node = graph.transients[n];
    if (node.traversal_id != traversal) continue;
    PoseSample<T> pose = node.pose_at(t);
    std::int32_t ref = static_cast<std::int32_t>(view.transients.size());
    view.transients.push_back({n, pose});
    for (std::size_t i = 0; i < node.gaussians.size(); ++i) {
      view.positions.push_back(pose.rot * node.gaussians.positions.value[i] + pose.trans);
      Vec4<T> q = quat_mul(pose.quat, node.gaussians.quaternions.value[i]);
      view.quaternions.push_back(q / q.norm());
      view.log_scales.push_back(node.gaussians.log_scales.value[i]);
      view.opacity_logits.push_back(node.gaussians.opacity_logits.value[i]);
      view.sh_base.push_back(node.gaussians.sh_base.value[i]);
      view.sh_rest.push_back(&node.gaussians.sh_rest.value[i]);
      view.prov.push_back({NodeKind::kTransient, ref, static_cast<std::int32_t>(i)});
    }
  }
  return view;
}

// Picks the traversal whose recorded trajectory has minimal mean
// closest-point distance to the query positions. Ties break to the lowest id.
template <class T>
int select_appearance(const SceneGraph<T>& graph, const std::vector<Vec3<T>>& query) {
  MTS_REQUIRE(!graph.appearance.empty(), "select_appearance: graph has no appearance nodes");
  MTS_REQUIRE(!query.empty(), "select_appearance: empty query trajectory");
  int best_id = graph.appearance.begin()->first;
  T best = std::numeric_limits<T>::max();
  for (const auto& [tid, node] : graph.appearance) {
    if (node.trajectory.empty()) continue;
    T sum = T(0);
    for (const Vec3<T>& q : query) {
      T closest = std::numeric_limits<T>::max();
      for (const Vec3<T>& p : node.trajectory) closest = std::min(closest, (q - p).norm());
      sum += closest;
    }
    T mean = sum / static_cast<T>(query.size());
    if (mean < best) {
      best = mean;
      best_id = tid;
    }
  }
  return best_id;
}

}  // namespace mtsplat
