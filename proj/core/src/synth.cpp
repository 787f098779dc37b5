#include "mtsplat/synth.hpp"

#include <filesystem>
#include <random>

#include "mtsplat/image_io.hpp"
#include "mtsplat/rasterizer.hpp"

namespace mtsplat {

namespace fs = std::filesystem;

namespace {

using Vec3f = Vec3<float>;
using Vec4f = Vec4<float>;

constexpr double kFrameDt = 0.4;       // seconds between frames
constexpr double kLaneSpacing = 3.5;   // meters between traversal lanes
constexpr float kCamHeight = 1.6f;
constexpr float kCamPitch = 0.175f;    // ~10 degrees downward

struct Rng {
  std::mt19937 gen;
  explicit Rng(unsigned seed) : gen(seed) {}
  float uniform(float lo, float hi) {
    return lo + (hi - lo) * static_cast<float>(gen() / 4294967296.0);
  }
};

float lane_y(int traversal) { return static_cast<float>(kLaneSpacing * traversal); }

Vec3f ground_albedo(float x, float y) {
  return Vec3f(0.45f + 0.20f * std::sin(0.40f * x) * std::sin(0.33f * y),
               0.46f + 0.18f * std::sin(0.23f * x + 1.0f) * std::cos(0.29f * y),
               0.42f + 0.16f * std::cos(0.31f * x - 0.5f) * std::sin(0.27f * y + 0.8f));
}

void append_gaussian(GaussianSet<float>* set, const Vec3f& pos, const Vec3f& scale,
                     const Vec3f& color, float opacity) {
  set->positions.push_back(pos);
  set->quaternions.push_back(Vec4f(1, 0, 0, 0));
  set->log_scales.push_back(scale.array().log());
  set->opacity_logits.push_back(logit(opacity));
  set->sh_base.push_back(Vec3f((color.array() - 0.5f) / float(kSh0)));
  if (set->has_sh_rest) set->sh_rest.push_back(zero_sh_rest<float>());
}

struct BoxSpec {
  Vec3f lo, hi;
  Vec3f hue;
};

// Paves the four side faces and the top of an axis-aligned box. Flat scale on
// the normal axis makes the Gaussian normal match the face normal.
void pave_box(GaussianSet<float>* set, const BoxSpec& box, float spacing, Rng* rng,
              float opacity) {
  auto face_color = [&](const Vec3f& p, float along) {
    Vec3f c = box.hue * (0.78f + 0.22f * std::sin(1.7f * p[2] + 0.9f * along));
    return Vec3f(c.cwiseMax(0.08f).cwiseMin(0.92f));
  };
  const Vec3f size = box.hi - box.lo;
  const float flat = 0.015f;
  const float wide = 0.75f * spacing;
  for (int axis = 0; axis < 3; ++axis) {
    for (int side = 0; side < 2; ++side) {
      if (axis == 2 && side == 0) continue;  // no bottom face
      int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
      int n1 = std::max(1, static_cast<int>(size[a1] / spacing));
      int n2 = std::max(1, static_cast<int>(size[a2] / spacing));
      for (int i = 0; i < n1; ++i)
        for (int j = 0; j < n2; ++j) {
          Vec3f p;
          p[axis] = side ? box.hi[axis] : box.lo[axis];
          p[a1] = box.lo[a1] + (i + 0.5f) * size[a1] / n1 + rng->uniform(-0.04f, 0.04f);
          p[a2] = box.lo[a2] + (j + 0.5f) * size[a2] / n2 + rng->uniform(-0.04f, 0.04f);
          Vec3f scale = Vec3f::Constant(wide);
          scale[axis] = flat;
          append_gaussian(set, p, scale, face_color(p, p[a1] + p[a2]), opacity);
        }
    }
  }
}

// Transient cube in LOCAL box coordinates (origin at the box center).
GaussianSet<float> make_cube_gaussians(float extent, const Vec3f& hue, float spacing,
                                       Rng* rng) {
  GaussianSet<float> set;
  const float h = extent / 2;
  const float flat = 0.012f;
  const float wide = 0.7f * spacing;
  int n = std::max(2, static_cast<int>(extent / spacing));
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      if (axis == 2 && side == 0) continue;
      int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
          Vec3f p;
          p[axis] = side ? h : -h;
          p[a1] = -h + (i + 0.5f) * extent / n + rng->uniform(-0.02f, 0.02f);
          p[a2] = -h + (j + 0.5f) * extent / n + rng->uniform(-0.02f, 0.02f);
          Vec3f scale = Vec3f::Constant(wide);
          scale[axis] = flat;
          Vec3f c = hue * (0.8f + 0.2f * std::sin(3.1f * (p[a1] + p[a2])));
          append_gaussian(&set, p, scale, Vec3f(c.cwiseMax(0.08f).cwiseMin(0.92f)), 0.95f);
        }
    }
  return set;
}

// Per-traversal tint parameters for the appearance residuals.
struct TintSpec {
  Vec3f global;
  Vec3f spatial;
  float phase;
};

TintSpec tint_spec(int traversal, int n_train) {
  static const Vec3f globals[] = {
      {0.00f, 0.00f, 0.00f}, {0.10f, -0.06f, 0.02f}, {-0.08f, 0.04f, 0.09f},
      {0.05f, 0.08f, -0.05f}, {-0.04f, -0.07f, 0.06f}};
  static const Vec3f spatials[] = {
      {0.00f, 0.03f, -0.02f}, {0.06f, -0.04f, 0.03f}, {-0.05f, 0.05f, 0.04f},
      {0.04f, 0.02f, -0.05f}, {0.03f, -0.05f, 0.02f}};
  if (traversal < n_train) {
    int i = traversal % 5;
    return {globals[i], spatials[i], 0.7f * traversal};
  }
  // held-out: between the training tints
  return {{0.04f, -0.02f, 0.05f}, {0.03f, 0.02f, 0.01f}, 1.9f};
}

ShRest<float> residual_for(const Vec3f& pos, const TintSpec& tint, float strength) {
  ShRest<float> rest = zero_sh_rest<float>();
  for (int ch = 0; ch < 3; ++ch) {
    float t = strength * (tint.global[ch] +
                          tint.spatial[ch] * std::sin(0.20f * pos[0] + tint.phase + 2.1f * ch));
    // l=1, m=1 row evaluates to -c1 * dir_x; cameras look along +x
    rest[2][ch] = -2.0f * t;
    rest[1][ch] = -0.8f * strength * tint.spatial[ch] *
                  std::cos(0.15f * pos[1] + tint.phase + 1.3f * ch);
  }
  return rest;
}

struct MovingCube {
  int traversal;
  float extent;
  Vec3f hue;
  float x0, y, z;
  bool parked;
};

std::vector<MovingCube> cube_specs(const SynthOptions& opts) {
  static const Vec3f hues[] = {{0.78f, 0.45f, 0.18f}, {0.20f, 0.62f, 0.62f},
                               {0.55f, 0.35f, 0.70f}, {0.72f, 0.68f, 0.25f},
                               {0.35f, 0.55f, 0.30f}};
  std::vector<MovingCube> cubes;
  for (int t = 0; t <= opts.n_traversals; ++t) {
    MovingCube c;
    c.traversal = t;
    c.extent = 1.8f;
    c.hue = hues[t % 5];
    c.x0 = 6.0f + 1.5f * (t % 3);
    c.y = lane_y(t) + 1.7f;
    c.z = 0.9f;
    c.parked = false;
    cubes.push_back(c);
  }
  if (opts.parked_object)
    cubes.push_back({0, 1.5f, Vec3f(0.70f, 0.22f, 0.22f), 17.0f, 5.2f, 0.75f, true});
  return cubes;
}

}  // namespace

std::vector<CameraFrame<float>> synth_cameras(const SynthOptions& opts, int traversal) {
  std::vector<CameraFrame<float>> cams;
  const float fx = 0.8f * opts.width;
  const float p = kCamPitch;
  Mat3<float> rot;
  rot << 0, -1, 0,
         -std::sin(p), 0, -std::cos(p),
         std::cos(p), 0, -std::sin(p);
  for (int i = 0; i < opts.frames_per_traversal; ++i) {
    CameraFrame<float> cam;
    cam.width = opts.width;
    cam.height = opts.height;
    cam.intrinsics = {fx, fx, opts.width / 2.0f, opts.height / 2.0f};
    cam.traversal_id = traversal;
    cam.frame_id = i;
    cam.camera_id = 0;
    cam.timestamp = kFrameDt * i;
    Vec3f center(2.0f + 2.0f * i, lane_y(traversal), kCamHeight);
    cam.extrinsic.setIdentity();
    cam.extrinsic.topLeftCorner<3, 3>() = rot;
    cam.extrinsic.topRightCorner<3, 1>() = -rot * center;
    cams.push_back(cam);
  }
  return cams;
}

SceneGraph<float> synth_ground_truth_graph(const SynthOptions& opts) {
  Rng rng(opts.seed);
  SceneGraph<float> graph;
  GaussianSet<float>& st = graph.static_node.gaussians;

  // ground plane
  for (float x = -4.0f; x < 34.0f; x += 0.35f)
    for (float y = -7.0f; y < 19.0f; y += 0.35f) {
      Vec3f p(x + rng.uniform(-0.08f, 0.08f), y + rng.uniform(-0.08f, 0.08f), 0.0f);
      append_gaussian(&st, p, Vec3f(0.26f, 0.26f, 0.015f), ground_albedo(p[0], p[1]), 0.92f);
    }

  // box structures on both sides of the lanes
  const BoxSpec boxes[] = {
      {{4, -5, 0}, {10, -3, 4}, {0.65f, 0.45f, 0.35f}},
      {{14, -5.5, 0}, {22, -3.5, 5}, {0.40f, 0.50f, 0.65f}},
      {{7, 14, 0}, {13, 16, 4.5}, {0.55f, 0.60f, 0.40f}},
      {{20, 13.5, 0}, {27, 15.5, 3.5}, {0.60f, 0.50f, 0.60f}},
  };
  for (const auto& b : boxes) pave_box(&st, b, 0.30f, &rng, 0.93f);

  // sky dome
  {
    const Vec3f center(15, 5, 0);
    const float radius = 150.0f;
    const int n_sky = 6000;
    for (int i = 0; i < n_sky; ++i) {
      float cos_t = rng.uniform(0.05f, 0.995f);
      float sin_t = std::sqrt(std::max(0.0f, 1.0f - cos_t * cos_t));
      float phi = rng.uniform(0.0f, 2.0f * static_cast<float>(M_PI));
      Vec3f p = center + radius * Vec3f(sin_t * std::cos(phi), sin_t * std::sin(phi), cos_t);
      Vec3f top(0.45f, 0.62f, 0.92f), horizon(0.82f, 0.86f, 0.93f);
      Vec3f c = horizon + cos_t * (top - horizon);
      append_gaussian(&st, p, Vec3f(3.2f, 3.2f, 3.2f), c, 0.97f);
    }
  }

  // appearance nodes (training traversals and the held-out lane)
  for (int t = 0; t <= opts.n_traversals; ++t) {
    AppearanceNode<float> node;
    node.traversal_id = t;
    TintSpec tint = tint_spec(t, opts.n_traversals);
    node.residuals.resize(st.size(), zero_sh_rest<float>());
    for (std::size_t i = 0; i < st.size(); ++i)
      node.residuals.value[i] = residual_for(st.positions.value[i], tint,
                                             static_cast<float>(opts.appearance_strength));
    for (const auto& cam : synth_cameras(opts, t))
      node.trajectory.push_back(-cam.extrinsic.topLeftCorner<3, 3>().transpose() *
                                cam.extrinsic.topRightCorner<3, 1>());
    graph.appearance[t] = std::move(node);
  }

  // transient cubes
  int node_id = 0;
  for (const auto& spec : cube_specs(opts)) {
    TransientNode<float> node;
    node.traversal_id = spec.traversal;
    node.node_id = node_id++;
    node.category = spec.parked ? "parked" : "vehicle";
    node.size = Vec3f::Constant(spec.extent);
    node.tolerance = 0.4f;
    node.gaussians = make_cube_gaussians(spec.extent, spec.hue, 0.2f, &rng);
    for (int i = 0; i < opts.frames_per_traversal; ++i) {
      PoseKeyframe<float> kf;
      kf.time = kFrameDt * i;
      float x = spec.parked
                    ? spec.x0
                    : spec.x0 + static_cast<float>(opts.transient_speed * kf.time);
      kf.translation = Vec3f(x, spec.y, spec.z);
      node.keyframes.push_back(kf);
    }
    node.is_static_object = classify_static(node.keyframes);
    graph.transients.push_back(std::move(node));
  }
  graph.check_invariants();
  return graph;
}

SynthResult synth_scene(const SynthOptions& opts, const std::string& out_dir) {
  fs::path base(out_dir);
  std::error_code ec;
  fs::create_directories(base, ec);
  MTS_REQUIRE(!ec && fs::is_directory(base), "cannot create output directory: " << out_dir);
  for (const char* sub : {"images", "depth", "masks", "clouds"})
    fs::create_directories(base / sub);

  SceneGraph<float> graph = synth_ground_truth_graph(opts);

  RasterizerOptions<float> ropts;
  ropts.workers = opts.workers > 0 ? opts.workers : default_worker_count();
  ropts.apply_pose_delta = false;
  ropts.background = Vec3f(0.78f, 0.84f, 0.95f);
  ropts.record_transient_weight = true;

  SceneManifest manifest;
  manifest.scene_name = "synthetic multi-traversal fixture";

  for (int t = 0; t <= opts.n_traversals; ++t) {
    TraversalRecord trav;
    trav.traversal_id = t;
    trav.held_out = (t == opts.n_traversals);
    auto cams = synth_cameras(opts, t);
    for (std::size_t i = 0; i < cams.size(); ++i) {
      const CameraFrame<float>& cam = cams[i];
      auto res = render(graph, cam, t, cam.timestamp, ropts);
      char tag[64];
      std::snprintf(tag, sizeof(tag), "t%d_f%03zu", t, i);

      // color
      std::string image_rel = std::string("images/") + tag + ".png";
      write_png_rgb8((base / image_rel).string(), res.buffers.color);

      // pseudo-depth: the exact expected depth where coverage exists
      Image<float> pseudo = res.buffers.depth;
      for (std::size_t px = 0; px < pseudo.data.size(); ++px)
        if (res.buffers.alpha.data[px] <= 0.25f) pseudo.data[px] = 0.0f;
      std::string depth_rel = std::string("depth/") + tag + ".fmap";
      write_float_map((base / depth_rel).string(), pseudo);

      // evaluation mask: exclude pixels dominated by transient content
      Image<std::uint8_t> mask(cam.width, cam.height, 1, 255);
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
          if (res.transient_weight.at(x, y) > 0.02f) mask.at(x, y) = 0;
      Image<std::uint8_t> dilated = mask;
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
          if (mask.at(x, y) == 0)
            for (int dy = -1; dy <= 1; ++dy)
              for (int dx = -1; dx <= 1; ++dx) {
                int xx = x + dx, yy = y + dy;
                if (xx >= 0 && xx < cam.width && yy >= 0 && yy < cam.height)
                  dilated.at(xx, yy) = 0;
              }
      std::string mask_rel = std::string("masks/") + tag + ".png";
      write_png_gray8((base / mask_rel).string(), dilated);

      // LiDAR: subsampled back-projection of the rendered depth, with colors
      // quantized exactly like the stored image
      PointCloud<float> cloud;
      cloud.timestamp = cam.timestamp;
      cloud.traversal_id = t;
      Mat3<float> rot = cam.extrinsic.topLeftCorner<3, 3>();
      Vec3f trans = cam.extrinsic.topRightCorner<3, 1>();
      for (int y = 1; y < cam.height; y += 4)
        for (int x = 1; x < cam.width; x += 4) {
          float d = res.buffers.depth.at(x, y);
          if (res.buffers.alpha.at(x, y) <= 0.6f || d <= 0.5f || d >= 60.0f) continue;
          float u = x + 0.5f, v = y + 0.5f;
          Vec3f pc((u - cam.intrinsics.cx) / cam.intrinsics.fx * d,
                   (v - cam.intrinsics.cy) / cam.intrinsics.fy * d, d);
          cloud.points.push_back(rot.transpose() * (pc - trans));
          Vec3f col(quantize_u8(res.buffers.color.at(x, y, 0)) / 255.0f,
                    quantize_u8(res.buffers.color.at(x, y, 1)) / 255.0f,
                    quantize_u8(res.buffers.color.at(x, y, 2)) / 255.0f);
          cloud.colors.push_back(col);
        }
      std::string cloud_rel = std::string("clouds/") + tag + ".mtpc";
      write_point_cloud((base / cloud_rel).string(), cloud);

      FrameRecord rec;
      rec.frame_id = static_cast<int>(i);
      rec.camera_id = 0;
      rec.timestamp = cam.timestamp;
      rec.fx = cam.intrinsics.fx;
      rec.fy = cam.intrinsics.fy;
      rec.cx = cam.intrinsics.cx;
      rec.cy = cam.intrinsics.cy;
      rec.width = cam.width;
      rec.height = cam.height;
      rec.extrinsic = cam.extrinsic.cast<double>();
      rec.image_path = image_rel;
      rec.pseudo_depth_path = depth_rel;
      rec.mask_path = mask_rel;
      rec.cloud_path = cloud_rel;
      trav.frames.push_back(rec);
    }
    manifest.traversals.push_back(trav);
  }

  // exact box tracks from the ground-truth transient nodes
  for (const auto& node : graph.transients) {
    BoxTrack<float> box;
    box.node_id = node.node_id;
    box.traversal_id = node.traversal_id;
    box.category = node.category;
    box.extent = node.size;
    for (const auto& kf : node.keyframes) {
      BoxKeyframe<float> bk;
      bk.time = kf.time;
      bk.center = kf.translation;
      bk.quat = kf.base_quat;
      box.keyframes.push_back(bk);
    }
    manifest.boxes.push_back(box);
  }

  SynthResult result;
  result.manifest_path = (base / "manifest.json").string();
  result.gt_checkpoint_path = (base / "gt_checkpoint.ckpt").string();
  write_manifest(manifest, result.manifest_path);
  save_checkpoint(result.gt_checkpoint_path, graph, {}, 0, false);
  return result;
}

}  // namespace mtsplat
