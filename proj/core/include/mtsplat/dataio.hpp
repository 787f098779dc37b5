#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtsplat/camera.hpp"
#include "mtsplat/image.hpp"
#include "mtsplat/pointcloud.hpp"
#include "mtsplat/scene_graph.hpp"

namespace mtsplat {

// Manifest-level description of one camera sample. Paths are relative to the
// manifest's directory. Extrinsics are row-major world-to-camera.
struct FrameRecord {
  int frame_id = 0;
  int camera_id = 0;
  double timestamp = 0.0;
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  Mat4<double> extrinsic = Mat4<double>::Identity();
  std::string image_path;
  std::string pseudo_depth_path;
  std::string mask_path;   // optional, empty when absent
  std::string cloud_path;
};

struct TraversalRecord {
  int traversal_id = 0;
  bool held_out = false;
  std::vector<FrameRecord> frames;
};

struct SceneManifest {
  std::string scene_name;
  int version = 1;
  std::string base_dir;  // directory of the manifest file, set on load
  std::vector<TraversalRecord> traversals;
  std::vector<BoxTrack<float>> boxes;
};

// One fully loaded frame: image and maps share dimensions; the sparse LiDAR
// depth is derived by projecting the frame's cloud.
struct FrameData {
  FrameRecord record;
  CameraFrame<float> camera;
  Image<float> image;         // linearized to [0,1]
  Image<float> pseudo_depth;  // meters, <=0 invalid
  Image<std::uint8_t> mask;   // 0 = excluded
  bool has_mask = false;
  PointCloud<float> cloud;
};

struct TraversalData {
  int traversal_id = 0;
  bool held_out = false;
  std::vector<FrameData> frames;
};

struct TraversalDataset {
  SceneManifest manifest;
  std::vector<TraversalData> traversals;

  std::vector<int> training_traversal_ids() const {
    std::vector<int> ids;
    for (const auto& t : traversals)
      if (!t.held_out) ids.push_back(t.traversal_id);
    return ids;
  }
};

// Manifest (JSON) round trip.
SceneManifest read_manifest(const std::string& path);
void write_manifest(const SceneManifest& manifest, const std::string& path);

// Loads and eagerly validates a whole scene; the error message lists every
// violation found, each naming the offending frame.
TraversalDataset load_scene(const std::string& manifest_path);

// Point cloud binary format (magic MTPC, little-endian float32 rows).
void write_point_cloud(const std::string& path, const PointCloud<float>& cloud);
PointCloud<float> read_point_cloud(const std::string& path);

// Versioned checkpoint: JSON header followed by raw little-endian parameter
// arrays (and Adam moments when saved with optimizer state); round trips are
// bit-exact.
struct CameraLearnable {
  int traversal_id = 0;
  int frame_id = 0;
  int camera_id = 0;
  Vec6<float> pose_delta = Vec6<float>::Zero();
  Mat3<float> affine_w = Mat3<float>::Identity();
  Vec3<float> affine_b = Vec3<float>::Zero();
};

struct Checkpoint {
  SceneGraph<float> graph;
  std::vector<CameraLearnable> cameras;
  std::int64_t step = 0;
  bool has_optimizer_state = false;
};

void save_checkpoint(const std::string& path, const SceneGraph<float>& graph,
                     const std::vector<CameraLearnable>& cameras, std::int64_t step,
                     bool include_optimizer_state);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mtsplat
