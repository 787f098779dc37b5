#include "mtsplat/dataio.hpp"

#include <json.hpp>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include "mtsplat/image_io.hpp"

namespace mtsplat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json mat4_to_json(const Mat4<double>& m) {
  json arr = json::array();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) arr.push_back(m(r, c));
  return arr;
}

Mat4<double> mat4_from_json(const json& arr) {
  MTS_REQUIRE(arr.is_array() && arr.size() == 16, "extrinsic must be a 16-number array");
  Mat4<double> m;
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) m(r, c) = arr[r * 4 + c].get<double>();
  return m;
}

}  // namespace

void write_manifest(const SceneManifest& manifest, const std::string& path) {
  json root;
  root["scene"] = manifest.scene_name;
  root["version"] = manifest.version;
  root["units"] = {{"length", "meters"}, {"time", "seconds"}};
  json traversals = json::array();
  for (const auto& trav : manifest.traversals) {
    json t;
    t["traversal_id"] = trav.traversal_id;
    t["held_out"] = trav.held_out;
    json frames = json::array();
    for (const auto& f : trav.frames) {
      json jf;
      jf["frame_id"] = f.frame_id;
      jf["camera_id"] = f.camera_id;
      jf["timestamp"] = f.timestamp;
      jf["intrinsics"] = {{"fx", f.fx}, {"fy", f.fy}, {"cx", f.cx}, {"cy", f.cy}};
      jf["width"] = f.width;
      jf["height"] = f.height;
      jf["extrinsic"] = mat4_to_json(f.extrinsic);
      jf["image"] = f.image_path;
      jf["pseudo_depth"] = f.pseudo_depth_path;
      if (!f.mask_path.empty())
        jf["mask"] = f.mask_path;
      else
        jf["mask"] = nullptr;
      jf["point_cloud"] = f.cloud_path;
      frames.push_back(jf);
    }
    t["frames"] = frames;
    traversals.push_back(t);
  }
  root["traversals"] = traversals;
  json boxes = json::array();
  for (const auto& b : manifest.boxes) {
    json jb;
    jb["node_id"] = b.node_id;
    jb["traversal_id"] = b.traversal_id;
    jb["category"] = b.category;
    jb["extent"] = {b.extent[0], b.extent[1], b.extent[2]};
    json kfs = json::array();
    for (const auto& k : b.keyframes) {
      kfs.push_back({{"time", k.time},
                     {"center", {k.center[0], k.center[1], k.center[2]}},
                     {"quat_wxyz", {k.quat[0], k.quat[1], k.quat[2], k.quat[3]}}});
    }
    jb["keyframes"] = kfs;
    boxes.push_back(jb);
  }
  root["boxes"] = boxes;

  std::ofstream out(path);
  MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
  out << root.dump(2) << "\n";
  MTS_REQUIRE(out.good(), "write failed: " << path);
}

SceneManifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  MTS_REQUIRE(in.good(), "cannot open manifest: " << path);
  json root;
  try {
    in >> root;
  } catch (const json::exception& e) {
    throw UserError("manifest parse error in " + path + ": " + e.what());
  }
  SceneManifest m;
  m.base_dir = fs::path(path).parent_path().string();
  try {
    m.scene_name = root.value("scene", "");
    m.version = root.value("version", 1);
    for (const auto& t : root.at("traversals")) {
      TraversalRecord trav;
      trav.traversal_id = t.at("traversal_id").get<int>();
      trav.held_out = t.value("held_out", false);
      for (const auto& jf : t.at("frames")) {
        FrameRecord f;
        f.frame_id = jf.at("frame_id").get<int>();
        f.camera_id = jf.value("camera_id", 0);
        f.timestamp = jf.at("timestamp").get<double>();
        const auto& intr = jf.at("intrinsics");
        f.fx = intr.at("fx").get<double>();
        f.fy = intr.at("fy").get<double>();
        f.cx = intr.at("cx").get<double>();
        f.cy = intr.at("cy").get<double>();
        f.width = jf.at("width").get<int>();
        f.height = jf.at("height").get<int>();
        f.extrinsic = mat4_from_json(jf.at("extrinsic"));
        f.image_path = jf.at("image").get<std::string>();
        f.pseudo_depth_path = jf.at("pseudo_depth").get<std::string>();
        if (jf.contains("mask") && !jf.at("mask").is_null())
          f.mask_path = jf.at("mask").get<std::string>();
        f.cloud_path = jf.at("point_cloud").get<std::string>();
        trav.frames.push_back(f);
      }
      m.traversals.push_back(trav);
    }
    if (root.contains("boxes")) {
      for (const auto& jb : root.at("boxes")) {
        BoxTrack<float> b;
        b.node_id = jb.at("node_id").get<int>();
        b.traversal_id = jb.at("traversal_id").get<int>();
        b.category = jb.value("category", "");
        for (int k = 0; k < 3; ++k) b.extent[k] = jb.at("extent")[k].get<float>();
        for (const auto& jk : jb.at("keyframes")) {
          BoxKeyframe<float> kf;
          kf.time = jk.at("time").get<double>();
          for (int k = 0; k < 3; ++k) kf.center[k] = jk.at("center")[k].get<float>();
          for (int k = 0; k < 4; ++k) kf.quat[k] = jk.at("quat_wxyz")[k].get<float>();
          b.keyframes.push_back(kf);
        }
        m.boxes.push_back(b);
      }
    }
  } catch (const json::exception& e) {
    throw UserError("manifest schema error in " + path + ": " + e.what());
  }
  return m;
}

TraversalDataset load_scene(const std::string& manifest_path) {
  TraversalDataset ds;
  ds.manifest = read_manifest(manifest_path);
  const fs::path base(ds.manifest.base_dir);
  std::vector<std::string> errors;
  auto frame_tag = [](const TraversalRecord& t, const FrameRecord& f) {
    return "traversal " + std::to_string(t.traversal_id) + " frame " +
           std::to_string(f.frame_id);
  };

  if (ds.manifest.traversals.empty()) errors.push_back("manifest declares no traversals");

  for (const auto& trav : ds.manifest.traversals) {
    TraversalData td;
    td.traversal_id = trav.traversal_id;
    td.held_out = trav.held_out;
    double last_t = -std::numeric_limits<double>::infinity();
    for (const auto& rec : trav.frames) {
      FrameData fd;
      fd.record = rec;
      if (rec.timestamp < last_t)
        errors.push_back(frame_tag(trav, rec) + ": timestamps not non-decreasing");
      last_t = rec.timestamp;
      if (rec.fx <= 0 || rec.fy <= 0)
        errors.push_back(frame_tag(trav, rec) + ": non-positive focal length");
      Mat3<double> rot = rec.extrinsic.topLeftCorner<3, 3>();
      if (std::abs(std::abs(rot.determinant()) - 1.0) > 1e-4)
        errors.push_back(frame_tag(trav, rec) + ": extrinsic rotation not invertible");

      fd.camera.intrinsics = {static_cast<float>(rec.fx), static_cast<float>(rec.fy),
                              static_cast<float>(rec.cx), static_cast<float>(rec.cy)};
      fd.camera.width = rec.width;
      fd.camera.height = rec.height;
      fd.camera.extrinsic = rec.extrinsic.cast<float>();
      fd.camera.timestamp = rec.timestamp;
      fd.camera.traversal_id = trav.traversal_id;
      fd.camera.frame_id = rec.frame_id;
      fd.camera.camera_id = rec.camera_id;

      try {
        fd.image = read_png_rgb8((base / rec.image_path).string());
      } catch (const std::exception& e) {
        errors.push_back(frame_tag(trav, rec) + ": image: " + e.what());
      }
      try {
        fd.pseudo_depth = read_float_map((base / rec.pseudo_depth_path).string());
      } catch (const std::exception& e) {
        errors.push_back(frame_tag(trav, rec) + ": pseudo-depth: " + e.what());
      }
      if (!rec.mask_path.empty()) {
        try {
          fd.mask = read_png_gray8((base / rec.mask_path).string());
          fd.has_mask = true;
        } catch (const std::exception& e) {
          errors.push_back(frame_tag(trav, rec) + ": mask: " + e.what());
        }
      }
      try {
        fd.cloud = read_point_cloud((base / rec.cloud_path).string());
        fd.cloud.timestamp = rec.timestamp;
        fd.cloud.traversal_id = trav.traversal_id;
      } catch (const std::exception& e) {
        errors.push_back(frame_tag(trav, rec) + ": point cloud: " + e.what());
      }

      if (fd.image.width > 0 &&
          (fd.image.width != rec.width || fd.image.height != rec.height))
        errors.push_back(frame_tag(trav, rec) + ": image size does not match manifest");
      if (fd.image.width > 0 && fd.pseudo_depth.width > 0 &&
          (fd.image.width != fd.pseudo_depth.width ||
           fd.image.height != fd.pseudo_depth.height))
        errors.push_back(frame_tag(trav, rec) + ": image/pseudo-depth size mismatch");
      if (fd.has_mask &&
          (fd.mask.width != fd.image.width || fd.mask.height != fd.image.height))
        errors.push_back(frame_tag(trav, rec) + ": image/mask size mismatch");

      td.frames.push_back(std::move(fd));
    }
    if (td.frames.empty())
      errors.push_back("traversal " + std::to_string(trav.traversal_id) + " has no frames");
    ds.traversals.push_back(std::move(td));
  }

  for (const auto& box : ds.manifest.boxes) {
    try {
      box.validate();
    } catch (const std::exception& e) {
      errors.push_back(std::string("box track: ") + e.what());
    }
  }

  if (!errors.empty()) {
    std::string msg = "scene validation failed:\n";
    for (const auto& e : errors) msg += "  - " + e + "\n";
    throw UserError(msg);
  }
  return ds;
}

namespace {
constexpr char kCloudMagic[4] = {'M', 'T', 'P', 'C'};
constexpr std::uint32_t kCloudVersion = 1;
}  // namespace

void write_point_cloud(const std::string& path, const PointCloud<float>& cloud) {
  cloud.validate();
  std::ofstream out(path, std::ios::binary);
  MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
  out.write(kCloudMagic, 4);
  out.write(reinterpret_cast<const char*>(&kCloudVersion), 4);
  std::uint64_t count = cloud.size();
  out.write(reinterpret_cast<const char*>(&count), 8);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    float row[6] = {cloud.points[i][0], cloud.points[i][1], cloud.points[i][2],
                    cloud.colors[i][0], cloud.colors[i][1], cloud.colors[i][2]};
    out.write(reinterpret_cast<const char*>(row), sizeof(row));
  }
  MTS_REQUIRE(out.good(), "write failed: " << path);
}

PointCloud<float> read_point_cloud(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  MTS_REQUIRE(in.good(), "cannot open: " << path);
  char magic[4];
  in.read(magic, 4);
  MTS_REQUIRE(in.good() && std::memcmp(magic, kCloudMagic, 4) == 0,
              "not a point cloud file: " << path);
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), 4);
  MTS_REQUIRE(version == kCloudVersion, "unsupported point cloud version " << version);
  std::uint64_t count = 0;
  in.read(reinterpret_cast<char*>(&count), 8);
  MTS_REQUIRE(in.good(), "truncated point cloud header: " << path);
  PointCloud<float> cloud;
  cloud.points.resize(count);
  cloud.colors.resize(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    float row[6];
    in.read(reinterpret_cast<char*>(row), sizeof(row));
    MTS_REQUIRE(in.good(), "truncated point cloud data: " << path);
    cloud.points[i] = Vec3<float>(row[0], row[1], row[2]);
    cloud.colors[i] = Vec3<float>(row[3], row[4], row[5]);
  }
  return cloud;
}

}  // namespace mtsplat
