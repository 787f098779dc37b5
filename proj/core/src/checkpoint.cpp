#include <json.hpp>

#include <cstring>
#include <fstream>

#include "mtsplat/dataio.hpp"

namespace mtsplat {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'T', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

struct Writer {
  std::ofstream out;

  explicit Writer(const std::string& path) : out(path, std::ios::binary) {
    MTS_REQUIRE(out.good(), "cannot open for writing: " << path);
  }
  void bytes(const void* p, std::size_t n) {
    out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
  }
  template <class V>
  void vecs(const std::vector<V>& v) {
    for (const auto& e : v) bytes(e.data(), sizeof(float) * e.size());
  }
  void scalars(const std::vector<float>& v) { bytes(v.data(), sizeof(float) * v.size()); }
  void rests(const std::vector<ShRest<float>>& v) {
    for (const auto& block : v)
      for (const auto& row : block) bytes(row.data(), sizeof(float) * 3);
  }
  template <class V>
  void param(const Param<float, V>& p, bool moments) {
    if constexpr (std::is_same_v<V, float>) {
      scalars(p.value);
      if (moments) {
        scalars(p.m1);
        scalars(p.m2);
      }
    } else if constexpr (std::is_same_v<V, ShRest<float>>) {
      rests(p.value);
      if (moments) {
        rests(p.m1);
        rests(p.m2);
      }
    } else {
      vecs(p.value);
      if (moments) {
        vecs(p.m1);
        vecs(p.m2);
      }
    }
  }
  void gaussians(const GaussianSet<float>& g, bool moments) {
    param(g.positions, moments);
    param(g.quaternions, moments);
    param(g.log_scales, moments);
    param(g.opacity_logits, moments);
    param(g.sh_base, moments);
    if (g.has_sh_rest) param(g.sh_rest, moments);
  }
};

struct Reader {
  std::ifstream in;
  std::string path;

  explicit Reader(const std::string& p) : in(p, std::ios::binary), path(p) {
    MTS_REQUIRE(in.good(), "cannot open checkpoint: " << p);
  }
  void bytes(void* p, std::size_t n) {
    in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
    MTS_REQUIRE(in.good(), "truncated checkpoint: " << path);
  }
  template <class V>
  void vecs(std::vector<V>& v) {
    for (auto& e : v) bytes(e.data(), sizeof(float) * e.size());
  }
  void scalars(std::vector<float>& v) { bytes(v.data(), sizeof(float) * v.size()); }
  void rests(std::vector<ShRest<float>>& v) {
    for (auto& block : v)
      for (auto& row : block) bytes(row.data(), sizeof(float) * 3);
  }
  template <class V>
  void param(Param<float, V>& p, std::size_t n, bool moments) {
    p.resize(n, param_zero<V>());
    if constexpr (std::is_same_v<V, float>) {
      scalars(p.value);
      if (moments) {
        scalars(p.m1);
        scalars(p.m2);
      }
    } else if constexpr (std::is_same_v<V, ShRest<float>>) {
      rests(p.value);
      if (moments) {
        rests(p.m1);
        rests(p.m2);
      }
    } else {
      vecs(p.value);
      if (moments) {
        vecs(p.m1);
        vecs(p.m2);
      }
    }
  }
  void gaussians(GaussianSet<float>& g, std::size_t n, bool moments) {
    param(g.positions, n, moments);
    param(g.quaternions, n, moments);
    param(g.log_scales, n, moments);
    param(g.opacity_logits, n, moments);
    param(g.sh_base, n, moments);
    if (g.has_sh_rest) param(g.sh_rest, n, moments);
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const SceneGraph<float>& graph,
                     const std::vector<CameraLearnable>& cameras, std::int64_t step,
                     bool include_optimizer_state) {
  graph.check_invariants();
  json header;
  header["static_count"] = graph.static_node.gaussians.size();
  header["l_max"] = 3;
  header["step"] = step;
  header["optimizer_state"] = include_optimizer_state;
  json appearance = json::array();
  for (const auto& [tid, node] : graph.appearance)
    appearance.push_back({{"traversal_id", tid},
                          {"count", node.residuals.size()},
                          {"trajectory_count", node.trajectory.size()}});
  header["appearance"] = appearance;
  json transients = json::array();
  for (const auto& node : graph.transients)
    transients.push_back({{"traversal_id", node.traversal_id},
                          {"node_id", node.node_id},
                          {"category", node.category},
                          {"count", node.gaussians.size()},
                          {"keyframes", node.keyframes.size()},
                          {"size", {node.size[0], node.size[1], node.size[2]}},
                          {"tolerance", node.tolerance},
                          {"is_static", node.is_static_object}});
  header["transients"] = transients;
  header["cameras"] = cameras.size();

  const std::string header_str = header.dump();
  const std::string tmp = path + ".tmp";
  {
    Writer w(tmp);
    w.bytes(kMagic, 4);
    w.bytes(&kVersion, 4);
    std::uint64_t len = header_str.size();
    w.bytes(&len, 8);
    w.bytes(header_str.data(), header_str.size());

    const bool moments = include_optimizer_state;
    w.gaussians(graph.static_node.gaussians, moments);
    for (const auto& [tid, node] : graph.appearance) {
      w.param(node.residuals, moments);
      w.vecs(node.trajectory);
    }
    for (const auto& node : graph.transients) {
      w.gaussians(node.gaussians, moments);
      for (const auto& kf : node.keyframes) {
        double t = kf.time;
        w.bytes(&t, 8);
        w.bytes(kf.base_quat.data(), 4 * sizeof(float));
        w.bytes(kf.translation.data(), 3 * sizeof(float));
        w.bytes(kf.delta_quat.data(), 4 * sizeof(float));
        if (moments) {
          w.bytes(kf.translation_m1.data(), 3 * sizeof(float));
          w.bytes(kf.translation_m2.data(), 3 * sizeof(float));
          w.bytes(kf.delta_quat_m1.data(), 4 * sizeof(float));
          w.bytes(kf.delta_quat_m2.data(), 4 * sizeof(float));
        }
      }
    }
    for (const auto& cam : cameras) {
      std::int32_t ids[3] = {cam.traversal_id, cam.frame_id, cam.camera_id};
      w.bytes(ids, sizeof(ids));
      w.bytes(cam.pose_delta.data(), 6 * sizeof(float));
      w.bytes(cam.affine_w.data(), 9 * sizeof(float));
      w.bytes(cam.affine_b.data(), 3 * sizeof(float));
    }
    MTS_REQUIRE(w.out.good(), "write failed: " << tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  MTS_REQUIRE(!ec, "atomic rename failed for " << path << ": " << ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  MTS_REQUIRE(std::memcmp(magic, kMagic, 4) == 0, "not a checkpoint file: " << path);
  std::uint32_t version = 0;
  r.bytes(&version, 4);
  MTS_REQUIRE(version == kVersion,
              "unsupported checkpoint version " << version << " (expected " << kVersion << ")");
  std::uint64_t len = 0;
  r.bytes(&len, 8);
  std::string header_str(len, '\0');
  r.bytes(header_str.data(), len);
  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw UserError(std::string("corrupt checkpoint header: ") + e.what());
  }

  Checkpoint ck;
  ck.step = header.value("step", 0);
  ck.has_optimizer_state = header.value("optimizer_state", false);
  const bool moments = ck.has_optimizer_state;
  const std::size_t n_static = header.at("static_count").get<std::size_t>();
  r.gaussians(ck.graph.static_node.gaussians, n_static, moments);
  for (const auto& ja : header.at("appearance")) {
    AppearanceNode<float> node;
    node.traversal_id = ja.at("traversal_id").get<int>();
    const std::size_t n = ja.at("count").get<std::size_t>();
    MTS_REQUIRE(n == n_static, "checkpoint appearance node out of lockstep");
    r.param(node.residuals, n, moments);
    node.trajectory.resize(ja.at("trajectory_count").get<std::size_t>());
    r.vecs(node.trajectory);
    ck.graph.appearance[node.traversal_id] = std::move(node);
  }
  for (const auto& jt : header.at("transients")) {
    TransientNode<float> node;
    node.traversal_id = jt.at("traversal_id").get<int>();
    node.node_id = jt.at("node_id").get<int>();
    node.category = jt.value("category", "");
    for (int k = 0; k < 3; ++k) node.size[k] = jt.at("size")[k].get<float>();
    node.tolerance = jt.at("tolerance").get<float>();
    node.is_static_object = jt.at("is_static").get<bool>();
    r.gaussians(node.gaussians, jt.at("count").get<std::size_t>(), moments);
    node.keyframes.resize(jt.at("keyframes").get<std::size_t>());
    for (auto& kf : node.keyframes) {
      r.bytes(&kf.time, 8);
      r.bytes(kf.base_quat.data(), 4 * sizeof(float));
      r.bytes(kf.translation.data(), 3 * sizeof(float));
      r.bytes(kf.delta_quat.data(), 4 * sizeof(float));
      if (moments) {
        r.bytes(kf.translation_m1.data(), 3 * sizeof(float));
        r.bytes(kf.translation_m2.data(), 3 * sizeof(float));
        r.bytes(kf.delta_quat_m1.data(), 4 * sizeof(float));
        r.bytes(kf.delta_quat_m2.data(), 4 * sizeof(float));
      }
    }
    ck.graph.transients.push_back(std::move(node));
  }
  ck.cameras.resize(header.value("cameras", std::size_t{0}));
  for (auto& cam : ck.cameras) {
    std::int32_t ids[3];
    r.bytes(ids, sizeof(ids));
    cam.traversal_id = ids[0];
    cam.frame_id = ids[1];
    cam.camera_id = ids[2];
    r.bytes(cam.pose_delta.data(), 6 * sizeof(float));
    r.bytes(cam.affine_w.data(), 9 * sizeof(float));
    r.bytes(cam.affine_b.data(), 3 * sizeof(float));
  }
  ck.graph.check_invariants();
  return ck;
}

}  // namespace mtsplat
