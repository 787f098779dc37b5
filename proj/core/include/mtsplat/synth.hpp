#pragma once

#include <string>
#include <vector>

#include "mtsplat/dataio.hpp"

namespace mtsplat {

// Synthetic multi-traversal scene: a textured ground plane and box structures
// shared by all traversals, per-traversal SH appearance residuals, one moving
// cube per traversal, a parked cube in traversal 0 only, and one extra
// held-out lane trajectory for evaluation. Ground truth images/depth/clouds
// are renders of an analytic Gaussian graph, so the graph itself is exact
// ground truth for them.
struct SynthOptions {
  unsigned seed = 0;
  int n_traversals = 3;           // training traversals 0..n-1; held-out id = n
  int frames_per_traversal = 12;
  int width = 160;
  int height = 120;
  double appearance_strength = 1.0;  // 0 = identical appearance in all traversals
  double transient_speed = 3.0;      // m/s along the lane
  bool parked_object = true;
  int workers = 0;  // 0 = default
};

struct SynthResult {
  std::string manifest_path;
  std::string gt_checkpoint_path;
};

// Builds the analytic ground-truth graph (all appearance nodes, including the
// held-out traversal's).
SceneGraph<float> synth_ground_truth_graph(const SynthOptions& opts);

// Camera frames of one traversal (traversal == opts.n_traversals is the
// held-out lane).
std::vector<CameraFrame<float>> synth_cameras(const SynthOptions& opts, int traversal);

// Generates the scene on disk: manifest, images, pseudo-depth, masks, clouds,
// box tracks, and the ground-truth graph checkpoint. Deterministic for a
// fixed seed (byte-identical outputs).
SynthResult synth_scene(const SynthOptions& opts, const std::string& out_dir);

}  // namespace mtsplat
