#pragma once

#include <algorithm>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "mtsplat/geometry.hpp"

namespace mtsplat {

// Uniform hash grid for k-nearest-neighbor queries over point sets; used by
// outlier removal and scale initialization.
template <class T>
class SpatialGrid {
 public:
  SpatialGrid(const std::vector<Vec3<T>>& points, T cell) : points_(points), cell_(cell) {
    MTS_CHECK(cell > T(0), "spatial grid cell must be positive");
    cells_.reserve(points.size());
    for (std::size_t i = 0; i < points.size(); ++i)
      cells_[key_of(points[i])].push_back(static_cast<std::int32_t>(i));
  }

  // Squared distances to the k nearest neighbors of points_[query_index]
  // (excluding itself), ascending. May return fewer when the set is small.
  std::vector<T> knn_sq_dists(std::size_t query_index, int k) const {
    const Vec3<T>& q = points_[query_index];
    std::vector<T> best;
    best.reserve(k + 1);
    auto qi = cell_index(q);
    for (int ring = 0;; ++ring) {
      // candidates in the shell at Chebyshev distance `ring`
      for (int dz = -ring; dz <= ring; ++dz)
        for (int dy = -ring; dy <= ring; ++dy)
          for (int dx = -ring; dx <= ring; ++dx) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            auto it = cells_.find(pack(qi[0] + dx, qi[1] + dy, qi[2] + dz));
            if (it == cells_.end()) continue;
            for (std::int32_t idx : it->second) {
              if (static_cast<std::size_t>(idx) == query_index) continue;
              T d2 = (points_[idx] - q).squaredNorm();
              auto pos = std::lower_bound(best.begin(), best.end(), d2);
              if (best.size() < static_cast<std::size_t>(k)) {
                best.insert(pos, d2);
              } else if (pos != best.end()) {
                best.insert(pos, d2);
                best.pop_back();
              }
            }
          }
      // after completing shell `ring`, every unseen point lies farther than
      // (ring-1)*cell; stop once the kth best is inside that bound
      T safe = T(ring - 1) * cell_;
      bool done = ring >= 1 && best.size() >= static_cast<std::size_t>(k) &&
                  best.back() <= safe * safe;
      // pathological distributions: settle for the current candidates
      if (ring >= 8 && best.size() >= static_cast<std::size_t>(k)) done = true;
      if (done || ring > max_ring()) break;
    }
    return best;
  }

 private:
  std::array<std::int64_t, 3> cell_index(const Vec3<T>& p) const {
    return {static_cast<std::int64_t>(std::floor(p[0] / cell_)),
            static_cast<std::int64_t>(std::floor(p[1] / cell_)),
            static_cast<std::int64_t>(std::floor(p[2] / cell_))};
  }
  static std::uint64_t pack(std::int64_t x, std::int64_t y, std::int64_t z) {
    auto m = [](std::int64_t v) { return static_cast<std::uint64_t>(v + (1 << 20)) & 0x1FFFFF; };
    return (m(x) << 42) | (m(y) << 21) | m(z);
  }
  std::uint64_t key_of(const Vec3<T>& p) const {
    auto c = cell_index(p);
    return pack(c[0], c[1], c[2]);
  }
  int max_ring() const { return 64; }

  const std::vector<Vec3<T>>& points_;
  T cell_;
  std::unordered_map<std::uint64_t, std::vector<std::int32_t>> cells_;
};

// Heuristic cell size: roughly the mean spacing of n points in their bounding
// box. Collapsed dimensions (planar or linear clouds) are left out of the
// density estimate so the cells stay commensurate with actual spacing.
template <class T>
T knn_cell_heuristic(const std::vector<Vec3<T>>& points) {
  if (points.size() < 2) return T(1);
  Vec3<T> lo = points[0], hi = points[0];
  for (const auto& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  Vec3<T> extent = hi - lo;
  T measure = T(1);
  int dims = 0;
  for (int k = 0; k < 3; ++k) {
    if (extent[k] > T(1e-6)) {
      measure *= extent[k];
      ++dims;
    }
  }
  if (dims == 0) return T(1);
  T spacing = std::pow(measure / T(points.size()), T(1) / T(dims));
  return std::max(T(1e-3), spacing);
}

}  // namespace mtsplat
