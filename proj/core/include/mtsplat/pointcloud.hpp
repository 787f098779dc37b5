#pragma once

#include <string>
#include <vector>

#include "mtsplat/geometry.hpp"

namespace mtsplat {

// Colored point cloud (K x 6: xyz in meters, rgb in [0,1]) captured at one
// timestamp of one traversal.
template <class T>
struct PointCloud {
  std::vector<Vec3<T>> points;
  std::vector<Vec3<T>> colors;
  double timestamp = 0.0;
  int traversal_id = 0;

  std::size_t size() const { return points.size(); }

  void validate() const {
    MTS_REQUIRE(points.size() == colors.size(), "point cloud: xyz/rgb count mismatch");
    for (const auto& p : points)
      MTS_REQUIRE(p.allFinite(), "point cloud: non-finite coordinate");
  }
};

template <class T>
struct BoxKeyframe {
  double time = 0.0;
  Vec3<T> center = Vec3<T>::Zero();
  Vec4<T> quat = Vec4<T>(T(1), T(0), T(0), T(0));  // (w,x,y,z)
};

// Annotated 3D bounding-box track of one object in one traversal.
template <class T>
struct BoxTrack {
  int node_id = 0;
  int traversal_id = 0;
  std::string category;
  Vec3<T> extent = Vec3<T>::Ones();  // full side lengths, meters
  std::vector<BoxKeyframe<T>> keyframes;  // time-ordered

  void validate() const {
    MTS_REQUIRE(extent.minCoeff() > T(0), "box track " << node_id << ": extent must be positive");
    for (std::size_t i = 1; i < keyframes.size(); ++i)
      MTS_REQUIRE(keyframes[i - 1].time <= keyframes[i].time,
                  "box track " << node_id << ": keyframes out of order");
  }
};

}  // namespace mtsplat
