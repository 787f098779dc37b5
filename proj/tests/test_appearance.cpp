#include "doctest.h"
#include "mtsplat/appearance.hpp"
#include "support/scene_fixtures.hpp"
#include "support/test_support.hpp"

using namespace mtsplat;

namespace {

// World points back-projected from pixel centers, colored from the image.
template <class T>
void sample_points(const Image<T>& img, const CameraFrame<T>& cam, int stride, T depth_lo,
                   T depth_hi, std::mt19937& g, std::vector<Vec3<T>>* pts,
                   std::vector<Vec3<T>>* colors) {
  const auto& K = cam.intrinsics;
  for (int y = 2; y < img.height - 2; y += stride)
    for (int x = 2; x < img.width - 2; x += stride) {
      T d = T(testsup::uniform(g, depth_lo, depth_hi));
      T u = T(x) + T(0.5), v = T(y) + T(0.5);
      pts->push_back(Vec3<T>((u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d));
      colors->push_back(Vec3<T>(img.at(x, y, 0), img.at(x, y, 1), img.at(x, y, 2)));
    }
}

template <class T>
Image<T> smooth_image(int w, int h) {
  Image<T> img(w, h, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(x, y, 0) = T(0.4 + 0.25 * std::sin(0.31 * x) * std::cos(0.21 * y));
      img.at(x, y, 1) = T(0.5 + 0.2 * std::sin(0.17 * x + 0.4));
      img.at(x, y, 2) = T(0.45 + 0.3 * std::cos(0.23 * y));
    }
  return img;
}

}  // namespace

TEST_CASE("project_points pinhole geometry") {
  auto cam = testsup::make_camera<double>(100, 100, 100.0);
  std::vector<Vec3<double>> pts{Vec3<double>(0, 0, 10)};
  std::vector<Vec3<double>> colors{Vec3<double>(1, 0, 0)};
  auto proj = project_points(pts, colors, cam);
  REQUIRE(proj.size() == 1);
  CHECK(proj[0].px == 50);
  CHECK(proj[0].py == 50);
  CHECK(proj[0].depth == doctest::Approx(10.0));
}

TEST_CASE("project_points excludes points behind the camera") {
  auto cam = testsup::make_camera<double>(64, 64, 60.0);
  std::vector<Vec3<double>> pts{Vec3<double>(0, 0, -3), Vec3<double>(0, 0, 0)};
  std::vector<Vec3<double>> colors(2, Vec3<double>::Zero());
  CHECK(project_points(pts, colors, cam).empty());
}

TEST_CASE("project_points keeps the nearer point per pixel") {
  auto cam = testsup::make_camera<double>(64, 64, 60.0);
  std::vector<Vec3<double>> pts{Vec3<double>(0, 0, 8), Vec3<double>(0, 0, 5)};
  std::vector<Vec3<double>> colors{Vec3<double>(1, 0, 0), Vec3<double>(0, 1, 0)};
  auto proj = project_points(pts, colors, cam);
  REQUIRE(proj.size() == 1);
  CHECK(proj[0].depth == doctest::Approx(5.0));
  CHECK(proj[0].color[1] == doctest::Approx(1.0));
}

TEST_CASE("exposure_align: image already matching point colors yields identity") {
  auto g = testsup::rng(401);
  auto cam = testsup::make_camera<double>(64, 48, 60.0);
  auto img = smooth_image<double>(64, 48);
  std::vector<Vec3<double>> pts, colors;
  sample_points(img, cam, 3, 4.0, 9.0, g, &pts, &colors);
  auto proj = project_points(pts, colors, cam);
  REQUIRE(proj.size() >= 30);
  auto sol = exposure_align(img, proj);
  CHECK(!sol.identity_fallback);
  CHECK((sol.gain - Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-9);
  CHECK(sol.bias.cwiseAbs().maxCoeff() < 1e-9);
  CHECK(sol.residual_rms < 1e-9);
}

TEST_CASE("exposure_align inverts a synthetic gain/bias corruption") {
  auto g = testsup::rng(409);
  auto cam = testsup::make_camera<double>(64, 48, 60.0);
  auto img = smooth_image<double>(64, 48);
  std::vector<Vec3<double>> pts, colors;
  sample_points(img, cam, 2, 4.0, 9.0, g, &pts, &colors);
  auto proj = project_points(pts, colors, cam);

  Image<double> corrupted = img;
  for (auto& v : corrupted.data) v = 0.5 * v + 0.05;
  auto sol = exposure_align(corrupted, proj);
  CHECK(!sol.identity_fallback);
  CHECK((sol.gain - 2.0 * Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-3);
  CHECK((sol.bias - Vec3<double>::Constant(-0.1)).cwiseAbs().maxCoeff() < 1e-3);

  auto corrected = exposure_apply(corrupted, sol);
  double max_err = 0;
  for (std::size_t i = 0; i < img.data.size(); ++i)
    max_err = std::max(max_err, std::abs(corrected.data[i] - img.data[i]));
  CHECK(max_err < 1e-3);
}

TEST_CASE("exposure_align flags too-few points with identity") {
  auto g = testsup::rng(419);
  auto cam = testsup::make_camera<double>(64, 48, 60.0);
  auto img = smooth_image<double>(64, 48);
  std::vector<Vec3<double>> pts, colors;
  sample_points(img, cam, 16, 4.0, 9.0, g, &pts, &colors);
  pts.resize(10);
  colors.resize(10);
  auto sol = exposure_align(img, project_points(pts, colors, cam));
  CHECK(sol.identity_fallback);
  CHECK(sol.gain.isApprox(Mat3<double>::Identity()));
}

TEST_CASE("exposure_align is idempotent") {
  auto g = testsup::rng(421);
  auto cam = testsup::make_camera<double>(64, 48, 60.0);
  auto img = smooth_image<double>(64, 48);
  std::vector<Vec3<double>> pts, colors;
  sample_points(img, cam, 2, 4.0, 9.0, g, &pts, &colors);
  auto proj = project_points(pts, colors, cam);

  Image<double> corrupted = img;
  for (auto& v : corrupted.data) v = 0.8 * v + 0.03;
  auto corrected = exposure_apply(corrupted, exposure_align(corrupted, proj));
  auto sol2 = exposure_align(corrected, proj);
  CHECK((sol2.gain - Mat3<double>::Identity()).cwiseAbs().maxCoeff() < 1e-6);
  CHECK(sol2.bias.cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("camera_affine_apply examples") {
  auto img = smooth_image<double>(20, 16);
  CameraFrame<double> frame;
  frame.width = 20;
  frame.height = 16;

  SUBCASE("identity leaves the image unchanged bit for bit") {
    auto out = camera_affine_apply(img, frame);
    CHECK(out.data == img.data);
  }
  SUBCASE("uniform scale and offset") {
    frame.affine_w = 0.9 * Mat3<double>::Identity();
    frame.affine_b = Vec3<double>::Constant(0.1);
    auto out = camera_affine_apply(img, frame);
    for (std::size_t i = 0; i < img.data.size(); ++i)
      CHECK(out.data[i] == doctest::Approx(0.9 * img.data[i] + 0.1).epsilon(1e-12));
  }
}

TEST_CASE("affine gradients through the photometric loss match finite differences") {
  auto g = testsup::rng(431);
  auto render = smooth_image<double>(20, 16);
  Image<double> gt(20, 16, 3);
  for (auto& v : gt.data) v = testsup::uniform(g, 0.1, 0.9);
  CameraFrame<double> frame;
  frame.width = 20;
  frame.height = 16;
  frame.affine_w = Mat3<double>::Identity() * 0.95;
  frame.affine_w(0, 1) = 0.03;
  frame.affine_b = Vec3<double>(0.02, -0.01, 0.04);

  auto f = [&]() {
    auto adjusted = camera_affine_apply(render, frame);
    return photometric_loss<double>(adjusted, gt, nullptr, 0.8, nullptr, nullptr, nullptr);
  };

  frame.affine_w_grad.setZero();
  frame.affine_b_grad.setZero();
  auto adjusted = camera_affine_apply(render, frame);
  Image<double> g_adj(20, 16, 3, 0.0);
  photometric_loss<double>(adjusted, gt, nullptr, 0.8, nullptr, nullptr, nullptr, &g_adj);
  Image<double> g_render(20, 16, 3, 0.0);
  camera_affine_backward(render, g_adj, &frame, &g_render);

  std::vector<double*> params;
  std::vector<double> grads;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      params.push_back(&frame.affine_w(r, c));
      grads.push_back(frame.affine_w_grad(r, c));
    }
  for (int k = 0; k < 3; ++k) {
    params.push_back(&frame.affine_b[k]);
    grads.push_back(frame.affine_b_grad[k]);
  }
  auto res = testsup::grad_check(f, params, grads, 1e-6);
  CHECK(res.max_rel_err < 1e-5);
}
