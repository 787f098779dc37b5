#include "doctest.h"
#include "mtsplat/losses.hpp"
#include "support/test_support.hpp"

using namespace mtsplat;

namespace {

// Independent SSIM reference: direct per-pixel double loop over fully-inside
// 11x11 windows with an inline Gaussian kernel.
double naive_ssim(const Image<double>& x, const Image<double>& y) {
  std::vector<double> k(11);
  double ksum = 0;
  for (int i = 0; i < 11; ++i) {
    double d = i - 5;
    k[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;
  const double c1 = 0.0001, c2 = 0.0009;
  double total = 0;
  std::size_t count = 0;
  for (int c = 0; c < x.channels; ++c)
    for (int py = 5; py < x.height - 5; ++py)
      for (int px = 5; px < x.width - 5; ++px) {
        double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
        for (int dy = -5; dy <= 5; ++dy)
          for (int dx = -5; dx <= 5; ++dx) {
            double wgt = k[dx + 5] * k[dy + 5];
            double a = x.at(px + dx, py + dy, c), b = y.at(px + dx, py + dy, c);
            mx += wgt * a;
            my += wgt * b;
            xx += wgt * a * a;
            yy += wgt * b * b;
            xy += wgt * a * b;
          }
        double sxx = xx - mx * mx, syy = yy - my * my, sxy = xy - mx * my;
        total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
                 ((mx * mx + my * my + c1) * (sxx + syy + c2));
        ++count;
      }
  return total / count;
}

Image<double> random_image(std::mt19937& g, int w, int h, int ch, double lo, double hi) {
  Image<double> img(w, h, ch);
  for (auto& v : img.data) v = testsup::uniform(g, lo, hi);
  return img;
}

}  // namespace

TEST_CASE("photometric: identical images give zero") {
  auto g = testsup::rng(301);
  auto img = random_image(g, 24, 20, 3, 0.1, 0.9);
  bool empty = false;
  double loss = photometric_loss<double>(img, img, nullptr, 0.8, nullptr, nullptr, &empty);
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(!empty);
}

TEST_CASE("photometric: constant offset matches the reference SSIM oracle") {
  Image<double> a(24, 20, 3, 0.4), b(24, 20, 3, 0.5);
  double l1 = 0, ssim_term = 0;
  double loss = photometric_loss<double>(a, b, nullptr, 0.8, &l1, &ssim_term, nullptr);
  CHECK(l1 == doctest::Approx(0.1).epsilon(1e-12));
  double ref = naive_ssim(a, b);
  CHECK(loss == doctest::Approx(0.8 * 0.1 + 0.2 * (1.0 - ref)).epsilon(1e-9));
}

TEST_CASE("photometric: mask excluding all differing pixels gives zero") {
  auto g = testsup::rng(307);
  auto a = random_image(g, 32, 32, 3, 0.2, 0.8);
  auto b = a;
  Image<std::uint8_t> mask(32, 32, 1, 255);
  // corrupt right half, mask it out
  for (int y = 0; y < 32; ++y)
    for (int x = 16; x < 32; ++x) {
      for (int c = 0; c < 3; ++c) b.at(x, y, c) = testsup::uniform(g, 0, 1);
      mask.at(x, y) = 0;
    }
  double loss = photometric_loss<double>(a, b, &mask, 0.8, nullptr, nullptr, nullptr);
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("photometric: masked loss equals loss on the cropped support") {
  auto g = testsup::rng(311);
  auto a = random_image(g, 48, 40, 3, 0.0, 1.0);
  auto b = random_image(g, 48, 40, 3, 0.0, 1.0);
  Image<std::uint8_t> mask(48, 40, 1, 0);
  const int x0 = 8, y0 = 4, cw = 30, chh = 28;
  for (int y = y0; y < y0 + chh; ++y)
    for (int x = x0; x < x0 + cw; ++x) mask.at(x, y) = 255;
  double masked = photometric_loss<double>(a, b, &mask, 0.8, nullptr, nullptr, nullptr);

  Image<double> ac(cw, chh, 3), bc(cw, chh, 3);
  for (int y = 0; y < chh; ++y)
    for (int x = 0; x < cw; ++x)
      for (int c = 0; c < 3; ++c) {
        ac.at(x, y, c) = a.at(x0 + x, y0 + y, c);
        bc.at(x, y, c) = b.at(x0 + x, y0 + y, c);
      }
  double cropped = photometric_loss<double>(ac, bc, nullptr, 0.8, nullptr, nullptr, nullptr);
  CHECK(masked == doctest::Approx(cropped).epsilon(1e-12));
}

TEST_CASE("depth_inv_l1 examples") {
  Image<double> pred(4, 4, 1, 0.0), alpha(4, 4, 1, 1.0);
  pred.at(1, 1) = 2.0;
  pred.at(2, 2) = 10.0;

  SUBCASE("exact depth gives zero") {
    std::vector<DepthSample<double>> s{{1, 1, 2.0}};
    CHECK(depth_inv_l1<double>(pred, alpha, s) == doctest::Approx(0.0));
  }
  SUBCASE("single pixel arithmetic") {
    std::vector<DepthSample<double>> s{{1, 1, 1.0}};
    CHECK(depth_inv_l1<double>(pred, alpha, s) == doctest::Approx(0.5));
  }
  SUBCASE("near-match arithmetic") {
    std::vector<DepthSample<double>> s{{2, 2, 10.1}};
    CHECK(depth_inv_l1<double>(pred, alpha, s) ==
          doctest::Approx(std::abs(0.1 - 1.0 / 10.1)).epsilon(1e-9));
  }
  SUBCASE("pixels without coverage are skipped") {
    Image<double> no_alpha(4, 4, 1, 0.0);
    std::vector<DepthSample<double>> s{{1, 1, 1.0}};
    CHECK(depth_inv_l1<double>(pred, no_alpha, s) == doctest::Approx(0.0));
  }
}

TEST_CASE("ncc: affine transforms of the pseudo depth give zero loss") {
  auto g = testsup::rng(313);
  NCCConfig cfg;
  cfg.patch_size = 8;
  cfg.stride = 4;
  Image<double> pred(24, 16, 1);
  for (auto& v : pred.data) v = testsup::uniform(g, 1.0, 5.0);
  Image<double> pseudo = pred;
  for (auto& v : pseudo.data) v = 2.5 * v + 3.0;  // positive affine
  CHECK(ncc_loss<double>(pred, pseudo, cfg) == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("ncc: anti-correlated patches give loss 2") {
  auto g = testsup::rng(317);
  NCCConfig cfg;
  cfg.patch_size = 8;
  cfg.stride = 8;
  Image<double> pred(16, 8, 1);
  for (auto& v : pred.data) v = testsup::uniform(g, 1.0, 4.0);
  Image<double> pseudo = pred;
  for (auto& v : pseudo.data) v = 6.0 - v;  // stays positive, centered sign flip
  CHECK(ncc_loss<double>(pred, pseudo, cfg) == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("ncc matches a brute-force patch-loop reference") {
  auto g = testsup::rng(331);
  NCCConfig cfg;
  cfg.patch_size = 8;
  cfg.stride = 4;
  Image<double> pred(26, 21, 1), pseudo(26, 21, 1);
  for (auto& v : pred.data) v = testsup::uniform(g, 0.5, 6.0);
  for (auto& v : pseudo.data) v = testsup::uniform(g, 0.5, 6.0);
  // sprinkle invalid pseudo pixels
  for (int i = 0; i < 25; ++i)
    pseudo.data[static_cast<std::size_t>(testsup::uniform(g, 0, pseudo.data.size() - 1))] = -1.0;

  double total = 0;
  int used = 0;
  for (int y0 = 0; y0 + 8 <= 21; y0 += 4)
    for (int x0 = 0; x0 + 8 <= 26; x0 += 4) {
      std::vector<double> a, b;
      int invalid = 0;
      for (int dy = 0; dy < 8; ++dy)
        for (int dx = 0; dx < 8; ++dx) {
          double pa = pred.at(x0 + dx, y0 + dy), pb = pseudo.at(x0 + dx, y0 + dy);
          if (pa <= 0 || pb <= 0) {
            ++invalid;
            continue;
          }
          a.push_back(pa);
          b.push_back(pb);
        }
      if (invalid > static_cast<int>(0.2 * 64) || a.size() < 2) continue;
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
      }
      ma /= a.size();
      mb /= b.size();
      double va = 0, vb = 0, cov = 0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
        cov += (a[i] - ma) * (b[i] - mb);
      }
      double sa = std::max(std::sqrt(va / a.size()), 1e-6);
      double sb = std::max(std::sqrt(vb / b.size()), 1e-6);
      total += cov / (a.size() * sa * sb);
      ++used;
    }
  double expected = used > 0 ? 1.0 - total / used : 0.0;
  CHECK(ncc_loss<double>(pred, pseudo, cfg) == doctest::Approx(expected).epsilon(1e-9));
}

TEST_CASE("pseudo normal of a fronto-parallel plane points at the camera") {
  Intrinsics<double> K{40.0, 40.0, 16.0, 12.0};
  Image<double> depth(32, 24, 1, 5.0);
  auto nm = pseudo_normal_from_depth(depth, K);
  CHECK(nm.valid.at(16, 12) == 1);
  CHECK(nm.normal.at(16, 12, 0) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(nm.normal.at(16, 12, 1) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(nm.normal.at(16, 12, 2) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(nm.valid.at(0, 0) == 0);  // border pixels carry no normal
}

TEST_CASE("pseudo normal of an oblique plane matches the analytic normal") {
  // plane z = z0 + a*y in camera space, viewed at 45 degrees: a = 1
  Intrinsics<double> K{60.0, 60.0, 20.0, 16.0};
  Image<double> depth(40, 32, 1);
  const double z0 = 6.0, a = 1.0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 40; ++x) {
      // depth satisfying z = z0 + a * Y with Y = (v-cy)/fy * z
      double vv = (y + 0.5 - K.cy) / K.fy;
      depth.at(x, y) = z0 / (1.0 - a * vv);
    }
  auto nm = pseudo_normal_from_depth(depth, K);
  // plane normal proportional to (0, -a, 1), camera-facing flip gives (0, a, -1)/sqrt(2)
  Vec3<double> expected = Vec3<double>(0, 1, -1).normalized();
  for (int c = 0; c < 3; ++c)
    CHECK(nm.normal.at(20, 16, c) == doctest::Approx(expected[c]).epsilon(1e-3));
}

TEST_CASE("pseudo normal: invalid neighbors invalidate the pixel") {
  Intrinsics<double> K{40.0, 40.0, 8.0, 8.0};
  Image<double> depth(16, 16, 1, 4.0);
  depth.at(7, 8) = -1.0;
  auto nm = pseudo_normal_from_depth(depth, K);
  CHECK(nm.valid.at(7, 8) == 0);
  CHECK(nm.valid.at(8, 8) == 0);  // neighbor of the invalid pixel
  CHECK(nm.valid.at(10, 8) == 1);
}

TEST_CASE("normal_loss examples") {
  SUBCASE("perfect match with zero TV") {
    Image<double> n(12, 10, 3, 0.5);
    CHECK(normal_loss<double>(n, n, nullptr, nullptr) == doctest::Approx(0.0));
  }
  SUBCASE("constant offset per channel gives 3*delta and zero TV") {
    Image<double> a(12, 10, 3, 0.2), b(12, 10, 3, 0.2 + 0.07);
    CHECK(normal_loss<double>(a, b, nullptr, nullptr) == doctest::Approx(3 * 0.07).epsilon(1e-12));
  }
  SUBCASE("checkerboard TV equals twice the flip magnitude") {
    const double m = 0.3;
    Image<double> cb(4, 4, 3, 0.0);
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 4; ++x) cb.at(x, y, 0) = ((x + y) % 2 == 0) ? m : -m;
    Image<double> target = cb;  // zero data term
    CHECK(normal_loss<double>(cb, target, nullptr, nullptr) == doctest::Approx(2 * m).epsilon(1e-12));
  }
}

TEST_CASE("flatten loss pinned values") {
  FlattenConfig cfg;
  auto log3 = [](double a, double b, double c) {
    return Vec3<double>(std::log(a), std::log(b), std::log(c));
  };
  std::vector<Vec3<double>> iso{log3(1, 1, 1)};
  CHECK(flatten_loss<double>(iso, cfg) == doctest::Approx(1.0).epsilon(1e-9));
  std::vector<Vec3<double>> elongated{log3(100, 1, 0.01)};
  CHECK(flatten_loss<double>(elongated, cfg) == doctest::Approx(90.01).epsilon(1e-9));
  std::vector<Vec3<double>> capped{log3(5, 1, 0.2)};
  CHECK(flatten_loss<double>(capped, cfg) == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("oob loss pinned values") {
  TransientNode<double> node;
  node.size = Vec3<double>(2, 2, 2);
  node.tolerance = 0.5;
  node.gaussians.resize(3);
  node.gaussians.positions.value[0] = Vec3<double>(0, 0, 0);     // inside
  node.gaussians.positions.value[1] = Vec3<double>(1.6, 0, 0);   // outside (1.6 > 1.5)
  node.gaussians.positions.value[2] = Vec3<double>(0, 1.7, 0);   // outside

  SUBCASE("all inside gives zero") {
    TransientNode<double> inside = node;
    inside.gaussians.positions.value[1] = Vec3<double>(1.4, 0, 0);
    inside.gaussians.positions.value[2] = Vec3<double>(0, 0.5, 0);
    CHECK(oob_loss<double>({&inside}) == doctest::Approx(0.0));
    CHECK(inside.oob_indices().empty());
  }
  SUBCASE("boundary arithmetic") {
    auto idx = node.oob_indices();
    REQUIRE(idx.size() == 2);
    CHECK(idx[0] == 1);
  }
  SUBCASE("one out-of-box gaussian at alpha 0.5") {
    TransientNode<double> one = node;
    one.gaussians.positions.value[2] = Vec3<double>(0, 0, 0);
    one.gaussians.opacity_logits.value[1] = logit(0.5);
    CHECK(oob_loss<double>({&one}) == doctest::Approx(0.6931).epsilon(1e-4));
  }
  SUBCASE("two out-of-box gaussians at 0.5 and 0.9") {
    node.gaussians.opacity_logits.value[1] = logit(0.5);
    node.gaussians.opacity_logits.value[2] = logit(0.9);
    CHECK(oob_loss<double>({&node}) == doctest::Approx(1.4979).epsilon(1e-4));
  }
}

TEST_CASE("total loss weighting and diagnostics") {
  LossWeights w;
  LossBreakdown<double> b;
  CHECK(b.total(w) == doctest::Approx(0.0));
  b.l1 = 1.0;
  CHECK(b.total(w) == doctest::Approx(0.8));
  b.ssim = 0.3;
  b.depth = 0.2;
  b.ncc = 0.4;
  b.normal = 0.1;
  b.flatten = 2.0;
  b.oob = 0.7;
  double expect = 0.8 * 1.0 + 0.2 * 0.3 + 0.5 * 0.2 + 0.1 * 0.4 + 0.1 * 0.1 + 1.0 * 2.0 + 1.0 * 0.7;
  CHECK(b.total(w) == doctest::Approx(expect).epsilon(1e-9));
  b.ncc = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(b.total(w), InternalError);
}

TEST_CASE("losses are non-negative on random inputs") {
  auto g = testsup::rng(337);
  for (int trial = 0; trial < 5; ++trial) {
    auto a = random_image(g, 20, 18, 3, 0.0, 1.0);
    auto b = random_image(g, 20, 18, 3, 0.0, 1.0);
    CHECK(photometric_loss<double>(a, b, nullptr, 0.8, nullptr, nullptr, nullptr) >= 0.0);
    Image<double> d1(20, 18, 1), d2(20, 18, 1);
    for (auto& v : d1.data) v = testsup::uniform(g, 0.5, 9.0);
    for (auto& v : d2.data) v = testsup::uniform(g, 0.5, 9.0);
    NCCConfig cfg;
    cfg.patch_size = 8;
    cfg.stride = 4;
    CHECK(ncc_loss<double>(d1, d2, cfg) >= 0.0);
    CHECK(normal_loss<double>(a, b, nullptr, nullptr) >= 0.0);
    std::vector<Vec3<double>> ls{Vec3<double>(testsup::uniform(g, -2, 1),
                                              testsup::uniform(g, -2, 1),
                                              testsup::uniform(g, -2, 1))};
    CHECK(flatten_loss<double>(ls, FlattenConfig{}) > 0.0);  // strictly positive when active
  }
}

TEST_CASE("image-level loss gradients match finite differences") {
  auto g = testsup::rng(347);
  const double h = 1e-6;

  SUBCASE("photometric") {
    auto x = random_image(g, 16, 14, 3, 0.2, 0.8);
    auto y = random_image(g, 16, 14, 3, 0.2, 0.8);
    auto f = [&]() {
      return photometric_loss<double>(x, y, nullptr, 0.8, nullptr, nullptr, nullptr);
    };
    Image<double> gx(16, 14, 3, 0.0);
    photometric_loss<double>(x, y, nullptr, 0.8, nullptr, nullptr, nullptr, &gx);
    std::vector<double*> params;
    std::vector<double> grads;
    for (std::size_t i = 0; i < x.data.size(); i += 7) {  // subsample pixels
      params.push_back(&x.data[i]);
      grads.push_back(gx.data[i]);
    }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("ncc") {
    NCCConfig cfg;
    cfg.patch_size = 8;
    cfg.stride = 4;
    Image<double> x(18, 14, 1), y(18, 14, 1);
    for (auto& v : x.data) v = testsup::uniform(g, 1.0, 6.0);
    for (auto& v : y.data) v = testsup::uniform(g, 1.0, 6.0);
    auto f = [&]() { return ncc_loss<double>(x, y, cfg); };
    Image<double> gx(18, 14, 1, 0.0);
    ncc_loss<double>(x, y, cfg, nullptr, &gx);
    std::vector<double*> params;
    std::vector<double> grads;
    for (std::size_t i = 0; i < x.data.size(); i += 5) {
      params.push_back(&x.data[i]);
      grads.push_back(gx.data[i]);
    }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("normal loss") {
    auto x = random_image(g, 12, 10, 3, -0.9, 0.9);
    auto y = random_image(g, 12, 10, 3, -0.9, 0.9);
    auto f = [&]() { return normal_loss<double>(x, y, nullptr, nullptr); };
    Image<double> gx(12, 10, 3, 0.0);
    normal_loss<double>(x, y, nullptr, nullptr, &gx);
    std::vector<double*> params;
    std::vector<double> grads;
    for (std::size_t i = 0; i < x.data.size(); i += 3) {
      params.push_back(&x.data[i]);
      grads.push_back(gx.data[i]);
    }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("depth inverse L1") {
    Image<double> pred(8, 8, 1, 0.0), alpha(8, 8, 1, 1.0);
    std::vector<DepthSample<double>> samples;
    for (int i = 0; i < 8; ++i) {
      pred.at(i, i) = testsup::uniform(g, 2.0, 9.0);
      samples.push_back({i, i, testsup::uniform(g, 2.0, 9.0)});
    }
    auto f = [&]() { return depth_inv_l1<double>(pred, alpha, samples); };
    Image<double> gd(8, 8, 1, 0.0);
    depth_inv_l1<double>(pred, alpha, samples, 1e-4, &gd);
    std::vector<double*> params;
    std::vector<double> grads;
    for (int i = 0; i < 8; ++i) {
      params.push_back(&pred.at(i, i));
      grads.push_back(gd.at(i, i));
    }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("flatten") {
    std::vector<Vec3<double>> ls;
    for (int i = 0; i < 6; ++i)
      ls.push_back(Vec3<double>(testsup::uniform(g, -2, 1), testsup::uniform(g, -2, 1),
                                testsup::uniform(g, -2, 1)));
    FlattenConfig cfg;
    auto f = [&]() { return flatten_loss<double>(ls, cfg); };
    std::vector<Vec3<double>> gl(ls.size(), Vec3<double>::Zero());
    flatten_loss<double>(ls, cfg, &gl);
    std::vector<double*> params;
    std::vector<double> grads;
    for (std::size_t i = 0; i < ls.size(); ++i)
      for (int k = 0; k < 3; ++k) {
        params.push_back(&ls[i][k]);
        grads.push_back(gl[i][k]);
      }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }

  SUBCASE("out of box") {
    TransientNode<double> node;
    node.size = Vec3<double>(2, 2, 2);
    node.tolerance = 0.4;
    node.gaussians.resize(4);
    node.gaussians.positions.value[0] = Vec3<double>(2.0, 0, 0);
    node.gaussians.positions.value[1] = Vec3<double>(0, -1.9, 0);
    node.gaussians.positions.value[2] = Vec3<double>(0, 0, 0.2);  // inside
    node.gaussians.positions.value[3] = Vec3<double>(0, 0, 3.0);
    for (int i = 0; i < 4; ++i)
      node.gaussians.opacity_logits.value[i] = testsup::uniform(g, -1.0, 1.5);
    auto f = [&]() { return oob_loss<double>({&node}); };
    node.gaussians.zero_grads();
    oob_loss<double>({&node}, true);
    std::vector<double*> params;
    std::vector<double> grads;
    for (int i = 0; i < 4; ++i) {
      params.push_back(&node.gaussians.opacity_logits.value[i]);
      grads.push_back(node.gaussians.opacity_logits.grad[i]);
    }
    auto res = testsup::grad_check(f, params, grads, h);
    CHECK(res.max_rel_err < 1e-4);
  }
}
