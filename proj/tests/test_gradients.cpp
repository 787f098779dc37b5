#include "doctest.h"
#include "mtsplat/rasterizer.hpp"
#include "mtsplat/trainer.hpp"
#include "support/param_collect.hpp"
#include "support/scene_fixtures.hpp"
#include "support/test_support.hpp"

using namespace mtsplat;

namespace {

// Weighted sum over all render buffers: a fixed random linear functional that
// exercises every output channel of the rasterizer.
struct BufferLoss {
  Image<double> wc, wd, wn, wa;

  BufferLoss(int w, int h, std::mt19937& g)
      : wc(w, h, 3), wd(w, h, 1), wn(w, h, 3), wa(w, h, 1) {
    for (auto& v : wc.data) v = testsup::uniform(g, -1, 1);
    for (auto& v : wd.data) v = testsup::uniform(g, -0.1, 0.1);
    for (auto& v : wn.data) v = testsup::uniform(g, -0.3, 0.3);
    for (auto& v : wa.data) v = testsup::uniform(g, -0.5, 0.5);
  }

  double eval(const RenderBuffers<double>& b) const {
    double loss = 0;
    for (std::size_t i = 0; i < wc.data.size(); ++i) loss += wc.data[i] * b.color.data[i];
    for (std::size_t i = 0; i < wd.data.size(); ++i) loss += wd.data[i] * b.depth.data[i];
    for (std::size_t i = 0; i < wn.data.size(); ++i) loss += wn.data[i] * b.normal.data[i];
    for (std::size_t i = 0; i < wa.data.size(); ++i) loss += wa.data[i] * b.alpha.data[i];
    return loss;
  }

  PixelGrads<double> grads() const {
    PixelGrads<double> g(wc.width, wc.height);
    g.color = wc;
    g.depth = wd;
    g.normal = wn;
    g.alpha = wa;
    return g;
  }
};

void run_render_grad_check(int n_static, int n_transient, unsigned seed, double tol) {
  auto g = testsup::rng(seed);
  auto graph = testsup::random_graph<double>(g, n_static, n_transient);
  auto cam = testsup::make_camera<double>(16, 16, 20.0);
  cam.pose_delta << 0.01, -0.02, 0.015, 0.01, 0.02, -0.01;

  RasterizerOptions<double> opts;
  opts.workers = 2;
  opts.alpha_cutoff = 1e-8;
  opts.background = Vec3<double>(0.2, 0.1, 0.3);
  BufferLoss loss(cam.width, cam.height, g);

  auto f = [&]() {
    auto res = render(graph, cam, 0, 0.0, opts);
    return loss.eval(res.buffers);
  };

  testsup::zero_all_grads(graph, {&cam});
  auto res = render(graph, cam, 0, 0.0, opts);
  auto pg = loss.grads();
  render_backward(res, pg, opts, &graph, &cam);

  auto params = testsup::collect_params(graph, {&cam}, /*include_affine=*/false);
  auto check = testsup::grad_check(f, params.values, params.read_grads(), 1e-5);
  INFO("worst param: " << (check.max_rel_err > 0 ? params.names[check.worst_index] : "none")
                       << " analytic=" << check.analytic << " numeric=" << check.numeric);
  CHECK(check.max_rel_err < tol);
}

}  // namespace

TEST_CASE("render gradients: single static splat") { run_render_grad_check(1, 0, 211, 1e-5); }

TEST_CASE("render gradients: static plus transient scene") {
  run_render_grad_check(3, 2, 223, 1e-5);
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
  auto g = testsup::rng(227);
  auto graph = testsup::random_graph<double>(g, 4, 2);
  auto cam = testsup::make_camera<double>(16, 16, 20.0);
  RasterizerOptions<double> opts;
  opts.workers = 2;
  testsup::zero_all_grads(graph, {&cam});
  auto res = render(graph, cam, 0, 0.0, opts);
  PixelGrads<double> pg(cam.width, cam.height);  // zeros
  render_backward(res, pg, opts, &graph, &cam);
  auto params = testsup::collect_params(graph, {&cam}, false);
  for (double gv : params.read_grads()) CHECK(gv == 0.0);
}

TEST_CASE("full training objective gradients match finite differences") {
  auto fx = testsup::make_validated_full_loss_fixture(331);
  LossWeights weights;
  FlattenConfig flatten_cfg;
  StepFlags<double> flags;

  auto f = [&]() {
    StepFlags<double> eval_flags = flags;
    eval_flags.with_grads = false;
    auto bd = training_step_eval<double>(&fx.graph, &fx.camera, fx.targets, fx.opts, weights,
                                         fx.ncc_cfg, flatten_cfg, eval_flags);
    return static_cast<double>(bd.total(weights));
  };

  testsup::zero_all_grads(fx.graph, {&fx.camera});
  auto bd = training_step_eval<double>(&fx.graph, &fx.camera, fx.targets, fx.opts, weights,
                                       fx.ncc_cfg, flatten_cfg, flags);
  // every term should be live in this fixture
  CHECK(bd.l1 > 0);
  CHECK(bd.ssim > 0);
  CHECK(bd.depth > 0);
  CHECK(bd.ncc > 0);
  CHECK(bd.normal > 0);
  CHECK(bd.flatten > 0);
  CHECK(bd.oob > 0);

  auto params = testsup::collect_params(fx.graph, {&fx.camera}, /*include_affine=*/true);
  auto check = testsup::grad_check(f, params.values, params.read_grads(), 1e-4);
  INFO("worst param: " << (params.names.empty() ? "none" : params.names[check.worst_index])
                       << " analytic=" << check.analytic << " numeric=" << check.numeric);
  CHECK(check.max_rel_err < 1e-4);
}

TEST_CASE("backward is deterministic for a fixed worker count") {
  auto g = testsup::rng(229);
  auto graph = testsup::random_graph<double>(g, 30, 4);
  auto cam = testsup::make_camera<double>(32, 24, 30.0);
  cam.pose_delta << 0.01, 0.0, -0.01, 0.0, 0.005, 0.0;
  RasterizerOptions<double> opts;
  opts.workers = 3;
  BufferLoss loss(cam.width, cam.height, g);

  auto run = [&]() {
    testsup::zero_all_grads(graph, {&cam});
    auto res = render(graph, cam, 0, 0.0, opts);
    auto pg = loss.grads();
    render_backward(res, pg, opts, &graph, &cam);
    auto params = testsup::collect_params(graph, {&cam}, false);
    return params.read_grads();
  };
  auto a = run();
  auto b = run();
  CHECK(a == b);
}
