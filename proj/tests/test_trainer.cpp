#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "edgs/trainer.hpp"

using namespace edgs;
namespace fs = std::filesystem;

namespace {

SceneSpec tiny_spec() {
  SceneSpec spec;
  Blob fixed;
  fixed.center = {-0.6, 0.1, 0.0};
  fixed.radius = 0.5;
  fixed.color = {0.85, 0.35, 0.25};
  Blob mover;
  mover.center = {0.7, -0.2, 0.2};
  mover.radius = 0.45;
  mover.color = {0.25, 0.55, 0.9};
  mover.motion = MotionKind::kLinear;
  mover.axis = normalized(Vec3{0.2, 1.0, 0.1});
  mover.amplitude = 0.5;
  spec.blobs = {fixed, mover};
  spec.n_timesteps = 4;
  spec.n_cameras = 1;
  spec.width = spec.height = 24;
  spec.focal = 40;  // wide view so the blobs fit a 24px frame
  spec.points_per_blob = 50;
  spec.seed = 9;
  return spec;
}

RunConfig tiny_config() {
  RunConfig cfg;
  cfg.offsets_per_anchor = 4;
  cfg.feature_dim = 8;
  cfg.voxel_size = 0.6;
  cfg.iterations = 40;
  cfg.densify_from = 1000000;  // no events unless a test wants them
  cfg.holdout_every = 0;
  cfg.seed = 3;
  return cfg;
}

struct TinyWorld {
  SyntheticScene scene;
  TrainState state;
  std::vector<FrameTarget> frames;
};

TinyWorld make_world(RunConfig cfg) {
  TinyWorld w{generate(tiny_spec()), {}, {}};
  w.state = TrainState::init(w.scene.init_cloud, cfg);
  w.frames = training_frames(w.scene, cfg.holdout_every);
  return w;
}

std::vector<double> raw_params(TrainState& st) {
  std::vector<double> out;
  for (const ParamRef& p : learnable_inventory(st.scene, st.heads))
    out.insert(out.end(), p.tensor->data(), p.tensor->data() + p.tensor->numel());
  return out;
}

}  // namespace

TEST_CASE("holdout split reserves every k-th timestep for eval") {
  SceneSpec spec = tiny_spec();
  spec.n_timesteps = 10;
  const SyntheticScene scene = generate(spec);
  const auto train_set = training_frames(scene, 5);
  const auto hold_set = holdout_frames(scene, 5);
  CHECK(train_set.size() == 8);  // timesteps 0 and 5 withheld
  CHECK(hold_set.size() == 2);
  CHECK(hold_set[0].cam.t == 0.0);
  CHECK(hold_set[1].cam.t == doctest::Approx(5.0 / 9.0));
  for (const FrameTarget& f : train_set) {
    CHECK(f.cam.t != hold_set[0].cam.t);
    CHECK(f.cam.t != doctest::Approx(5.0 / 9.0).epsilon(1e-12));
    CHECK(f.gt != nullptr);
  }
  CHECK(training_frames(scene, 0).size() == 10);
  CHECK(holdout_frames(scene, 0).empty());
}

TEST_CASE("adam takes lr-sized steps under constant unit-scale gradients") {
  ad::Tensor p({1}, {1.0});
  std::vector<ParamRef> params{{"p", &p, kLrOffsets}};
  Adam adam;
  adam.init(params);
  const std::array<double, 5> lr{0.1, 0.01, 0.1, 0.1, 0.1};
  std::vector<ad::Tensor> grads{ad::Tensor({1}, {0.5})};
  adam.step(params, grads, lr);
  // Bias-corrected m/sqrt(v) is exactly 1 whatever the constant gradient.
  CHECK(p[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-9));
  adam.step(params, grads, lr);
  CHECK(p[0] == doctest::Approx(1.0 - 0.02).epsilon(1e-9));

  // Optimizer state tracks the parameter, so a shape drift is an error.
  ad::Tensor q({2}, {1.0, 2.0});
  std::vector<ParamRef> changed{{"p", &q, kLrOffsets}};
  std::vector<ad::Tensor> grads2{ad::Tensor({2}, {0.1, 0.1})};
  CHECK_THROWS_AS(adam.step(changed, grads2, lr), std::runtime_error);
}

TEST_CASE("densification splits over-threshold anchors into sub-voxels") {
  RunConfig cfg = tiny_config();
  TinyWorld w = make_world(cfg);
  AnchorSet& scene = w.state.scene;
  const std::size_t n0 = scene.n();
  REQUIRE(n0 >= 2);

  GradStats stats;
  stats.reset(n0, scene.offsets_per_anchor);
  stats.screen.grad_accum[0] = 5.0;
  stats.screen.visible[0] = 10;  // stat = 0.5
  std::mt19937_64 rng(1);

  SUBCASE("m=8 adds all octant centers inside the parent voxel") {
    const auto base = scene.position(0);
    const auto features_before = scene.features.raw();
    CHECK(densify_anchors(scene, stats, 0.1, 8, rng) == 8);
    CHECK(scene.n() == n0 + 8);
    for (std::size_t a = n0; a < scene.n(); ++a) {
      const auto p = scene.position(a);
      for (int c = 0; c < 3; ++c) {
        CHECK(p[c] > base[c]);
        CHECK(p[c] < base[c] + scene.voxel_size);
      }
      // The child copies the parent's feature row.
      for (std::size_t j = 0; j < scene.feature_dim; ++j)
        CHECK(scene.features[a * scene.feature_dim + j] ==
              scene.features[0 * scene.feature_dim + j]);
    }
    // Existing anchors kept their state.
    for (std::size_t i = 0; i < features_before.size(); ++i)
      CHECK(scene.features[i] == features_before[i]);

    // A second event with the same evidence finds every sub-voxel occupied.
    GradStats again;
    again.reset(scene.n(), scene.offsets_per_anchor);
    again.screen.grad_accum[0] = 5.0;
    again.screen.visible[0] = 10;
    CHECK(densify_anchors(scene, again, 0.1, 8, rng) == 0);
    CHECK(scene.n() == n0 + 8);
  }

  SUBCASE("m=4 splits in x/y only") {
    CHECK(densify_anchors(scene, stats, 0.1, 4, rng) == 4);
    const auto base = scene.position(0);
    for (std::size_t a = n0; a < scene.n(); ++a)
      CHECK(scene.position(a)[2] == base[2] + scene.voxel_size / 2.0);
  }

  SUBCASE("below-threshold anchors are left alone") {
    CHECK(densify_anchors(scene, stats, 0.6, 8, rng) == 0);
    CHECK(scene.n() == n0);
  }

  SUBCASE("occupied sub-voxels are skipped") {
    const auto base = scene.position(0);
    const double d = scene.voxel_size;
    std::mt19937_64 r2(2);
    scene.append_anchor({base[0] + d / 4, base[1] + d / 4, base[2] + d / 4}, 0, r2);
    GradStats s2;
    s2.reset(scene.n(), scene.offsets_per_anchor);
    s2.screen.grad_accum[0] = 5.0;
    s2.screen.visible[0] = 10;
    CHECK(densify_anchors(scene, s2, 0.1, 8, rng) == 7);
  }

  SUBCASE("stale statistics are rejected") {
    GradStats stale;
    stale.reset(n0 + 3, scene.offsets_per_anchor);
    CHECK_THROWS_AS(densify_anchors(scene, stale, 0.1, 8, rng), std::runtime_error);
  }
}

TEST_CASE("prune selection respects threshold, freshness, and zero floor") {
  RunConfig cfg = tiny_config();
  TinyWorld w = make_world(cfg);
  AnchorSet& scene = w.state.scene;
  const std::size_t K = scene.offsets_per_anchor;
  GradStats stats;
  stats.reset(scene.n(), K);

  // Anchor 0 accumulated faint opacities over 10 steps; anchor 1 healthy;
  // anchor 2 has never been scored (fresh from densify).
  for (std::size_t k = 0; k < K; ++k) {
    stats.opacity_sum[0 * K + k] = 0.001 * 10;
    stats.opacity_sum[1 * K + k] = 0.4 * 10;
  }
  for (std::size_t a = 0; a < scene.n(); ++a) stats.samples[a] = a == 2 ? 0 : 10;

  const auto drop = select_prune(scene, stats, 0.005);
  CHECK(drop[0]);
  CHECK_FALSE(drop[1]);
  CHECK_FALSE(drop[2]);  // fresh anchors are exempt

  // Opacities are strictly positive, so threshold 0 can never prune.
  const auto none = select_prune(scene, stats, 0.0);
  CHECK(std::count(none.begin(), none.end(), true) == 0);
}

TEST_CASE("training reduces the loss and keeps anchor positions frozen") {
  RunConfig cfg = tiny_config();
  TinyWorld w = make_world(cfg);
  const auto positions_before = w.state.scene.positions.raw();

  const fs::path csv = fs::temp_directory_path() / "edgs_metrics.csv";
  fs::remove(csv);
  const TrainResult res = train(w.state, w.frames, csv.string());
  CHECK(res.iterations == 40);
  CHECK(std::isfinite(res.final_loss));
  CHECK(w.state.scene.positions.raw() == positions_before);

  // Loss trend: the last quarter beats the first quarter on average.
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  CHECK(header == "iteration,loss,l1,ssim,mask_loss,psnr,n_anchors,n_dynamic_anchors,wall_ms");
  std::vector<double> losses;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string field;
    std::getline(ls, field, ',');  // iteration
    std::getline(ls, field, ',');  // loss
    losses.push_back(std::stod(field));
    std::size_t commas = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
    CHECK(commas == 8);
  }
  REQUIRE(losses.size() == 40);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  CHECK(tail < head);
  fs::remove(csv);
}

TEST_CASE("training is deterministic for a fixed seed") {
  RunConfig cfg = tiny_config();
  cfg.iterations = 12;
  TinyWorld a = make_world(cfg);
  TinyWorld b = make_world(cfg);
  train(a.state, a.frames, "");
  train(b.state, b.frames, "");
  CHECK(raw_params(a.state) == raw_params(b.state));

  RunConfig other = cfg;
  other.seed = 4;
  TinyWorld c = make_world(other);
  train(c.state, c.frames, "");
  CHECK(raw_params(a.state) != raw_params(c.state));
}

TEST_CASE("densify and prune events keep optimizer and stats in lockstep") {
  RunConfig cfg = tiny_config();
  cfg.iterations = 6;
  cfg.densify_from = 2;
  cfg.densify_until = 100;
  cfg.densify_interval = 2;
  cfg.densify_grad_threshold = 0.0;  // any visible anchor densifies
  TinyWorld w = make_world(cfg);
  const std::size_t n0 = w.state.scene.n();
  const auto positions_before = w.state.scene.positions.raw();

  const TrainResult res = train(w.state, w.frames, "");
  CHECK(res.iterations == 6);
  CHECK(w.state.scene.n() > n0);

  // Original anchors never moved: the first rows are bitwise intact.
  for (std::size_t i = 0; i < positions_before.size() && i < 3 * n0; ++i)
    CHECK(w.state.scene.positions[i] == positions_before[i]);

  // Optimizer moments follow the grown parameter shapes.
  const auto params = learnable_inventory(w.state.scene, w.state.heads);
  REQUIRE(w.state.adam.m.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(w.state.adam.m[i].shape() == params[i].tensor->shape());
    CHECK(w.state.adam.v[i].shape() == params[i].tensor->shape());
  }
  // The stats window was reset at the last event.
  CHECK(w.state.stats.samples.size() == w.state.scene.n());
}

TEST_CASE("pruning every anchor is a hard error") {
  RunConfig cfg = tiny_config();
  cfg.iterations = 2;
  cfg.densify_from = 1;
  cfg.densify_until = 10;
  cfg.densify_interval = 1;
  cfg.densify_grad_threshold = 1e18;  // never densify
  cfg.prune_opacity = 1.5;            // every opacity mean is below this
  TinyWorld w = make_world(cfg);
  CHECK_THROWS_WITH_AS(train(w.state, w.frames, ""),
                       doctest::Contains("pruning would remove every anchor"),
                       std::runtime_error);
}

TEST_CASE("non-finite parameters abort with iteration and group diagnostics") {
  RunConfig cfg = tiny_config();
  TinyWorld w = make_world(cfg);
  // A NaN in the color decoder's output bias reaches the image unclamped.
  w.state.heads.color.biases.back()[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    train_step(w.state, w.frames[0]);
    FAIL("expected an abort");
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("iteration 1") != std::string::npos);
    CHECK(msg.find("heads") != std::string::npos);
  }
}

TEST_CASE("checkpoint resume continues the exact optimization trajectory") {
  RunConfig cfg = tiny_config();
  cfg.iterations = 4;
  TinyWorld w = make_world(cfg);
  train(w.state, w.frames, "");

  const fs::path p = fs::temp_directory_path() / "edgs_resume.bin";
  save_checkpoint(w.state.to_checkpoint(), p.string());
  TrainState resumed = TrainState::from_checkpoint(load_checkpoint(p.string()));
  CHECK(resumed.iteration == 4);
  CHECK(resumed.cfg.iterations == 4);
  CHECK(raw_params(resumed) == raw_params(w.state));

  // One more identical step on both copies stays bitwise in lockstep
  // (parameters, moments, and RNG all travel through the checkpoint).
  const StepMetrics ma = train_step(w.state, w.frames[1]);
  const StepMetrics mb = train_step(resumed, w.frames[1]);
  CHECK(ma.loss == mb.loss);
  CHECK(raw_params(resumed) == raw_params(w.state));
  CHECK(w.state.rng() == resumed.rng());
  fs::remove(p);
}

TEST_CASE("mask-free training still runs and reports every anchor as dynamic") {
  RunConfig cfg = tiny_config();
  cfg.use_time_mask = false;
  cfg.iterations = 2;
  TinyWorld w = make_world(cfg);
  const StepMetrics m = train_step(w.state, w.frames[0]);
  CHECK(m.mask_loss == 0.0);
  CHECK(m.n_dynamic_anchors == w.state.scene.n());
  CHECK(std::isfinite(m.loss));
}

TEST_CASE("evaluation reports finite quality metrics per frame") {
  RunConfig cfg = tiny_config();
  cfg.iterations = 5;
  TinyWorld w = make_world(cfg);
  train(w.state, w.frames, "");
  const EvalResult ev = evaluate(w.state, w.frames);
  REQUIRE(ev.per_frame_psnr.size() == w.frames.size());
  CHECK(std::isfinite(ev.psnr));
  CHECK(ev.psnr > 5.0);
  CHECK(ev.ssim > -1.0);
  CHECK(ev.ssim <= 1.0);
  CHECK_THROWS_AS(evaluate(w.state, {}), std::runtime_error);
}

TEST_CASE("gating phase freezes motion decoders while the gate keeps learning") {
  RunConfig cfg = tiny_config();
  cfg.mask_reg_from = 3;
  cfg.lr_features = cfg.lr_offsets = cfg.lr_scales = 0.0;  // isolate the heads
  cfg.lr_heads = 0.01;
  cfg.lr_deform = 0.001;
  TinyWorld w = make_world(cfg);

  auto blob = [&](auto pick) {
    std::vector<double> out;
    for (const ParamRef& p : learnable_inventory(w.state.scene, w.state.heads))
      if (pick(p.name))
        out.insert(out.end(), p.tensor->data(), p.tensor->data() + p.tensor->numel());
    return out;
  };
  auto is_motion = [](const std::string& n) {
    return n.starts_with("scale.") || n.starts_with("quat.") || n.starts_with("deform.");
  };
  auto is_mask = [](const std::string& n) { return n.starts_with("mask."); };

  // Pre-gating: gates sit open and the column reports the classifier output.
  const StepMetrics m1 = train_step(w.state, w.frames[0]);
  CHECK(m1.n_dynamic_anchors == w.state.scene.n());
  CHECK(m1.mask_loss > 0.6);
  CHECK(m1.mask_loss < 1.0);
  train_step(w.state, w.frames[1]);

  const std::vector<double> motion_before = blob(is_motion);
  const std::vector<double> mask_before = blob(is_mask);

  const StepMetrics m3 = train_step(w.state, w.frames[2]);
  CHECK(blob(is_motion) == motion_before);  // bitwise frozen despite nonzero lr
  CHECK(blob(is_mask) != mask_before);      // the regularizer reaches the gate
  CHECK(m3.mask_loss > 0.0);

  StepMetrics last = m3;
  for (int i = 0; i < 10; ++i)
    last = train_step(w.state, w.frames[std::size_t(3 + i) % w.frames.size()]);
  CHECK(blob(is_motion) == motion_before);
  CHECK(last.mask_loss < m3.mask_loss - 1e-4);  // steady downward pull on the mean gate
}
