#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include "edgs/checkpoint.hpp"
#include "edgs/image_io.hpp"
#include "edgs/run_config.hpp"
#include "edgs/synthetic.hpp"
#include "edgs/trainer.hpp"

namespace fs = std::filesystem;
using namespace edgs;

namespace {

struct CommonTrainArgs {
  std::string scene_dir;
  std::string out_dir;
  std::string config_path;
  std::vector<std::string> overrides;
  std::size_t iters = 0;
  bool no_time_mask = false;
  std::string strategy;
};

RunConfig resolve_config(const CommonTrainArgs& args) {
  RunConfig cfg = args.config_path.empty() ? RunConfig() : RunConfig::from_file(args.config_path);
  for (const std::string& kv : args.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (args.iters) cfg.iterations = args.iters;
  if (args.no_time_mask) cfg.use_time_mask = false;
  if (!args.strategy.empty()) cfg.strategy = args.strategy;
  cfg.validate();
  return cfg;
}

TrainState load_state(const std::string& ckpt_path) {
  return TrainState::from_checkpoint(load_checkpoint(ckpt_path));
}

int run_gen(const std::string& preset, const std::string& out, std::uint64_t seed,
            bool have_seed) {
  if (preset != "blobs-v1")
    throw std::runtime_error("unknown preset: " + preset + " (available: blobs-v1)");
  SceneSpec spec = blobs_v1();
  if (have_seed) spec.seed = seed;
  const SyntheticScene scene = generate(spec);
  save_scene(scene, out);
  std::cout << "wrote " << scene.frames.size() << " frames (" << spec.n_cameras
            << " cameras x " << spec.n_timesteps << " timesteps), "
            << scene.init_cloud.points.size() << " seed points -> " << out << "\n";
  return 0;
}

int run_train(const CommonTrainArgs& args) {
  const RunConfig cfg = resolve_config(args);
  const SyntheticScene scene = load_scene(args.scene_dir);
  TrainState st = TrainState::init(scene.init_cloud, cfg);
  const auto frames = training_frames(scene, cfg.holdout_every);
  if (frames.empty()) throw std::runtime_error("holdout leaves no training frames");

  fs::create_directories(args.out_dir);
  const std::string metrics = (fs::path(args.out_dir) / "metrics.csv").string();
  const TrainResult res = train(st, frames, metrics);
  save_checkpoint(st.to_checkpoint(), (fs::path(args.out_dir) / "checkpoint.bin").string());

  std::cout << "trained " << res.iterations << " iterations, final loss " << res.final_loss
            << ", " << st.scene.n() << " anchors\n";
  const auto hold = holdout_frames(scene, cfg.holdout_every);
  if (!hold.empty()) {
    const EvalResult ev = evaluate(st, hold);
    std::cout << "holdout: psnr " << ev.psnr << " dB, ssim " << ev.ssim << " ("
              << hold.size() << " frames)\n";
  }
  return 0;
}

int run_render(const std::string& ckpt, const std::string& scene_dir, std::size_t camera,
               double t, int sweep, const std::string& out) {
  TrainState st = load_state(ckpt);
  const SyntheticScene scene = load_scene(scene_dir);
  if (camera >= scene.spec.n_cameras)
    throw std::runtime_error("camera index out of range");
  CameraFrame cam = scene.frames[scene.frame_index(camera, 0)];
  const MaskMode mode = st.cfg.use_time_mask ? MaskMode::kGated : MaskMode::kOff;
  const RenderMode rmode =
      st.cfg.render_mode == "naive" ? RenderMode::kNaive : RenderMode::kTiled;

  auto render_at = [&](double time, const std::string& path) {
    cam.t = time;
    const auto prims =
        compose_gaussians(st.scene, st.heads, st.strategy, time, cam.center(), mode);
    write_image(render_image(prims, cam, rmode), path);
  };

  if (sweep > 0) {
    const fs::path base(out);
    const fs::path dir = base.parent_path().empty() ? "." : base.parent_path();
    fs::create_directories(dir);
    const std::string stem = base.stem().string();
    const std::string ext = base.extension().string();
    for (int i = 0; i < sweep; ++i) {
      const double time = sweep == 1 ? t : static_cast<double>(i) / (sweep - 1);
      char idx[16];
      std::snprintf(idx, sizeof idx, "%04d", i);
      render_at(time, (dir / (stem + "_" + idx + ext)).string());
    }
    std::cout << "wrote " << sweep << " frames\n";
  } else {
    if (!fs::path(out).parent_path().empty()) fs::create_directories(fs::path(out).parent_path());
    render_at(t, out);
    std::cout << "wrote " << out << "\n";
  }
  return 0;
}

double mask_accuracy(const TrainState& st, const SyntheticScene& scene) {
  std::size_t correct = 0;
  const std::size_t n = st.scene.n();
  for (std::size_t a = 0; a < n; ++a) {
    const auto pos = st.scene.position(a);
    double best = 1e300;
    std::size_t best_blob = 0;
    for (std::size_t b = 0; b < scene.spec.blobs.size(); ++b) {
      const Vec3 c = scene.blob_center(b, 0.0);
      const double dx = pos[0] - c[0], dy = pos[1] - c[1], dz = pos[2] - c[2];
      const double d2 = dx * dx + dy * dy + dz * dz;
      if (d2 < best) {
        best = d2;
        best_blob = b;
      }
    }
    const bool truly_dynamic = scene.spec.blobs[best_blob].motion != MotionKind::kStatic;
    const double* f = st.scene.features.data() + a * st.scene.feature_dim;
    const bool predicted =
        st.heads.predict_time_mask(std::span<const double>(f, st.scene.feature_dim)) > 0.5;
    correct += predicted == truly_dynamic;
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

int run_eval(const std::string& ckpt, const std::string& scene_dir, const std::string& out) {
  TrainState st = load_state(ckpt);
  const SyntheticScene scene = load_scene(scene_dir);
  const auto hold = holdout_frames(scene, st.cfg.holdout_every);
  const auto& frames = hold.empty() ? training_frames(scene, 0) : hold;

  const EvalResult ev = evaluate(st, frames);
  const double acc = mask_accuracy(st, scene);

  std::ostringstream table;
  table << "frame,psnr\n";
  for (std::size_t i = 0; i < frames.size(); ++i)
    table << i << "," << ev.per_frame_psnr[i] << "\n";
  table << "mean_psnr," << ev.psnr << "\n";
  table << "mean_ssim," << ev.ssim << "\n";
  table << "mask_accuracy," << acc << "\n";
  std::cout << table.str();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << table.str();
  }
  return 0;
}

/// Anchors laid on a dense grid so every one lands in its own voxel.
TrainState bench_state(std::size_t n_gaussians, std::size_t k, std::uint64_t seed) {
  RunConfig cfg;
  cfg.offsets_per_anchor = k;
  cfg.seed = seed;
  const std::size_t n_anchors = (n_gaussians + k - 1) / k;
  const double v = 0.1;
  const std::size_t side =
      static_cast<std::size_t>(std::ceil(std::cbrt(static_cast<double>(n_anchors))));
  PointCloud cloud;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> jitter(0.01, 0.09);
  for (std::size_t i = 0; i < n_anchors; ++i) {
    const double x = static_cast<double>(i % side);
    const double y = static_cast<double>((i / side) % side);
    const double z = static_cast<double>(i / (side * side));
    const double half = static_cast<double>(side) / 2.0;
    cloud.points.push_back({(x - half) * v + jitter(rng), (y - half) * v + jitter(rng),
                            (z - half) * v + jitter(rng)});
  }
  cfg.voxel_size = v;
  return TrainState::init(cloud, cfg);
}

int run_bench(const std::vector<std::size_t>& counts, const std::string& mask,
              std::size_t frames, std::size_t warmup, double static_frac,
              const std::string& out) {
  if (mask != "on" && mask != "off") throw std::runtime_error("--mask expects on|off");
  const MaskMode mode = mask == "on" ? MaskMode::kGated : MaskMode::kOff;

  std::ostringstream csv;
  csv << "n_gaussians,mask,compose_ms,raster_ms,total_ms\n";
  for (const std::size_t count : counts) {
    TrainState st = bench_state(count, 10, 77);
    const std::size_t n = st.scene.n();
    std::vector<int> labels(n, 0);
    for (std::size_t a = static_cast<std::size_t>(static_cast<double>(n) * static_frac);
         a < n; ++a)
      labels[a] = 1;
    CameraFrame cam = look_at_camera({0, 0, 8}, {0, 0, 0}, 100, 100, 64, 64);

    std::vector<double> compose_ms, raster_ms;
    for (std::size_t f = 0; f < warmup + frames; ++f) {
      const double t = static_cast<double>(f % 16) / 15.0;
      const auto c0 = std::chrono::steady_clock::now();
      const auto prims = compose_gaussians(st.scene, st.heads, st.strategy, t, cam.center(),
                                           mode, nullptr, mode == MaskMode::kGated ? &labels : nullptr);
      const auto c1 = std::chrono::steady_clock::now();
      const Image img = render_image(prims, cam, RenderMode::kTiled);
      const auto c2 = std::chrono::steady_clock::now();
      if (f < warmup) continue;
      compose_ms.push_back(std::chrono::duration<double, std::milli>(c1 - c0).count());
      raster_ms.push_back(std::chrono::duration<double, std::milli>(c2 - c1).count());
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    const double cm = median(compose_ms), rm = median(raster_ms);
    csv << count << "," << mask << "," << cm << "," << rm << "," << cm + rm << "\n";
  }
  std::cout << csv.str();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw std::runtime_error("cannot write " + out);
    f << csv.str();
  }
  return 0;
}

int run_ablate(const CommonTrainArgs& args) {
  const SyntheticScene scene = load_scene(args.scene_dir);
  std::ostringstream table;
  table << "strategy,holdout_psnr,holdout_ssim,final_loss,n_anchors\n";
  for (const char* strat : {"rigid", "rbf", "cosine", "knn"}) {
    CommonTrainArgs a = args;
    a.strategy = strat;
    const RunConfig cfg = resolve_config(a);
    TrainState st = TrainState::init(scene.init_cloud, cfg);
    const auto frames = training_frames(scene, cfg.holdout_every);
    const TrainResult res = train(st, frames, "");
    const auto hold = holdout_frames(scene, cfg.holdout_every);
    const EvalResult ev = evaluate(st, hold.empty() ? frames : hold);
    table << strat << "," << ev.psnr << "," << ev.ssim << "," << res.final_loss << ","
          << st.scene.n() << "\n";
    std::cout << strat << ": psnr " << ev.psnr << " dB\n";
  }
  std::cout << table.str();
  if (!args.out_dir.empty()) {
    fs::create_directories(args.out_dir);
    std::ofstream f(fs::path(args.out_dir) / "ablation.csv");
    f << table.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic anchored-Gaussian scene trainer/renderer"};
  app.require_subcommand(1);

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic scene directory");
  std::string preset = "blobs-v1", gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--preset", preset, "Scene preset (blobs-v1)");
  gen->add_option("--out", gen_out, "Output directory")->required();
  auto* seed_opt = gen->add_option("--seed", gen_seed, "Override the preset seed");

  // train
  auto* tr = app.add_subcommand("train", "Train a model on a scene directory");
  CommonTrainArgs targs;
  tr->add_option("--scene", targs.scene_dir, "Scene directory")->required();
  tr->add_option("--out", targs.out_dir, "Output directory (checkpoint.bin, metrics.csv)")
      ->required();
  tr->add_option("--config", targs.config_path, "Config file (key=value lines)");
  tr->add_option("--set", targs.overrides, "Config override key=value (repeatable)");
  tr->add_option("--iters", targs.iters, "Shorthand for --set iterations=N");
  tr->add_flag("--no-time-mask", targs.no_time_mask, "Disable the time mask");
  tr->add_option("--strategy", targs.strategy, "Deformation strategy (rigid|rbf|cosine|knn)");

  // render
  auto* rd = app.add_subcommand("render", "Render a checkpoint at a chosen time");
  std::string rd_ckpt, rd_scene, rd_out = "render.ppm";
  std::size_t rd_cam = 0;
  double rd_t = 0.0;
  int rd_sweep = 0;
  rd->add_option("--ckpt", rd_ckpt, "Checkpoint file")->required();
  rd->add_option("--scene", rd_scene, "Scene directory (camera source)")->required();
  rd->add_option("--camera", rd_cam, "Camera index");
  rd->add_option("--t", rd_t, "Normalized time in [0,1]");
  rd->add_option("--sweep-t", rd_sweep, "Render N frames sweeping t over [0,1]");
  rd->add_option("--out", rd_out, "Output image (.ppm/.png); sweep appends _0000");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on held-out frames");
  std::string ev_ckpt, ev_scene, ev_out;
  ev->add_option("--ckpt", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--scene", ev_scene, "Scene directory")->required();
  ev->add_option("--out", ev_out, "Also write the table to this CSV");

  // bench
  auto* bn = app.add_subcommand("bench", "Compose+render timings vs Gaussian count");
  std::vector<std::size_t> bn_counts{1000, 5000, 20000, 50000};
  std::string bn_mask = "off", bn_out;
  std::size_t bn_frames = 50, bn_warmup = 10;
  double bn_static = 0.6;
  bn->add_option("--counts", bn_counts, "Gaussian counts to measure");
  bn->add_option("--mask", bn_mask, "Time-mask filtering on|off");
  bn->add_option("--frames", bn_frames, "Timed frames per count");
  bn->add_option("--warmup", bn_warmup, "Untimed warmup frames");
  bn->add_option("--static-frac", bn_static, "Fraction of anchors labeled static");
  bn->add_option("--out", bn_out, "Write CSV here");

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train all four deformation strategies");
  CommonTrainArgs aargs;
  ab->add_option("--scene", aargs.scene_dir, "Scene directory")->required();
  ab->add_option("--out", aargs.out_dir, "Output directory for ablation.csv");
  ab->add_option("--config", aargs.config_path, "Config file");
  ab->add_option("--set", aargs.overrides, "Config override key=value (repeatable)");
  ab->add_option("--iters", aargs.iters, "Iterations per strategy");
  ab->add_flag("--no-time-mask", aargs.no_time_mask, "Disable the time mask");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen(preset, gen_out, gen_seed, seed_opt->count() > 0);
    if (tr->parsed()) return run_train(targs);
    if (rd->parsed()) return run_render(rd_ckpt, rd_scene, rd_cam, rd_t, rd_sweep, rd_out);
    if (ev->parsed()) return run_eval(ev_ckpt, ev_scene, ev_out);
    if (bn->parsed())
      return run_bench(bn_counts, bn_mask, bn_frames, bn_warmup, bn_static, bn_out);
    if (ab->parsed()) return run_ablate(aargs);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
