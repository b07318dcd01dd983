#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "edgs/checkpoint.hpp"
#include "edgs/deform.hpp"
#include "edgs/rasterizer.hpp"
#include "edgs/run_config.hpp"
#include "edgs/synthetic.hpp"

namespace edgs {

/// One training view: camera (carrying its normalized time) plus ground truth.
struct FrameTarget {
  CameraFrame cam;
  const Image* gt = nullptr;
};

/// Frames whose timestep index is a multiple of `holdout_every` are reserved
/// for evaluation; the rest train. holdout_every = 0 trains on everything.
std::vector<FrameTarget> training_frames(const SyntheticScene& scene, std::size_t holdout_every);
std::vector<FrameTarget> holdout_frames(const SyntheticScene& scene, std::size_t holdout_every);

/// Adam with one learning rate per LrGroup. Moment tensors are kept in
/// learnable_inventory order and follow anchor-count changes.
struct Adam {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-15;
  std::uint64_t steps = 0;
  std::vector<ad::Tensor> m, v;

  void init(const std::vector<ParamRef>& params);
  /// `frozen`, when given, marks parameters to skip entirely (no moment decay,
  /// no update), aligned with `params`.
  void step(const std::vector<ParamRef>& params, const std::vector<ad::Tensor>& grads,
            const std::array<double, 5>& lr, const std::vector<char>* frozen = nullptr);
  /// Appends zero moment rows so moments match params that gained anchors.
  void grow_rows(const std::vector<ParamRef>& params);
  /// Drops moment rows of pruned anchors on every per-anchor parameter.
  void drop_rows(const std::vector<ParamRef>& params, const std::vector<bool>& drop);
};

/// Densify/prune evidence gathered over one window (reset after each event):
/// per-anchor screen-gradient accumulation and per-offset mean opacity.
struct GradStats {
  DensifyStats screen;
  std::vector<double> opacity_sum;     // {N*K}
  std::vector<std::size_t> samples;    // per anchor
  std::size_t offsets_per_anchor = 0;

  void reset(std::size_t n_anchors, std::size_t k);
  void accumulate_opacity(const ad::Tensor& opacities);  // {N,K}
  /// Mean screen-gradient norm per visible splat projection in the window.
  double densify_stat(std::size_t a) const;
  /// Running mean opacity across the anchor's offsets and the window.
  double mean_opacity(std::size_t a) const;
};

/// Splits each over-threshold anchor's voxel into m sub-voxels (m = 8:
/// octants; m = 4: x/y quadrants) and appends an anchor at each sub-voxel
/// center not already occupied by an existing anchor position. Parent
/// features are copied, offsets start fresh, the parent stays. Returns the
/// number of anchors added.
std::size_t densify_anchors(AnchorSet& scene, const GradStats& stats, double epsilon,
                            std::size_t m, std::mt19937_64& rng);

/// Anchors whose running mean offset opacity fell below `threshold`.
/// Anchors with no samples yet (just densified) are never selected.
std::vector<bool> select_prune(const AnchorSet& scene, const GradStats& stats, double threshold);

struct StepMetrics {
  double loss = 0, l1 = 0, ssim = 0, mask_loss = 0, psnr = 0;
  std::size_t n_anchors = 0, n_dynamic_anchors = 0;
  double wall_ms = 0;
  std::size_t densified = 0, pruned = 0;
};

struct TrainState {
  RunConfig cfg;
  AnchorSet scene;
  HeadBank heads;
  DeformStrategy strategy;
  Adam adam;
  GradStats stats;
  std::mt19937_64 rng;
  std::uint64_t iteration = 0;

  /// Voxelizes the cloud and initializes heads and optimizer from cfg.seed.
  static TrainState init(const PointCloud& cloud, const RunConfig& cfg);

  Checkpoint to_checkpoint();
  static TrainState from_checkpoint(const Checkpoint& c);
};

/// One optimization step on one frame: compose -> rasterize -> loss ->
/// backward -> Adam, plus window statistics and any due densify/prune event.
/// Aborts with iteration and parameter-group diagnostics on non-finite loss.
StepMetrics train_step(TrainState& st, const FrameTarget& frame);

struct TrainResult {
  std::size_t iterations = 0;
  double final_loss = 0;
  StepMetrics last;
};

/// Full loop: seeded shuffle over frames, one CSV row per iteration
/// (header iteration,loss,l1,ssim,mask_loss,psnr,n_anchors,
/// n_dynamic_anchors,wall_ms), file synced every 500 iterations.
/// `metrics_path` empty -> no log.
TrainResult train(TrainState& st, const std::vector<FrameTarget>& frames,
                  const std::string& metrics_path);

/// PSNR/SSIM of the current model on `frames`, averaged.
struct EvalResult {
  double psnr = 0, ssim = 0;
  std::vector<double> per_frame_psnr;
};
EvalResult evaluate(TrainState& st, const std::vector<FrameTarget>& frames);

}  // namespace edgs
