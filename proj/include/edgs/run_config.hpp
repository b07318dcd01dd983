#pragma once

#include <cstdint>
#include <string>

namespace edgs {

/// Every tunable of a training/eval run, settable from key=value config files
/// and CLI --set overrides. Unknown keys and malformed values are rejected.
struct RunConfig {
  // Model.
  std::size_t offsets_per_anchor = 10;
  std::size_t feature_dim = 8;
  double voxel_size = 0.6;
  bool view_dependent_color = true;

  // Deformation.
  std::string strategy = "rbf";  // rigid | rbf | cosine | knn
  double rbf_sigma = 1.0;
  std::size_t knn_k = 4;
  bool use_time_mask = true;

  // Rendering.
  std::string render_mode = "tiled";  // tiled | naive

  // Optimization.
  std::size_t iterations = 30000;
  double lambda_ssim = 0.2;
  double lambda_mask = 0.2;
  // The mask regularizer only kicks in once the deform net has had a chance
  // to route reconstruction gradient through the gates; applying it from
  // iteration 1 closes every gate before the (zero-initialized) time-variant
  // heads produce any counter-pressure.
  std::size_t mask_reg_from = 1000;
  double lr_features = 0.0075;
  double lr_offsets = 0.01;
  double lr_scales = 0.007;
  double lr_heads = 0.002;
  double lr_deform = 0.0008;
  double head_lr_decay = 0.01;  // exp decay, final multiplier on head lrs

  // Densification / pruning.
  std::size_t densify_interval = 100;
  std::size_t densify_from = 500;
  std::size_t densify_until = 15000;
  double densify_grad_threshold = 0.0002;
  std::size_t densify_subvoxels = 8;  // 4 or 8
  double prune_opacity = 0.005;

  // Bookkeeping.
  std::uint64_t seed = 1;
  std::size_t holdout_every = 5;  // every k-th timestep held out; 0 = train on all
  std::size_t log_every = 50;

  /// Assigns one key. Throws on unknown keys or unparsable values.
  void set(const std::string& key, const std::string& value);

  /// Parses `key=value` lines ('#' comments, blank lines allowed).
  static RunConfig from_file(const std::string& path);
  static RunConfig from_text(const std::string& text);

  /// Every key in file order, suitable for re-parsing.
  std::string to_text() const;

  void validate() const;
};

}  // namespace edgs
