#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

#include "edgs/tensor.hpp"

namespace edgs {

/// Sparse input points, world units. Loaded from "x y z [r g b]" text.
struct PointCloud {
  std::vector<std::array<double, 3>> points;
  std::vector<std::array<double, 3>> colors;  // empty, or one RGB in [0,1] per point

  static PointCloud parse(std::istream& in);
  static PointCloud load(const std::string& path);
  void save(const std::string& path) const;
};

/// Anchor grid with per-anchor learnable state. Positions are frozen after
/// creation; everything else is optimized. K offsets of feature dim d.
struct AnchorSet {
  std::size_t offsets_per_anchor = 10;  // K
  std::size_t feature_dim = 8;          // d
  double voxel_size = 0.6;
  ad::Tensor positions;         // {N,3} frozen
  ad::Tensor features;          // {N,d}
  ad::Tensor offset_features;   // {N,K,d}
  ad::Tensor offset_positions;  // {N,K,3} voxel-fraction units, scaled by position_scale
  ad::Tensor anchor_scales;     // {N,3} log-domain
  ad::Tensor offset_scales;     // {N,K,3} log-domain
  ad::Tensor offset_quats;      // {N,K,4} base quaternions
  ad::Tensor position_scale;    // {N,3} world units per offset-position unit

  std::size_t n() const { return positions.numel() / 3; }
  std::array<double, 3> position(std::size_t a) const {
    return {positions[a * 3], positions[a * 3 + 1], positions[a * 3 + 2]};
  }

  /// Appends one anchor at `pos` with freshly initialized offsets; features
  /// copied from `parent`. Used by densification.
  void append_anchor(const std::array<double, 3>& pos, std::size_t parent, std::mt19937_64& rng);
  /// Removes the anchors whose indices are listed (sorted or not).
  void remove_anchors(const std::vector<std::size_t>& indices);
};

/// Snaps every point to its voxel corner (per-coordinate floor), deduplicates
/// corners, and initializes anchor state. Deterministic given seed.
AnchorSet voxelize_points(const PointCloud& cloud, double voxel_size, std::uint64_t seed,
                          std::size_t offsets_per_anchor = 10, std::size_t feature_dim = 8);

/// Drops rows of a rank>=2 tensor along axis 0 where drop[row] is set.
/// Shared by anchor pruning and optimizer-state compaction.
void remove_rows(ad::Tensor& t, const std::vector<bool>& drop);

/// Named view of one learnable array. `tensor` aliases storage owned by the
/// scene or head bank; `lr_group` selects the optimizer schedule.
struct ParamRef {
  std::string name;
  ad::Tensor* tensor;
  int lr_group;
};

/// Learning-rate groups, in checkpoint/optimizer order.
enum LrGroup : int {
  kLrFeatures = 0,
  kLrOffsets = 1,
  kLrScales = 2,
  kLrHeads = 3,
  kLrDeform = 4,
};

struct HeadBank;

/// Every gradient-receiving array: scene arrays (anchor positions excluded)
/// followed by all MLP weights. Order is stable and defines checkpoint layout.
std::vector<ParamRef> learnable_inventory(AnchorSet& scene, HeadBank& heads);

}  // namespace edgs
