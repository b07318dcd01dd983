#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edgs/heads.hpp"
#include "edgs/scene.hpp"
#include "edgs/tensor.hpp"

namespace edgs {

struct NamedArray {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

/// Binary snapshot of a training run: model hyperparameters, every learnable
/// array by name, plus iteration counter, RNG stream state, and the config
/// text that produced the run. Doubles round trip bitwise.
struct Checkpoint {
  std::uint64_t iteration = 0;
  std::size_t offsets_per_anchor = 0;
  std::size_t feature_dim = 0;
  double voxel_size = 0.0;
  std::string config_text;
  std::string rng_state;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const;
  NamedArray& add(const std::string& name, const std::vector<std::size_t>& shape);
};

void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Packs positions plus the full learnable inventory (scene arrays and all
/// head weights). Extra arrays (optimizer moments) can be added afterwards.
Checkpoint snapshot_model(AnchorSet& scene, HeadBank& heads);

/// Rebuilds a model from `c`. Throws when a required array is missing or has
/// an inconsistent shape.
void restore_model(const Checkpoint& c, AnchorSet& scene, HeadBank& heads);

}  // namespace edgs
