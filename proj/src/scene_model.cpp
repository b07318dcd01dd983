#include "edgs/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "edgs/heads.hpp"

namespace edgs {

PointCloud PointCloud::parse(std::istream& in) {
  PointCloud pc;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x)) continue;  // blank or comment-only line
    if (!(ls >> y >> z))
      throw std::runtime_error("point cloud line " + std::to_string(lineno) +
                               ": expected at least 3 coordinates");
    pc.points.push_back({x, y, z});
    double r, g, b;
    if (ls >> r) {
      if (!(ls >> g >> b))
        throw std::runtime_error("point cloud line " + std::to_string(lineno) +
                                 ": color needs 3 components");
      pc.colors.push_back({r, g, b});
    }
  }
  if (!pc.colors.empty() && pc.colors.size() != pc.points.size())
    throw std::runtime_error("point cloud: some lines have colors and some do not");
  return pc;
}

PointCloud PointCloud::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open point cloud: " + path);
  return parse(in);
}

void PointCloud::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write point cloud: " + path);
  out.precision(17);
  for (std::size_t i = 0; i < points.size(); ++i) {
    out << points[i][0] << ' ' << points[i][1] << ' ' << points[i][2];
    if (!colors.empty())
      out << ' ' << colors[i][0] << ' ' << colors[i][1] << ' ' << colors[i][2];
    out << '\n';
  }
}

namespace {

// Voxel index with a tiny forward nudge so corners produced by cell*delta
// land back in the same cell despite rounding (voxelization idempotence).
long long grid_cell(double x, double delta) {
  return static_cast<long long>(std::floor(x / delta + 1e-9));
}

// Fills one anchor's learnable rows in-place. `a` indexes the anchor.
void init_anchor_state(AnchorSet& s, std::size_t a, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> feat_dist(-0.1, 0.1);
  std::uniform_real_distribution<double> off_dist(-0.5, 0.5);
  const std::size_t K = s.offsets_per_anchor, D = s.feature_dim;
  for (std::size_t i = 0; i < D; ++i) s.features[a * D + i] = feat_dist(rng);
  for (std::size_t i = 0; i < K * D; ++i) s.offset_features[a * K * D + i] = feat_dist(rng);
  for (std::size_t i = 0; i < K * 3; ++i) s.offset_positions[a * K * 3 + i] = off_dist(rng);
  const double log_scale = std::log(s.voxel_size / 4.0);
  for (std::size_t i = 0; i < 3; ++i) {
    s.anchor_scales[a * 3 + i] = log_scale;
    s.position_scale[a * 3 + i] = s.voxel_size;
  }
  for (std::size_t i = 0; i < K * 3; ++i) s.offset_scales[a * K * 3 + i] = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    s.offset_quats[(a * K + k) * 4 + 0] = 1.0;
    s.offset_quats[(a * K + k) * 4 + 1] = 0.0;
    s.offset_quats[(a * K + k) * 4 + 2] = 0.0;
    s.offset_quats[(a * K + k) * 4 + 3] = 0.0;
  }
}

void resize_state(AnchorSet& s, std::size_t n) {
  const std::size_t K = s.offsets_per_anchor, D = s.feature_dim;
  auto grow = [&](ad::Tensor& t, std::vector<std::size_t> shape) {
    ad::Tensor fresh(shape);
    const std::size_t keep = std::min(t.numel(), fresh.numel());
    std::copy_n(t.data(), keep, fresh.data());
    t = std::move(fresh);
  };
  grow(s.positions, {n, 3});
  grow(s.features, {n, D});
  grow(s.offset_features, {n, K, D});
  grow(s.offset_positions, {n, K, 3});
  grow(s.anchor_scales, {n, 3});
  grow(s.offset_scales, {n, K, 3});
  grow(s.offset_quats, {n, K, 4});
  grow(s.position_scale, {n, 3});
}

}  // namespace

AnchorSet voxelize_points(const PointCloud& cloud, double voxel_size, std::uint64_t seed,
                          std::size_t offsets_per_anchor, std::size_t feature_dim) {
  if (voxel_size <= 0.0) throw std::runtime_error("voxelize: voxel size must be positive");
  if (cloud.points.empty()) throw std::runtime_error("voxelize: empty point cloud");
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    for (double c : cloud.points[i])
      if (!std::isfinite(c))
        throw std::runtime_error("voxelize: non-finite coordinate at point " +
                                 std::to_string(i));

  std::map<std::array<long long, 3>, std::size_t> seen;
  std::vector<std::array<double, 3>> corners;
  for (const auto& p : cloud.points) {
    std::array<long long, 3> cell = {grid_cell(p[0], voxel_size), grid_cell(p[1], voxel_size),
                                     grid_cell(p[2], voxel_size)};
    if (seen.emplace(cell, corners.size()).second)
      corners.push_back({static_cast<double>(cell[0]) * voxel_size,
                         static_cast<double>(cell[1]) * voxel_size,
                         static_cast<double>(cell[2]) * voxel_size});
  }

  AnchorSet s;
  s.offsets_per_anchor = offsets_per_anchor;
  s.feature_dim = feature_dim;
  s.voxel_size = voxel_size;
  resize_state(s, corners.size());
  std::mt19937_64 rng(seed);
  for (std::size_t a = 0; a < corners.size(); ++a) {
    for (std::size_t i = 0; i < 3; ++i) s.positions[a * 3 + i] = corners[a][i];
    init_anchor_state(s, a, rng);
  }
  return s;
}

void AnchorSet::append_anchor(const std::array<double, 3>& pos, std::size_t parent,
                              std::mt19937_64& rng) {
  const std::size_t a = n();
  resize_state(*this, a + 1);
  for (std::size_t i = 0; i < 3; ++i) positions[a * 3 + i] = pos[i];
  init_anchor_state(*this, a, rng);
  std::copy_n(features.data() + parent * feature_dim, feature_dim,
              features.data() + a * feature_dim);
}

void remove_rows(ad::Tensor& t, const std::vector<bool>& drop) {
  const std::size_t rows = t.dim(0);
  if (rows != drop.size()) throw ad::ShapeError("remove_rows: drop mask size mismatch");
  const std::size_t width = t.numel() / rows;
  std::size_t w = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (drop[r]) continue;
    if (w != r) std::copy_n(t.data() + r * width, width, t.data() + w * width);
    ++w;
  }
  std::vector<std::size_t> shape = t.shape();
  shape[0] = w;
  t = ad::Tensor(shape, std::vector<double>(t.data(), t.data() + w * width));
}

void AnchorSet::remove_anchors(const std::vector<std::size_t>& indices) {
  if (indices.empty()) return;
  std::vector<bool> drop(n(), false);
  for (std::size_t i : indices) drop.at(i) = true;
  remove_rows(positions, drop);
  remove_rows(features, drop);
  remove_rows(offset_features, drop);
  remove_rows(offset_positions, drop);
  remove_rows(anchor_scales, drop);
  remove_rows(offset_scales, drop);
  remove_rows(offset_quats, drop);
  remove_rows(position_scale, drop);
}

std::vector<ParamRef> learnable_inventory(AnchorSet& scene, HeadBank& heads) {
  std::vector<ParamRef> out;
  out.push_back({"features", &scene.features, kLrFeatures});
  out.push_back({"offset_features", &scene.offset_features, kLrOffsets});
  out.push_back({"offset_positions", &scene.offset_positions, kLrOffsets});
  out.push_back({"anchor_scales", &scene.anchor_scales, kLrScales});
  out.push_back({"offset_scales", &scene.offset_scales, kLrScales});
  out.push_back({"offset_quats", &scene.offset_quats, kLrScales});
  out.push_back({"position_scale", &scene.position_scale, kLrScales});
  auto add_mlp = [&](const char* base, Mlp& m, int group) {
    for (std::size_t l = 0; l < m.layers(); ++l) {
      out.push_back({std::string(base) + ".w" + std::to_string(l), &m.weights[l], group});
      out.push_back({std::string(base) + ".b" + std::to_string(l), &m.biases[l], group});
    }
  };
  add_mlp("opacity", heads.opacity, kLrHeads);
  add_mlp("color", heads.color, kLrHeads);
  add_mlp("scale", heads.scale, kLrHeads);
  add_mlp("quat", heads.quat, kLrHeads);
  add_mlp("mask", heads.mask, kLrHeads);
  add_mlp("deform", heads.deform, kLrDeform);
  return out;
}

}  // namespace edgs
