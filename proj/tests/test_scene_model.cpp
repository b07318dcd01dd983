#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "edgs/heads.hpp"
#include "edgs/scene.hpp"

using namespace edgs;

namespace {

PointCloud grid_cloud(std::size_t n) {
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i)
    pc.points.push_back({static_cast<double>(i) * 2.0, 0.0, 0.0});
  return pc;
}

}  // namespace

TEST_CASE("point cloud parsing") {
  std::istringstream in(
      "# heading comment\n"
      "1.5 2.5 3.5\n"
      "\n"
      "0 0 1  # trailing comment\n");
  PointCloud pc = PointCloud::parse(in);
  REQUIRE(pc.points.size() == 2);
  CHECK(pc.points[0][0] == 1.5);
  CHECK(pc.points[1][2] == 1.0);
  CHECK(pc.colors.empty());

  std::istringstream with_colors("0 0 0 0.2 0.4 0.6\n1 1 1 1 0 0\n");
  PointCloud pc2 = PointCloud::parse(with_colors);
  REQUIRE(pc2.colors.size() == 2);
  CHECK(pc2.colors[0][1] == 0.4);

  std::istringstream short_line("1 2 3\n4 5\n");
  CHECK_THROWS_WITH_AS(PointCloud::parse(short_line),
                       doctest::Contains("line 2"), std::runtime_error);

  std::istringstream partial_color("1 2 3 0.5\n");
  CHECK_THROWS_AS(PointCloud::parse(partial_color), std::runtime_error);

  std::istringstream mixed("1 2 3 0.5 0.5 0.5\n4 5 6\n");
  CHECK_THROWS_AS(PointCloud::parse(mixed), std::runtime_error);
}

TEST_CASE("point cloud save/load round trip") {
  PointCloud pc;
  pc.points = {{0.125, -3.75, 2.0}, {1e-9, 42.0, -0.0625}};
  pc.colors = {{0.1, 0.2, 0.3}, {1.0, 0.0, 0.5}};
  const std::string path = "scene_model_roundtrip.txt";
  pc.save(path);
  PointCloud back = PointCloud::load(path);
  REQUIRE(back.points.size() == 2);
  for (int i = 0; i < 2; ++i)
    for (int c = 0; c < 3; ++c) {
      CHECK(back.points[i][c] == doctest::Approx(pc.points[i][c]).epsilon(1e-15));
      CHECK(back.colors[i][c] == doctest::Approx(pc.colors[i][c]).epsilon(1e-15));
    }
}

TEST_CASE("voxelization snaps to cell corners") {
  PointCloud pc;
  pc.points = {{1.3, -0.7, 0.05}};
  AnchorSet s = voxelize_points(pc, 0.6, 1);
  REQUIRE(s.n() == 1);
  CHECK(s.positions[0] == doctest::Approx(1.2).epsilon(1e-12));
  CHECK(s.positions[1] == doctest::Approx(-1.2).epsilon(1e-12));
  CHECK(s.positions[2] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("voxelization dedups and keeps first-visit order") {
  PointCloud pc;
  pc.points = {{2.5, 0.0, 0.0}, {0.1, 0.1, 0.1}, {2.9, 0.1, 0.2}, {-1.0, 0.0, 0.0}};
  AnchorSet s = voxelize_points(pc, 1.0, 7);
  REQUIRE(s.n() == 3);  // first and third share a cell
  CHECK(s.position(0) == std::array<double, 3>{2.0, 0.0, 0.0});
  CHECK(s.position(1) == std::array<double, 3>{0.0, 0.0, 0.0});
  CHECK(s.position(2) == std::array<double, 3>{-1.0, 0.0, 0.0});
}

TEST_CASE("voxelization is idempotent on its own corners") {
  PointCloud pc;
  pc.points = {{0.3, -2.2, 5.9}, {-7.7, 0.0, 1.4}, {3.3, 3.3, -3.3}};
  AnchorSet first = voxelize_points(pc, 0.6, 3);
  PointCloud corners;
  for (std::size_t a = 0; a < first.n(); ++a) corners.points.push_back(first.position(a));
  AnchorSet second = voxelize_points(corners, 0.6, 3);
  REQUIRE(second.n() == first.n());
  for (std::size_t i = 0; i < first.positions.numel(); ++i)
    CHECK(second.positions[i] == first.positions[i]);
}

TEST_CASE("voxelization input validation") {
  PointCloud empty;
  CHECK_THROWS_AS(voxelize_points(empty, 0.6, 1), std::runtime_error);

  PointCloud bad;
  bad.points = {{0, 0, 0}, {1, std::nan(""), 1}};
  CHECK_THROWS_WITH_AS(voxelize_points(bad, 0.6, 1), doctest::Contains("point 1"),
                       std::runtime_error);

  PointCloud ok = grid_cloud(1);
  CHECK_THROWS_AS(voxelize_points(ok, 0.0, 1), std::runtime_error);
  CHECK_THROWS_AS(voxelize_points(ok, -0.5, 1), std::runtime_error);
}

TEST_CASE("anchor initialization ranges and constants") {
  AnchorSet s = voxelize_points(grid_cloud(6), 0.6, 99);
  REQUIRE(s.n() == 6);
  CHECK(s.offsets_per_anchor == 10);
  CHECK(s.feature_dim == 8);
  const std::size_t K = s.offsets_per_anchor;

  for (std::size_t i = 0; i < s.features.numel(); ++i) {
    CHECK(s.features[i] >= -0.1);
    CHECK(s.features[i] <= 0.1);
  }
  for (std::size_t i = 0; i < s.offset_features.numel(); ++i) {
    CHECK(s.offset_features[i] >= -0.1);
    CHECK(s.offset_features[i] <= 0.1);
  }
  for (std::size_t i = 0; i < s.offset_positions.numel(); ++i) {
    CHECK(s.offset_positions[i] >= -0.5);
    CHECK(s.offset_positions[i] <= 0.5);
  }
  const double expect_log = std::log(0.6 / 4.0);
  for (std::size_t i = 0; i < s.anchor_scales.numel(); ++i)
    CHECK(s.anchor_scales[i] == expect_log);
  for (std::size_t i = 0; i < s.position_scale.numel(); ++i)
    CHECK(s.position_scale[i] == 0.6);
  for (std::size_t i = 0; i < s.offset_scales.numel(); ++i)
    CHECK(s.offset_scales[i] == 0.0);
  for (std::size_t a = 0; a < s.n(); ++a)
    for (std::size_t k = 0; k < K; ++k) {
      CHECK(s.offset_quats[(a * K + k) * 4 + 0] == 1.0);
      CHECK(s.offset_quats[(a * K + k) * 4 + 1] == 0.0);
      CHECK(s.offset_quats[(a * K + k) * 4 + 2] == 0.0);
      CHECK(s.offset_quats[(a * K + k) * 4 + 3] == 0.0);
    }
}

TEST_CASE("voxelization is seed-deterministic") {
  AnchorSet a = voxelize_points(grid_cloud(4), 0.6, 1234);
  AnchorSet b = voxelize_points(grid_cloud(4), 0.6, 1234);
  AnchorSet c = voxelize_points(grid_cloud(4), 0.6, 4321);
  for (std::size_t i = 0; i < a.features.numel(); ++i) CHECK(a.features[i] == b.features[i]);
  bool differs = false;
  for (std::size_t i = 0; i < a.features.numel(); ++i)
    if (a.features[i] != c.features[i]) differs = true;
  CHECK(differs);
}

TEST_CASE("runtime offsets/feature-dim are honored") {
  AnchorSet s = voxelize_points(grid_cloud(3), 0.6, 5, 4, 16);
  CHECK(s.offsets_per_anchor == 4);
  CHECK(s.feature_dim == 16);
  CHECK(s.features.shape() == std::vector<std::size_t>{3, 16});
  CHECK(s.offset_features.shape() == std::vector<std::size_t>{3, 4, 16});
  CHECK(s.offset_quats.shape() == std::vector<std::size_t>{3, 4, 4});
}

TEST_CASE("learnable inventory layout") {
  AnchorSet s = voxelize_points(grid_cloud(10), 0.6, 11);
  HeadBank heads = HeadBank::make(s.feature_dim, s.offsets_per_anchor, 7);
  auto inv = learnable_inventory(s, heads);

  // 7 scene arrays + 5 two-layer heads + 1 four-layer head, weight+bias each.
  REQUIRE(inv.size() == 7 + 5 * 4 + 8);
  CHECK(inv[0].name == "features");
  CHECK(inv[0].tensor == &s.features);
  CHECK(inv[0].tensor->numel() == 10 * 8);
  CHECK(inv[6].name == "position_scale");
  CHECK(inv[7].name == "opacity.w0");
  CHECK(inv[10].name == "opacity.b1");
  CHECK(inv[11].name == "color.w0");
  CHECK(inv[23].name == "mask.w0");
  CHECK(inv[27].name == "deform.w0");
  CHECK(inv.back().name == "deform.b3");

  std::set<std::string> names;
  for (const auto& p : inv) {
    CHECK(names.insert(p.name).second);  // unique names
    REQUIRE(p.tensor != nullptr);
    for (std::size_t i = 0; i < p.tensor->numel(); ++i)
      CHECK(std::isfinite((*p.tensor)[i]));
    CHECK(p.name != "positions");  // anchor centers stay frozen
  }

  CHECK(inv[0].lr_group == kLrFeatures);
  CHECK(inv[1].lr_group == kLrOffsets);
  CHECK(inv[2].lr_group == kLrOffsets);
  CHECK(inv[3].lr_group == kLrScales);
  CHECK(inv[6].lr_group == kLrScales);
  CHECK(inv[7].lr_group == kLrHeads);
  CHECK(inv[26].lr_group == kLrHeads);
  CHECK(inv[27].lr_group == kLrDeform);
}

TEST_CASE("append_anchor copies parent features and preserves rows") {
  AnchorSet s = voxelize_points(grid_cloud(3), 0.6, 21);
  const std::vector<double> before(s.features.data(), s.features.data() + s.features.numel());
  std::mt19937_64 rng(5);
  s.append_anchor({9.0, 9.0, 9.0}, 1, rng);
  REQUIRE(s.n() == 4);
  CHECK(s.position(3) == std::array<double, 3>{9.0, 9.0, 9.0});
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(s.features[i] == before[i]);
  for (std::size_t i = 0; i < s.feature_dim; ++i)
    CHECK(s.features[3 * s.feature_dim + i] == s.features[1 * s.feature_dim + i]);
  CHECK(s.position_scale[3 * 3 + 0] == 0.6);
  CHECK(s.offset_quats[(3 * s.offsets_per_anchor) * 4 + 0] == 1.0);
}

TEST_CASE("remove_anchors compacts surviving rows in order") {
  AnchorSet s = voxelize_points(grid_cloud(5), 0.6, 31);
  const auto pos2 = s.position(2);
  const auto pos4 = s.position(4);
  const std::vector<double> feat2(s.features.data() + 2 * s.feature_dim,
                                  s.features.data() + 3 * s.feature_dim);
  s.remove_anchors({0, 3});
  REQUIRE(s.n() == 3);
  CHECK(s.position(1) == pos2);
  CHECK(s.position(2) == pos4);
  for (std::size_t i = 0; i < s.feature_dim; ++i)
    CHECK(s.features[1 * s.feature_dim + i] == feat2[i]);
  CHECK(s.offset_features.shape()[0] == 3);
  CHECK(s.offset_quats.shape()[0] == 3);

  ad::Tensor t({2, 2});
  std::vector<bool> wrong(3, false);
  CHECK_THROWS_AS(remove_rows(t, wrong), ad::ShapeError);
}
