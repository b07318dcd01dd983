#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "edgs/geometry.hpp"
#include "edgs/scene.hpp"

namespace edgs {

enum class MotionKind { kStatic, kLinear, kCircular, kOscillating };

const char* motion_kind_name(MotionKind k);
MotionKind parse_motion_kind(const std::string& name);

/// Soft sphere: Gaussian density falloff sigma = radius/2, hard-truncated at
/// 4 sigma so far pixels receive exactly zero contribution.
struct Blob {
  Vec3 center{0, 0, 0};
  double radius = 0.5;
  Vec3 color{1, 1, 1};
  MotionKind motion = MotionKind::kStatic;
  double amplitude = 0.0;
  Vec3 axis{1, 0, 0};  // linear travel direction (unit)
};

struct SceneSpec {
  std::vector<Blob> blobs;
  std::size_t n_timesteps = 20;
  std::size_t n_cameras = 2;
  std::size_t width = 64;
  std::size_t height = 64;
  std::uint64_t seed = 42;
  double camera_distance = 8.0;
  double camera_spread_deg = 30.0;  // total azimuth span of the camera arc
  double focal = 100.0;
  std::size_t points_per_blob = 60;

  std::size_t n_dynamic() const;
  void validate() const;
};

/// Ground truth rendered by an analytic ray tracer (2x2 supersampling,
/// front-to-back compositing of soft spheres ordered by ray distance) —
/// deliberately independent of the splatting rasterizer.
struct SyntheticScene {
  SceneSpec spec;
  std::vector<CameraFrame> frames;  // (camera-major, timestep-minor), t normalized
  std::vector<Image> images;        // parallel to frames
  PointCloud init_cloud;            // sampled on blob surfaces at t=0
  std::vector<int> labels;          // per point: 0 static, 1 dynamic
  std::vector<std::size_t> point_blob;
  std::vector<Vec3> point_dir;  // unit surface direction from blob center

  std::size_t frame_index(std::size_t camera, std::size_t timestep) const {
    return camera * spec.n_timesteps + timestep;
  }
  double time_of(std::size_t timestep) const {
    return static_cast<double>(timestep) / static_cast<double>(spec.n_timesteps - 1);
  }

  // Motion oracle.
  Vec3 blob_center(std::size_t b, double t) const;
  double blob_radius(std::size_t b, double t) const;
  Vec3 point_position(std::size_t i, double t) const;
  Vec3 point_displacement(std::size_t i, double t) const;

  /// Pixels of `camera` that no dynamic blob's truncated footprint ever
  /// touches at any scene timestep (checked per subray).
  std::vector<bool> static_pixel_mask(std::size_t camera) const;
};

Image render_blobs(const SceneSpec& spec, const CameraFrame& cam, double t);

SyntheticScene generate(const SceneSpec& spec);

/// 6 static + 2 dynamic blobs (one linear, one with oscillating radius),
/// 20 timesteps, 2 cameras 30 degrees apart, 64x64, seed 42.
SceneSpec blobs_v1();

/// Directory layout: spec.txt, cloud.txt, labels.txt, cameras.txt,
/// frames/cam{c}_t{t}.ppm.
void save_scene(const SyntheticScene& scene, const std::string& dir);
SyntheticScene load_scene(const std::string& dir);

CameraFrame look_at_camera(const Vec3& position, const Vec3& target, double fx, double fy,
                           std::size_t width, std::size_t height);

}  // namespace edgs
