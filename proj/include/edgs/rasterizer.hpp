#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "edgs/geometry.hpp"
#include "edgs/graph.hpp"

namespace edgs {

struct GaussianPrimitive {
  Vec3 position{0, 0, 0};
  Vec3 scale{1, 1, 1};        // world units, strictly positive
  Vec4 quaternion{1, 0, 0, 0};  // unit norm
  double opacity = 0.5;
  Vec3 color{1, 1, 1};
  std::uint32_t parent_anchor = 0;
  std::uint32_t parent_offset = 0;
};

/// Screen-space footprint after EWA projection. axx/axy/ayy cache the inverse
/// of the (regularized) covariance; r3x/r3y its 3-sigma half extents.
struct Splat2D {
  double u = 0, v = 0;
  double vxx = 0, vxy = 0, vyy = 0;
  double depth = 0;
  double opacity = 0;
  Vec3 color{0, 0, 0};
  std::uint32_t index = 0;
  double axx = 0, axy = 0, ayy = 0;
  double r3x = 0, r3y = 0;
};

enum class RenderMode { kNaive, kTiled };

/// World covariance R diag(s^2) R^T of a unit quaternion and positive scale.
Mat3 build_covariance(const Vec4& unit_quat, const Vec3& scale);

/// EWA local-affine projection. Returns nothing when the primitive is culled
/// (depth <= 0.01 or its 3-sigma box misses the image).
std::optional<Splat2D> project_gaussian(const GaussianPrimitive& prim, const CameraFrame& cam);

struct PixelResult {
  Vec3 color{0, 0, 0};
  double transmittance = 1.0;
};

/// Front-to-back compositing of depth-sorted splats at one pixel position.
/// Splats are consulted only where the pixel lies inside their 3-sigma box
/// (the same inclusion rule binds the naive and tiled render paths); per-splat
/// alpha is clamped to 0.99 and accumulation stops below transmittance 1e-4.
PixelResult composite_pixel(std::span<const Splat2D> sorted, double px, double py);

Image render_image(std::span<const GaussianPrimitive> prims, const CameraFrame& cam,
                   RenderMode mode);

/// Densification statistics gathered during the backward pass: accumulated
/// screen-space center-gradient norm and visibility counts per anchor.
struct DensifyStats {
  std::vector<double> grad_accum;
  std::vector<std::size_t> visible;
  void resize(std::size_t n_anchors) {
    grad_accum.assign(n_anchors, 0.0);
    visible.assign(n_anchors, 0);
  }
  std::size_t size() const { return grad_accum.size(); }
};

/// Differentiable rasterization node. positions/scales {N,K,3}, quats {N,K,4}
/// (unit), opacities {N,K}, colors {N,K,3} -> image {H,W,3}. Scales are world
/// units (already exp-activated). When `stats` is set, the backward pass adds
/// per-anchor screen-gradient norms and visibility counts into it.
ad::Value rasterize(ad::Graph& g, ad::Value positions, ad::Value scales, ad::Value quats,
                    ad::Value opacities, ad::Value colors, const CameraFrame& cam,
                    RenderMode mode, DensifyStats* stats = nullptr);

}  // namespace edgs
