#pragma once

#include <span>
#include <vector>

#include "edgs/geometry.hpp"
#include "edgs/graph.hpp"
#include "edgs/heads.hpp"
#include "edgs/rasterizer.hpp"
#include "edgs/scene.hpp"

namespace edgs {

enum class DeformKind { kRbf, kRigid, kKnn, kCosine };

struct DeformStrategy {
  DeformKind kind = DeformKind::kRbf;
  double sigma = 1.0;
  std::size_t knn_k = 4;
};

const char* deform_kind_name(DeformKind k);
DeformKind parse_deform_kind(const std::string& name);

/// exp(-|f_a - f_o|^2 / (2 sigma^2)).
double rbf_weight(std::span<const double> f_a, std::span<const double> f_o, double sigma);

/// Motion of offset (anchor,k) given per-anchor displacements, per strategy.
Vec3 offset_motion(const DeformStrategy& strategy, const AnchorSet& scene,
                   const std::vector<Vec3>& anchor_motions, std::size_t anchor, std::size_t k);

/// How the time mask is applied when composing primitives for rendering:
/// kGated thresholds at 0.5 (static anchors skip the time-variant heads and
/// get zero deltas, dynamic anchors keep the soft gate); kOff disables the
/// mask entirely (gate = 1 everywhere).
enum class MaskMode { kGated, kOff };

struct ComposeInfo {
  std::size_t dynamic_anchors = 0;
  std::size_t time_variant_queries = 0;  // anchors whose time heads ran
};

/// Inference-path composition: N*K primitives in anchor-major, offset-minor
/// order. `label_override`, when given, replaces the mask-head decision
/// (nonzero = dynamic) under kGated.
std::vector<GaussianPrimitive> compose_gaussians(const AnchorSet& scene, const HeadBank& heads,
                                                 const DeformStrategy& strategy, double t,
                                                 const Vec3& cam_center, MaskMode mode,
                                                 ComposeInfo* info = nullptr,
                                                 const std::vector<int>* label_override = nullptr);

/// Graph-mode composition. `leaves` must follow learnable_inventory order.
/// With mask_gating, every time-variant delta is multiplied by the soft mask
/// probability before use and mask_probs is exposed for the regularizer.
struct ComposeGraph {
  ad::Value positions;   // {N,K,3}
  ad::Value scales;      // {N,K,3} world units
  ad::Value quats;       // {N,K,4} unit
  ad::Value opacities;   // {N,K}
  ad::Value colors;      // {N,K,3}
  ad::Value mask_probs;  // {N,1}; invalid when gating is off
};
ComposeGraph build_compose_graph(ad::Graph& g, const std::vector<ad::Value>& leaves,
                                 const AnchorSet& scene, const HeadBank& heads,
                                 const DeformStrategy& strategy, double t,
                                 const Vec3& cam_center, bool mask_gating);

}  // namespace edgs
