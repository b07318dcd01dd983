#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "edgs/graph.hpp"
#include "edgs/tensor.hpp"

namespace edgs {

/// Fully connected stack with relu between layers and a raw final layer.
/// Weights are {in,out}, biases {1,out}; activations are the caller's job.
struct Mlp {
  std::vector<ad::Tensor> weights;
  std::vector<ad::Tensor> biases;

  /// dims = {in, hidden..., out}. Hidden layers get Xavier-uniform init;
  /// the final layer is zeroed when zero_last is set (delta heads start inert).
  static Mlp make(const std::vector<std::size_t>& dims, std::mt19937_64& rng, bool zero_last);

  std::size_t layers() const { return weights.size(); }
  std::size_t in_width() const { return weights.front().dim(0); }
  std::size_t out_width() const { return weights.back().dim(1); }

  /// Batched inference: {B,in} -> {B,out}, no activation on the last layer.
  ad::Tensor forward_raw(const ad::Tensor& x) const;

  /// Graph-mode forward. `params` holds leaves in w0,b0,w1,b1,... order.
  ad::Value forward(ad::Graph& g, ad::Value x, std::span<const ad::Value> params) const;
};

/// All decoder networks. Widths follow K offsets per anchor, feature dim d,
/// frequency encodings gamma with L_x=10 (positions) and L_t=6 (time).
struct HeadBank {
  static constexpr std::size_t kSpatialOctaves = 10;  // L_x
  static constexpr std::size_t kTimeOctaves = 6;      // L_t

  Mlp opacity;  // d -> 64 -> K, sigmoid
  Mlp color;    // d+3 (or d) -> 64 -> 3K, sigmoid
  Mlp scale;    // d+2*L_t -> 64 -> 3K, raw delta
  Mlp quat;     // d+2*L_t -> 64 -> 4K, raw delta
  Mlp mask;     // d -> 32 -> 1, sigmoid
  Mlp deform;   // 6*L_x+2*L_t -> 128 -> 128 -> 128 -> 3, raw displacement
  bool color_view_dependent = true;

  static HeadBank make(std::size_t d, std::size_t K, std::uint64_t seed,
                       bool view_dependent_color = true);

  std::size_t offsets() const { return opacity.out_width(); }
  std::size_t feature_dim() const { return opacity.in_width(); }

  // Single-anchor inference decoders.
  std::vector<double> decode_opacity(std::span<const double> f_a) const;
  std::vector<double> decode_color(std::span<const double> f_a,
                                   const std::array<double, 3>& view_dir) const;
  std::vector<double> decode_scale_delta(std::span<const double> f_a, double t) const;
  std::vector<double> decode_quat_delta(std::span<const double> f_a, double t) const;
  double predict_time_mask(std::span<const double> f_a) const;
  std::array<double, 3> deform_anchor(const std::array<double, 3>& x_a, double t) const;
};

}  // namespace edgs
