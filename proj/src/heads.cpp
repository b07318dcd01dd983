#include "edgs/heads.hpp"

#include <cmath>
#include <stdexcept>

#include "edgs/encoding.hpp"

namespace edgs {

Mlp Mlp::make(const std::vector<std::size_t>& dims, std::mt19937_64& rng, bool zero_last) {
  if (dims.size() < 2) throw std::runtime_error("mlp: need at least one layer");
  Mlp m;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const std::size_t in = dims[l], out = dims[l + 1];
    ad::Tensor w({in, out});
    const bool zero = zero_last && l + 2 == dims.size();
    if (!zero) {
      const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
      std::uniform_real_distribution<double> dist(-limit, limit);
      for (std::size_t i = 0; i < w.numel(); ++i) w[i] = dist(rng);
    }
    m.weights.push_back(std::move(w));
    m.biases.emplace_back(std::vector<std::size_t>{1, out});
  }
  return m;
}

ad::Tensor Mlp::forward_raw(const ad::Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != in_width())
    throw ad::ShapeError("mlp: input " + x.shape_str() + " does not match width " +
                         std::to_string(in_width()));
  ad::Tensor cur = x;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    const ad::Tensor& w = weights[l];
    const ad::Tensor& b = biases[l];
    const std::size_t rows = cur.dim(0), in = w.dim(0), out = w.dim(1);
    ad::Tensor next({rows, out});
    for (std::size_t r = 0; r < rows; ++r) {
      double* orow = next.data() + r * out;
      std::copy_n(b.data(), out, orow);
      const double* irow = cur.data() + r * in;
      for (std::size_t i = 0; i < in; ++i) {
        const double v = irow[i];
        if (v == 0.0) continue;
        const double* wrow = w.data() + i * out;
        for (std::size_t j = 0; j < out; ++j) orow[j] += v * wrow[j];
      }
      if (l + 1 < weights.size())
        for (std::size_t j = 0; j < out; ++j) orow[j] = std::max(orow[j], 0.0);
    }
    cur = std::move(next);
  }
  return cur;
}

ad::Value Mlp::forward(ad::Graph& g, ad::Value x, std::span<const ad::Value> params) const {
  if (params.size() != 2 * weights.size())
    throw std::runtime_error("mlp: parameter leaf count mismatch");
  ad::Value cur = x;
  const std::size_t rows = x.shape()[0];
  for (std::size_t l = 0; l < weights.size(); ++l) {
    ad::Value z = g.matmul(cur, params[2 * l]);
    ad::Value b = g.broadcast(params[2 * l + 1], {rows, weights[l].dim(1)});
    cur = g.add(z, b);
    if (l + 1 < weights.size()) cur = g.relu(cur);
  }
  return cur;
}

HeadBank HeadBank::make(std::size_t d, std::size_t K, std::uint64_t seed,
                        bool view_dependent_color) {
  std::mt19937_64 rng(seed);
  HeadBank h;
  h.color_view_dependent = view_dependent_color;
  const std::size_t t_enc = 2 * kTimeOctaves;
  const std::size_t x_enc = 6 * kSpatialOctaves;
  h.opacity = Mlp::make({d, 64, K}, rng, false);
  h.color = Mlp::make({view_dependent_color ? d + 3 : d, 64, 3 * K}, rng, false);
  h.scale = Mlp::make({d + t_enc, 64, 3 * K}, rng, true);
  h.quat = Mlp::make({d + t_enc, 64, 4 * K}, rng, true);
  h.mask = Mlp::make({d, 32, 1}, rng, false);
  // Open the time gate at init (sigmoid(2) ~ 0.88) so deformation heads see
  // gradient before the mask regularizer can shut static-looking anchors.
  h.mask.biases.back()[0] = 2.0;
  h.deform = Mlp::make({x_enc + t_enc, 128, 128, 128, 3}, rng, true);
  return h;
}

namespace {

ad::Tensor single_row(std::span<const double> v) {
  return ad::Tensor({1, v.size()}, std::vector<double>(v.begin(), v.end()));
}

ad::Tensor single_row(std::vector<double> v) {
  const std::size_t n = v.size();
  return ad::Tensor({1, n}, std::move(v));
}

std::vector<double> sigmoid_all(ad::Tensor t) {
  std::vector<double> out(t.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-t[i]));
  return out;
}

std::vector<double> to_vector(const ad::Tensor& t) {
  return std::vector<double>(t.data(), t.data() + t.numel());
}

}  // namespace

std::vector<double> HeadBank::decode_opacity(std::span<const double> f_a) const {
  return sigmoid_all(opacity.forward_raw(single_row(f_a)));
}

std::vector<double> HeadBank::decode_color(std::span<const double> f_a,
                                           const std::array<double, 3>& view_dir) const {
  const double n2 =
      view_dir[0] * view_dir[0] + view_dir[1] * view_dir[1] + view_dir[2] * view_dir[2];
  if (std::abs(std::sqrt(n2) - 1.0) > 1e-6)
    throw std::runtime_error("decode_color: view direction must be unit length");
  std::vector<double> in(f_a.begin(), f_a.end());
  if (color_view_dependent) in.insert(in.end(), view_dir.begin(), view_dir.end());
  return sigmoid_all(color.forward_raw(single_row(std::move(in))));
}

std::vector<double> HeadBank::decode_scale_delta(std::span<const double> f_a, double t) const {
  std::vector<double> in(f_a.begin(), f_a.end());
  const auto enc = positional_encoding({t}, kTimeOctaves);
  in.insert(in.end(), enc.begin(), enc.end());
  return to_vector(scale.forward_raw(single_row(std::move(in))));
}

std::vector<double> HeadBank::decode_quat_delta(std::span<const double> f_a, double t) const {
  std::vector<double> in(f_a.begin(), f_a.end());
  const auto enc = positional_encoding({t}, kTimeOctaves);
  in.insert(in.end(), enc.begin(), enc.end());
  return to_vector(quat.forward_raw(single_row(std::move(in))));
}

double HeadBank::predict_time_mask(std::span<const double> f_a) const {
  return sigmoid_all(mask.forward_raw(single_row(f_a)))[0];
}

std::array<double, 3> HeadBank::deform_anchor(const std::array<double, 3>& x_a, double t) const {
  std::vector<double> in = positional_encoding({x_a[0], x_a[1], x_a[2]}, kSpatialOctaves);
  const auto enc = positional_encoding({t}, kTimeOctaves);
  in.insert(in.end(), enc.begin(), enc.end());
  const ad::Tensor out = deform.forward_raw(single_row(std::move(in)));
  return {out[0], out[1], out[2]};
}

}  // namespace edgs
