#include "edgs/deform.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "edgs/encoding.hpp"

namespace edgs {

const char* deform_kind_name(DeformKind k) {
  switch (k) {
    case DeformKind::kRbf: return "rbf";
    case DeformKind::kRigid: return "rigid";
    case DeformKind::kKnn: return "knn";
    case DeformKind::kCosine: return "cosine";
  }
  return "?";
}

DeformKind parse_deform_kind(const std::string& name) {
  if (name == "rbf") return DeformKind::kRbf;
  if (name == "rigid") return DeformKind::kRigid;
  if (name == "knn") return DeformKind::kKnn;
  if (name == "cosine") return DeformKind::kCosine;
  throw std::runtime_error("unknown deform strategy: " + name);
}

double rbf_weight(std::span<const double> f_a, std::span<const double> f_o, double sigma) {
  if (f_a.size() != f_o.size())
    throw std::runtime_error("rbf_weight: feature length mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < f_a.size(); ++i) {
    const double d = f_a[i] - f_o[i];
    d2 += d * d;
  }
  return std::exp(-d2 / (2.0 * sigma * sigma));
}

namespace {

double cosine_weight(std::span<const double> f_a, std::span<const double> f_o) {
  double dot = 0.0, na = 0.0, no = 0.0;
  for (std::size_t i = 0; i < f_a.size(); ++i) {
    dot += f_a[i] * f_o[i];
    na += f_a[i] * f_a[i];
    no += f_o[i] * f_o[i];
  }
  const double denom = std::sqrt(na + 1e-18) * std::sqrt(no + 1e-18);
  return std::max(0.0, dot / denom);
}

// Inverse-distance weights over the knn_k anchors nearest to each offset's
// canonical position. Weights are fixed data (no gradient flows through them).
struct KnnTable {
  std::size_t kk = 0;  // neighbours per offset
  std::vector<std::uint32_t> idx;
  std::vector<double> w;
};

KnnTable build_knn_table(const AnchorSet& scene, std::size_t knn_k) {
  const std::size_t n = scene.n(), K = scene.offsets_per_anchor;
  KnnTable table;
  table.kk = std::min(knn_k, n);
  table.idx.resize(n * K * table.kk);
  table.w.resize(n * K * table.kk);
  std::vector<std::pair<double, std::uint32_t>> dist(n);
  for (std::size_t a = 0; a < n; ++a) {
    const Vec3 xa = scene.position(a);
    for (std::size_t k = 0; k < K; ++k) {
      Vec3 c = xa;
      for (int d = 0; d < 3; ++d)
        c[d] += scene.offset_positions[(a * K + k) * 3 + d] * scene.position_scale[a * 3 + d];
      for (std::size_t j = 0; j < n; ++j)
        dist[j] = {norm(c - scene.position(j)), static_cast<std::uint32_t>(j)};
      std::partial_sort(dist.begin(), dist.begin() + table.kk, dist.end());
      double sum = 0.0;
      for (std::size_t m = 0; m < table.kk; ++m) sum += 1.0 / (dist[m].first + 1e-6);
      for (std::size_t m = 0; m < table.kk; ++m) {
        table.idx[(a * K + k) * table.kk + m] = dist[m].second;
        table.w[(a * K + k) * table.kk + m] = (1.0 / (dist[m].first + 1e-6)) / sum;
      }
    }
  }
  return table;
}

std::span<const double> anchor_feature(const AnchorSet& s, std::size_t a) {
  return {s.features.data() + a * s.feature_dim, s.feature_dim};
}

std::span<const double> offset_feature(const AnchorSet& s, std::size_t a, std::size_t k) {
  return {s.offset_features.data() + (a * s.offsets_per_anchor + k) * s.feature_dim,
          s.feature_dim};
}

}  // namespace

Vec3 offset_motion(const DeformStrategy& strategy, const AnchorSet& scene,
                   const std::vector<Vec3>& anchor_motions, std::size_t anchor, std::size_t k) {
  switch (strategy.kind) {
    case DeformKind::kRigid:
      return anchor_motions[anchor];
    case DeformKind::kRbf:
      return rbf_weight(anchor_feature(scene, anchor), offset_feature(scene, anchor, k),
                        strategy.sigma) *
             anchor_motions[anchor];
    case DeformKind::kCosine:
      return cosine_weight(anchor_feature(scene, anchor), offset_feature(scene, anchor, k)) *
             anchor_motions[anchor];
    case DeformKind::kKnn: {
      const std::size_t K = scene.offsets_per_anchor;
      const std::size_t kk = std::min(strategy.knn_k, scene.n());
      Vec3 c = scene.position(anchor);
      for (int d = 0; d < 3; ++d)
        c[d] += scene.offset_positions[(anchor * K + k) * 3 + d] *
                scene.position_scale[anchor * 3 + d];
      std::vector<std::pair<double, std::size_t>> dist(scene.n());
      for (std::size_t j = 0; j < scene.n(); ++j)
        dist[j] = {norm(c - scene.position(j)), j};
      std::partial_sort(dist.begin(), dist.begin() + kk, dist.end());
      double sum = 0.0;
      for (std::size_t m = 0; m < kk; ++m) sum += 1.0 / (dist[m].first + 1e-6);
      Vec3 out{0, 0, 0};
      for (std::size_t m = 0; m < kk; ++m) {
        const double w = (1.0 / (dist[m].first + 1e-6)) / sum;
        out = out + w * anchor_motions[dist[m].second];
      }
      return out;
    }
  }
  return {0, 0, 0};
}

std::vector<GaussianPrimitive> compose_gaussians(const AnchorSet& scene, const HeadBank& heads,
                                                 const DeformStrategy& strategy, double t,
                                                 const Vec3& cam_center, MaskMode mode,
                                                 ComposeInfo* info,
                                                 const std::vector<int>* label_override) {
  const std::size_t n = scene.n(), K = scene.offsets_per_anchor;
  std::vector<double> gates(n, 1.0);
  std::vector<Vec3> motions(n, Vec3{0, 0, 0});
  std::size_t dynamic = 0, queries = 0;
  for (std::size_t a = 0; a < n; ++a) {
    if (mode == MaskMode::kGated) {
      bool is_dynamic;
      double gate;
      if (label_override) {
        is_dynamic = (*label_override)[a] != 0;
        gate = 1.0;
      } else {
        const double p = heads.predict_time_mask(anchor_feature(scene, a));
        is_dynamic = p > 0.5;
        gate = p;
      }
      if (!is_dynamic) {
        gates[a] = 0.0;
        continue;
      }
      gates[a] = gate;
      ++dynamic;
    }
    ++queries;
    motions[a] = gates[a] * heads.deform_anchor(scene.position(a), t);
  }
  if (info) {
    info->dynamic_anchors = (mode == MaskMode::kGated) ? dynamic : n;
    info->time_variant_queries = queries;
  }

  KnnTable knn;
  if (strategy.kind == DeformKind::kKnn) knn = build_knn_table(scene, strategy.knn_k);

  std::vector<GaussianPrimitive> prims;
  prims.reserve(n * K);
  for (std::size_t a = 0; a < n; ++a) {
    const auto fa = anchor_feature(scene, a);
    const Vec3 xa = scene.position(a);
    const std::vector<double> opac = heads.decode_opacity(fa);
    const Vec3 dir = normalized(xa - cam_center);
    const std::vector<double> colors = heads.decode_color(fa, dir);
    const bool time_variant = gates[a] != 0.0;
    std::vector<double> ds, dq;
    if (time_variant) {
      ds = heads.decode_scale_delta(fa, t);
      dq = heads.decode_quat_delta(fa, t);
    }
    for (std::size_t k = 0; k < K; ++k) {
      GaussianPrimitive p;
      Vec3 delta{0, 0, 0};
      if (strategy.kind == DeformKind::kKnn) {
        for (std::size_t m = 0; m < knn.kk; ++m) {
          const std::size_t e = (a * K + k) * knn.kk + m;
          delta = delta + knn.w[e] * motions[knn.idx[e]];
        }
      } else if (time_variant) {
        delta = offset_motion(strategy, scene, motions, a, k);
      }
      for (int c = 0; c < 3; ++c)
        p.position[c] = xa[c] +
                        scene.offset_positions[(a * K + k) * 3 + c] *
                            scene.position_scale[a * 3 + c] +
                        delta[c];
      for (int c = 0; c < 3; ++c) {
        const double d = time_variant ? gates[a] * ds[k * 3 + c] : 0.0;
        p.scale[c] = std::exp(scene.anchor_scales[a * 3 + c] +
                              scene.offset_scales[(a * K + k) * 3 + c] + d);
      }
      Vec4 q;
      for (int c = 0; c < 4; ++c) {
        const double d = time_variant ? gates[a] * dq[k * 4 + c] : 0.0;
        q[c] = scene.offset_quats[(a * K + k) * 4 + c] + d;
      }
      const double qn = std::max(
          std::sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]), 1e-12);
      for (int c = 0; c < 4; ++c) p.quaternion[c] = q[c] / qn;
      p.opacity = opac[k];
      for (int c = 0; c < 3; ++c) p.color[c] = colors[k * 3 + c];
      p.parent_anchor = static_cast<std::uint32_t>(a);
      p.parent_offset = static_cast<std::uint32_t>(k);
      prims.push_back(p);
    }
  }
  return prims;
}

namespace {

struct HeadSpans {
  std::span<const ad::Value> opacity, color, scale, quat, mask, deform;
};

HeadSpans slice_leaves(const std::vector<ad::Value>& leaves, const HeadBank& heads) {
  HeadSpans s;
  std::size_t at = 7;  // scene arrays occupy leaves[0..6]
  auto take = [&](const Mlp& m) {
    std::span<const ad::Value> sp(leaves.data() + at, m.layers() * 2);
    at += m.layers() * 2;
    return sp;
  };
  s.opacity = take(heads.opacity);
  s.color = take(heads.color);
  s.scale = take(heads.scale);
  s.quat = take(heads.quat);
  s.mask = take(heads.mask);
  s.deform = take(heads.deform);
  if (at != leaves.size())
    throw std::runtime_error("compose: leaf count does not match inventory");
  return s;
}

}  // namespace

ComposeGraph build_compose_graph(ad::Graph& g, const std::vector<ad::Value>& leaves,
                                 const AnchorSet& scene, const HeadBank& heads,
                                 const DeformStrategy& strategy, double t,
                                 const Vec3& cam_center, bool mask_gating) {
  using ad::Tensor;
  using ad::Value;
  const std::size_t n = scene.n(), K = scene.offsets_per_anchor, D = scene.feature_dim;
  const HeadSpans spans = slice_leaves(leaves, heads);
  const Value features = leaves[0];
  const Value offset_features = leaves[1];
  const Value offset_positions = leaves[2];
  const Value anchor_scales = leaves[3];
  const Value offset_scales = leaves[4];
  const Value offset_quats = leaves[5];
  const Value position_scale = leaves[6];

  // Frozen per-anchor constants: positions, view directions, encodings.
  Value xa = g.constant(scene.positions);
  const std::size_t t_enc = 2 * HeadBank::kTimeOctaves;
  const auto enc_time = positional_encoding({t}, HeadBank::kTimeOctaves);
  Tensor deform_in_t({n, 6 * HeadBank::kSpatialOctaves + t_enc});
  Tensor view_t({n, 3});
  for (std::size_t a = 0; a < n; ++a) {
    const Vec3 pos = scene.position(a);
    const auto enc = positional_encoding({pos[0], pos[1], pos[2]}, HeadBank::kSpatialOctaves);
    double* row = deform_in_t.data() + a * deform_in_t.dim(1);
    std::copy(enc.begin(), enc.end(), row);
    std::copy(enc_time.begin(), enc_time.end(), row + enc.size());
    const Vec3 dir = normalized(pos - cam_center);
    for (int c = 0; c < 3; ++c) view_t[a * 3 + c] = dir[c];
  }
  Value tcols = g.broadcast(
      g.constant(Tensor({1, t_enc}, std::vector<double>(enc_time.begin(), enc_time.end()))),
      {n, t_enc});

  ComposeGraph out;
  out.opacities = g.sigmoid(heads.opacity.forward(g, features, spans.opacity));
  Value color_in =
      heads.color_view_dependent ? g.concat(features, g.constant(view_t)) : features;
  out.colors =
      g.reshape(g.sigmoid(heads.color.forward(g, color_in, spans.color)), {n, K, 3});

  Value gate1;  // {N,1}
  if (mask_gating) {
    out.mask_probs = g.sigmoid(heads.mask.forward(g, features, spans.mask));
    gate1 = out.mask_probs;
  }

  Value dx = heads.deform.forward(g, g.constant(std::move(deform_in_t)), spans.deform);
  if (mask_gating) dx = g.mul(dx, g.broadcast(gate1, {n, 3}));

  Value dxo;  // {N,K,3}
  Value dx_rows = g.broadcast(g.reshape(dx, {n, 1, 3}), {n, K, 3});
  switch (strategy.kind) {
    case DeformKind::kRigid:
      dxo = dx_rows;
      break;
    case DeformKind::kRbf: {
      Value fa3 = g.broadcast(g.reshape(features, {n, 1, D}), {n, K, D});
      Value diff = fa3 - offset_features;
      Value d2 = g.sum_last(g.mul(diff, diff));
      Value w = g.exp(g.scale(d2, -1.0 / (2.0 * strategy.sigma * strategy.sigma)));
      dxo = g.mul(dx_rows, g.broadcast(g.reshape(w, {n, K, 1}), {n, K, 3}));
      break;
    }
    case DeformKind::kCosine: {
      Value fa3 = g.broadcast(g.reshape(features, {n, 1, D}), {n, K, D});
      Value dot = g.sum_last(g.mul(fa3, offset_features));
      Value eps_n = g.constant(Tensor({n}, 1e-18));
      Value eps_nk = g.constant(Tensor({n, K}, 1e-18));
      Value na = g.sqrt(g.sum_last(g.mul(features, features)) + eps_n);
      Value no = g.sqrt(g.sum_last(g.mul(offset_features, offset_features)) + eps_nk);
      Value w = g.relu(g.div(dot, g.mul(g.broadcast(g.reshape(na, {n, 1}), {n, K}), no)));
      dxo = g.mul(dx_rows, g.broadcast(g.reshape(w, {n, K, 1}), {n, K, 3}));
      break;
    }
    case DeformKind::kKnn: {
      const KnnTable table = build_knn_table(scene, strategy.knn_k);
      const ad::Tensor& dx_data = dx.data();
      Tensor mixed({n, K, 3});
      for (std::size_t a = 0; a < n; ++a)
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t m = 0; m < table.kk; ++m) {
            const std::size_t e = (a * K + k) * table.kk + m;
            for (int c = 0; c < 3; ++c)
              mixed[(a * K + k) * 3 + c] += table.w[e] * dx_data[table.idx[e] * 3 + c];
          }
      auto backward = [table, n, K](const Tensor& og, std::span<const Tensor* const>,
                                    std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        for (std::size_t a = 0; a < n; ++a)
          for (std::size_t k = 0; k < K; ++k)
            for (std::size_t m = 0; m < table.kk; ++m) {
              const std::size_t e = (a * K + k) * table.kk + m;
              for (int c = 0; c < 3; ++c)
                (*grads[0])[table.idx[e] * 3 + c] += table.w[e] * og[(a * K + k) * 3 + c];
            }
      };
      dxo = g.custom("knn-mix", {dx}, std::move(mixed), std::move(backward));
      break;
    }
  }

  Value xa_rows = g.broadcast(g.reshape(xa, {n, 1, 3}), {n, K, 3});
  Value ps_rows = g.broadcast(g.reshape(position_scale, {n, 1, 3}), {n, K, 3});
  out.positions = g.add(g.add(xa_rows, g.mul(offset_positions, ps_rows)), dxo);

  Value time_in = g.concat(features, tcols);
  Value ds = g.reshape(heads.scale.forward(g, time_in, spans.scale), {n, K, 3});
  Value dq = g.reshape(heads.quat.forward(g, time_in, spans.quat), {n, K, 4});
  if (mask_gating) {
    Value gate11 = g.reshape(gate1, {n, 1, 1});
    ds = g.mul(ds, g.broadcast(gate11, {n, K, 3}));
    dq = g.mul(dq, g.broadcast(gate11, {n, K, 4}));
  }
  Value s_log =
      g.add(g.add(g.broadcast(g.reshape(anchor_scales, {n, 1, 3}), {n, K, 3}), offset_scales),
            ds);
  out.scales = g.exp(s_log);
  out.quats = g.normalize_last(g.add(offset_quats, dq));
  return out;
}

}  // namespace edgs
