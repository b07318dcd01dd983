#include "edgs/rasterizer.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace edgs {

namespace {

constexpr double kDilation = 0.3;
constexpr double kAlphaClamp = 0.99;
constexpr double kMinTransmittance = 1e-4;
constexpr double kNearPlane = 0.01;
constexpr std::size_t kTileSize = 16;

bool singular_warned = false;

struct CamSpace {
  Vec3 p;                  // camera-space position
  double j00, j02, j11, j12;  // nonzero pinhole Jacobian entries
  double m[2][3];          // J * W
};

CamSpace camera_terms(const Vec3& position, const CameraFrame& cam) {
  CamSpace cs;
  cs.p = cam.to_camera(position);
  const double z = cs.p[2];
  cs.j00 = cam.fx / z;
  cs.j02 = -cam.fx * cs.p[0] / (z * z);
  cs.j11 = cam.fy / z;
  cs.j12 = -cam.fy * cs.p[1] / (z * z);
  const Mat3& w = cam.rotation;
  for (int c = 0; c < 3; ++c) {
    cs.m[0][c] = cs.j00 * w[c] + cs.j02 * w[6 + c];
    cs.m[1][c] = cs.j11 * w[3 + c] + cs.j12 * w[6 + c];
  }
  return cs;
}

// Sorted splat order: depth ascending, primitive index breaking ties.
std::vector<Splat2D> project_sorted(std::span<const GaussianPrimitive> prims,
                                    const CameraFrame& cam) {
  std::vector<Splat2D> splats;
  splats.reserve(prims.size());
  for (std::size_t i = 0; i < prims.size(); ++i)
    if (auto s = project_gaussian(prims[i], cam)) {
      s->index = static_cast<std::uint32_t>(i);
      splats.push_back(*s);
    }
  std::sort(splats.begin(), splats.end(), [](const Splat2D& a, const Splat2D& b) {
    if (a.depth != b.depth) return a.depth < b.depth;
    return a.index < b.index;
  });
  return splats;
}

// One front-to-back contribution at a pixel.
struct Contribution {
  std::uint32_t slot;  // position in the sorted splat array
  double alpha;
  double transmittance;  // before this splat
};

// Walks the given splat subset (already depth-sorted) at pixel (px,py),
// applying the shared 3-sigma inclusion test. When `rec` is non-null every
// surviving contribution is appended for the backward pass.
PixelResult composite_core(const std::vector<Splat2D>& splats, const std::uint32_t* subset,
                           std::size_t n, double px, double py,
                           std::vector<Contribution>* rec) {
  PixelResult out;
  double T = 1.0;
  for (std::size_t ii = 0; ii < n; ++ii) {
    const std::uint32_t slot = subset ? subset[ii] : static_cast<std::uint32_t>(ii);
    const Splat2D& s = splats[slot];
    const double dx = px - s.u, dy = py - s.v;
    if (std::abs(dx) > s.r3x || std::abs(dy) > s.r3y) continue;
    const double power =
        -0.5 * (s.axx * dx * dx + 2.0 * s.axy * dx * dy + s.ayy * dy * dy);
    if (power > 0.0) continue;  // numerically non-PSD; treat as empty
    const double alpha = std::min(kAlphaClamp, s.opacity * std::exp(power));
    if (rec) rec->push_back({slot, alpha, T});
    out.color[0] += T * alpha * s.color[0];
    out.color[1] += T * alpha * s.color[1];
    out.color[2] += T * alpha * s.color[2];
    T *= 1.0 - alpha;
    if (T < kMinTransmittance) break;
  }
  out.transmittance = T;
  return out;
}

struct TileBins {
  std::size_t tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<std::uint32_t>> lists;  // sorted order preserved
};

TileBins bin_tiles(const std::vector<Splat2D>& splats, std::size_t width, std::size_t height) {
  TileBins bins;
  bins.tiles_x = (width + kTileSize - 1) / kTileSize;
  bins.tiles_y = (height + kTileSize - 1) / kTileSize;
  bins.lists.resize(bins.tiles_x * bins.tiles_y);
  for (std::uint32_t slot = 0; slot < splats.size(); ++slot) {
    const Splat2D& s = splats[slot];
    const double x0 = s.u - s.r3x, x1 = s.u + s.r3x;
    const double y0 = s.v - s.r3y, y1 = s.v + s.r3y;
    const long tx0 = std::max(0L, static_cast<long>(std::floor(x0 / kTileSize)));
    const long ty0 = std::max(0L, static_cast<long>(std::floor(y0 / kTileSize)));
    const long tx1 = std::min(static_cast<long>(bins.tiles_x) - 1,
                              static_cast<long>(std::floor(x1 / kTileSize)));
    const long ty1 = std::min(static_cast<long>(bins.tiles_y) - 1,
                              static_cast<long>(std::floor(y1 / kTileSize)));
    for (long ty = ty0; ty <= ty1; ++ty)
      for (long tx = tx0; tx <= tx1; ++tx)
        bins.lists[ty * bins.tiles_x + tx].push_back(slot);
  }
  return bins;
}

}  // namespace

Mat3 build_covariance(const Vec4& q, const Vec3& scale) {
  const Mat3 r = quat_to_rot(q);
  const Vec3 s2 = {scale[0] * scale[0], scale[1] * scale[1], scale[2] * scale[2]};
  Mat3 cov;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int k = 0; k < 3; ++k) acc += r[i * 3 + k] * s2[k] * r[j * 3 + k];
      cov[i * 3 + j] = acc;
    }
  return cov;
}

std::optional<Splat2D> project_gaussian(const GaussianPrimitive& prim, const CameraFrame& cam) {
  const CamSpace cs = camera_terms(prim.position, cam);
  if (cs.p[2] <= kNearPlane) return std::nullopt;

  Splat2D s;
  s.depth = cs.p[2];
  s.u = cam.fx * cs.p[0] / cs.p[2] + cam.cx;
  s.v = cam.fy * cs.p[1] / cs.p[2] + cam.cy;

  const Mat3 cov3 = build_covariance(prim.quaternion, prim.scale);
  // V = M cov3 M^T + dilation * I
  double t[2][3];
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c)
      t[r][c] = cs.m[r][0] * cov3[c] + cs.m[r][1] * cov3[3 + c] + cs.m[r][2] * cov3[6 + c];
  s.vxx = t[0][0] * cs.m[0][0] + t[0][1] * cs.m[0][1] + t[0][2] * cs.m[0][2] + kDilation;
  s.vxy = t[0][0] * cs.m[1][0] + t[0][1] * cs.m[1][1] + t[0][2] * cs.m[1][2];
  s.vyy = t[1][0] * cs.m[1][0] + t[1][1] * cs.m[1][1] + t[1][2] * cs.m[1][2] + kDilation;

  const double det = s.vxx * s.vyy - s.vxy * s.vxy;
  if (!(det > 1e-12)) {
    if (!singular_warned) {
      std::cerr << "rasterizer: skipping splat with singular 2d covariance\n";
      singular_warned = true;
    }
    return std::nullopt;
  }
  s.axx = s.vyy / det;
  s.axy = -s.vxy / det;
  s.ayy = s.vxx / det;
  s.r3x = 3.0 * std::sqrt(s.vxx);
  s.r3y = 3.0 * std::sqrt(s.vyy);

  if (s.u + s.r3x < 0.0 || s.u - s.r3x > static_cast<double>(cam.width) ||
      s.v + s.r3y < 0.0 || s.v - s.r3y > static_cast<double>(cam.height))
    return std::nullopt;

  s.opacity = prim.opacity;
  s.color = prim.color;
  return s;
}

PixelResult composite_pixel(std::span<const Splat2D> sorted, double px, double py) {
  // Thin wrapper over the shared walk for tests and tools.
  std::vector<Splat2D> copy(sorted.begin(), sorted.end());
  return composite_core(copy, nullptr, copy.size(), px, py, nullptr);
}

Image render_image(std::span<const GaussianPrimitive> prims, const CameraFrame& cam,
                   RenderMode mode) {
  Image img(cam.width, cam.height);
  const std::vector<Splat2D> splats = project_sorted(prims, cam);
  if (mode == RenderMode::kNaive) {
    for (std::size_t y = 0; y < cam.height; ++y)
      for (std::size_t x = 0; x < cam.width; ++x) {
        const PixelResult r =
            composite_core(splats, nullptr, splats.size(), x + 0.5, y + 0.5, nullptr);
        for (int c = 0; c < 3; ++c) img.at(y, x, c) = r.color[c];
      }
    return img;
  }
  const TileBins bins = bin_tiles(splats, cam.width, cam.height);
  for (std::size_t ty = 0; ty < bins.tiles_y; ++ty)
    for (std::size_t tx = 0; tx < bins.tiles_x; ++tx) {
      const auto& list = bins.lists[ty * bins.tiles_x + tx];
      const std::size_t y1 = std::min(cam.height, (ty + 1) * kTileSize);
      const std::size_t x1 = std::min(cam.width, (tx + 1) * kTileSize);
      for (std::size_t y = ty * kTileSize; y < y1; ++y)
        for (std::size_t x = tx * kTileSize; x < x1; ++x) {
          const PixelResult r =
              composite_core(splats, list.data(), list.size(), x + 0.5, y + 0.5, nullptr);
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = r.color[c];
        }
    }
  return img;
}

namespace {

// Gradient of the rotation matrix w.r.t. each unit-quaternion component,
// contracted against dR. No normalization term: callers feed unit quaternions
// produced by an upstream normalize op which owns that part of the chain.
Vec4 rot_backward(const Vec4& q, const Mat3& dr) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Vec4 dq{0, 0, 0, 0};
  // dR/dw
  dq[0] = 2.0 * (dr[1] * -z + dr[2] * y + dr[3] * z + dr[5] * -x + dr[6] * -y + dr[7] * x);
  // dR/dx
  dq[1] = 2.0 * (dr[1] * y + dr[2] * z + dr[3] * y + dr[4] * -2.0 * x + dr[5] * -w +
                 dr[6] * z + dr[7] * w + dr[8] * -2.0 * x);
  // dR/dy
  dq[2] = 2.0 * (dr[0] * -2.0 * y + dr[1] * x + dr[2] * w + dr[3] * x + dr[5] * z +
                 dr[6] * -w + dr[7] * z + dr[8] * -2.0 * y);
  // dR/dz
  dq[3] = 2.0 * (dr[0] * -2.0 * z + dr[1] * -w + dr[2] * x + dr[3] * w + dr[4] * -2.0 * z +
                 dr[5] * y + dr[6] * x + dr[7] * y);
  return dq;
}

struct SplatGrad {
  double du = 0, dv = 0;
  double dv00 = 0, dv01 = 0, dv11 = 0;  // symmetric dL/dV (entrywise)
  double dopacity = 0;
  Vec3 dcolor{0, 0, 0};
  bool touched = false;
};

void raster_backward(const ad::Tensor& dimg, const ad::Tensor& pos, const ad::Tensor& scl,
                     const ad::Tensor& qt, const ad::Tensor& opa, const ad::Tensor& col,
                     const CameraFrame& cam, RenderMode mode, DensifyStats* stats,
                     std::span<ad::Tensor* const> grads) {
  const std::size_t K = pos.dim(1);
  const std::size_t n_prims = pos.numel() / 3;
  std::vector<GaussianPrimitive> prims(n_prims);
  for (std::size_t i = 0; i < n_prims; ++i) {
    GaussianPrimitive& p = prims[i];
    for (int c = 0; c < 3; ++c) {
      p.position[c] = pos[i * 3 + c];
      p.scale[c] = scl[i * 3 + c];
      p.color[c] = col[i * 3 + c];
    }
    for (int c = 0; c < 4; ++c) p.quaternion[c] = qt[i * 4 + c];
    p.opacity = opa[i];
    p.parent_anchor = static_cast<std::uint32_t>(i / K);
  }

  const std::vector<Splat2D> splats = project_sorted(prims, cam);
  std::vector<SplatGrad> sg(splats.size());

  TileBins bins;
  if (mode == RenderMode::kTiled) bins = bin_tiles(splats, cam.width, cam.height);

  std::vector<Contribution> contribs;
  contribs.reserve(256);
  for (std::size_t y = 0; y < cam.height; ++y)
    for (std::size_t x = 0; x < cam.width; ++x) {
      const double px = x + 0.5, py = y + 0.5;
      contribs.clear();
      if (mode == RenderMode::kTiled) {
        const auto& list =
            bins.lists[(y / kTileSize) * bins.tiles_x + (x / kTileSize)];
        composite_core(splats, list.data(), list.size(), px, py, &contribs);
      } else {
        composite_core(splats, nullptr, splats.size(), px, py, &contribs);
      }
      if (contribs.empty()) continue;
      const double gr = dimg[(y * cam.width + x) * 3 + 0];
      const double gg = dimg[(y * cam.width + x) * 3 + 1];
      const double gb = dimg[(y * cam.width + x) * 3 + 2];
      if (gr == 0.0 && gg == 0.0 && gb == 0.0) continue;
      // Back-to-front walk; S accumulates the composited color behind splat i.
      Vec3 suffix{0, 0, 0};
      for (std::size_t ci = contribs.size(); ci-- > 0;) {
        const Contribution& c = contribs[ci];
        const Splat2D& s = splats[c.slot];
        SplatGrad& g = sg[c.slot];
        g.touched = true;
        const double aT = c.alpha * c.transmittance;
        g.dcolor[0] += gr * aT;
        g.dcolor[1] += gg * aT;
        g.dcolor[2] += gb * aT;
        const double inv_rem = 1.0 / (1.0 - c.alpha);
        double dalpha = gr * (s.color[0] * c.transmittance - suffix[0] * inv_rem) +
                        gg * (s.color[1] * c.transmittance - suffix[1] * inv_rem) +
                        gb * (s.color[2] * c.transmittance - suffix[2] * inv_rem);
        suffix[0] += s.color[0] * aT;
        suffix[1] += s.color[1] * aT;
        suffix[2] += s.color[2] * aT;
        if (c.alpha >= kAlphaClamp) continue;  // min() clamp: flat region
        g.dopacity += dalpha * (c.alpha / s.opacity);
        const double dpower = dalpha * c.alpha;
        const double dx = px - s.u, dy = py - s.v;
        const double adx = s.axx * dx + s.axy * dy;
        const double ady = s.axy * dx + s.ayy * dy;
        g.du += dpower * adx;
        g.dv += dpower * ady;
        g.dv00 += dpower * 0.5 * adx * adx;
        g.dv01 += dpower * 0.5 * adx * ady;
        g.dv11 += dpower * 0.5 * ady * ady;
      }
    }

  ad::Tensor* gpos = grads[0];
  ad::Tensor* gscl = grads[1];
  ad::Tensor* gqt = grads[2];
  ad::Tensor* gopa = grads[3];
  ad::Tensor* gcol = grads[4];

  for (std::size_t slot = 0; slot < splats.size(); ++slot) {
    const Splat2D& s = splats[slot];
    const SplatGrad& g = sg[slot];
    const std::uint32_t i = s.index;
    if (stats) {
      stats->visible[prims[i].parent_anchor] += 1;
      stats->grad_accum[prims[i].parent_anchor] += std::sqrt(g.du * g.du + g.dv * g.dv);
    }
    if (!g.touched) continue;

    if (gcol)
      for (int c = 0; c < 3; ++c) (*gcol)[i * 3 + c] += g.dcolor[c];
    if (gopa) (*gopa)[i] += g.dopacity;

    const GaussianPrimitive& p = prims[i];
    const CamSpace cs = camera_terms(p.position, cam);
    const double zc = cs.p[2];
    const Mat3 cov3 = build_covariance(p.quaternion, p.scale);

    // dM = 2 dV M cov3  (dV, cov3 symmetric)
    const double dvm[2][2] = {{g.dv00, g.dv01}, {g.dv01, g.dv11}};
    double dvM[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        dvM[r][c] = dvm[r][0] * cs.m[0][c] + dvm[r][1] * cs.m[1][c];
    double dM[2][3];
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 3; ++c)
        dM[r][c] = 2.0 * (dvM[r][0] * cov3[c] + dvM[r][1] * cov3[3 + c] +
                          dvM[r][2] * cov3[6 + c]);

    // dSigma = M^T dV M
    Mat3 dsig;
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        dsig[a * 3 + b] = cs.m[0][a] * dvM[0][b] + cs.m[1][a] * dvM[1][b];

    // Through Sigma = R diag(s^2) R^T.
    const Mat3 r = quat_to_rot(p.quaternion);
    Mat3 dr;
    for (int a = 0; a < 3; ++a)
      for (int k = 0; k < 3; ++k) {
        double gr_ak = 0.0;
        for (int b = 0; b < 3; ++b) gr_ak += dsig[a * 3 + b] * r[b * 3 + k];
        dr[a * 3 + k] = 2.0 * gr_ak * p.scale[k] * p.scale[k];
      }
    if (gscl)
      for (int k = 0; k < 3; ++k) {
        double rgr = 0.0;
        for (int a = 0; a < 3; ++a)
          for (int b = 0; b < 3; ++b) rgr += r[a * 3 + k] * dsig[a * 3 + b] * r[b * 3 + k];
        (*gscl)[i * 3 + k] += 2.0 * p.scale[k] * rgr;
      }
    if (gqt) {
      const Vec4 dq = rot_backward(p.quaternion, dr);
      for (int c = 0; c < 4; ++c) (*gqt)[i * 4 + c] += dq[c];
    }

    if (gpos) {
      // dJ = dM W^T, then J's dependence on the camera-space position.
      const Mat3& w = cam.rotation;
      double dj[2][3];
      for (int r2 = 0; r2 < 2; ++r2)
        for (int c = 0; c < 3; ++c)
          dj[r2][c] = dM[r2][0] * w[c * 3 + 0] + dM[r2][1] * w[c * 3 + 1] +
                      dM[r2][2] * w[c * 3 + 2];
      const double fx = cam.fx, fy = cam.fy;
      const double z2 = zc * zc, z3 = z2 * zc;
      Vec3 dpc{0, 0, 0};
      dpc[0] += dj[0][2] * (-fx / z2);
      dpc[1] += dj[1][2] * (-fy / z2);
      dpc[2] += dj[0][0] * (-fx / z2) + dj[0][2] * (2.0 * fx * cs.p[0] / z3) +
                dj[1][1] * (-fy / z2) + dj[1][2] * (2.0 * fy * cs.p[1] / z3);
      // Projected center.
      dpc[0] += g.du * fx / zc;
      dpc[2] += g.du * (-fx * cs.p[0] / z2);
      dpc[1] += g.dv * fy / zc;
      dpc[2] += g.dv * (-fy * cs.p[1] / z2);
      const Vec3 dworld = matTvec(cam.rotation, dpc);
      for (int c = 0; c < 3; ++c) (*gpos)[i * 3 + c] += dworld[c];
    }
  }
}

}  // namespace

ad::Value rasterize(ad::Graph& g, ad::Value positions, ad::Value scales, ad::Value quats,
                    ad::Value opacities, ad::Value colors, const CameraFrame& cam,
                    RenderMode mode, DensifyStats* stats) {
  const ad::Tensor& pos = positions.data();
  if (pos.rank() != 3 || pos.dim(2) != 3)
    throw ad::ShapeError("rasterize: positions must be {N,K,3}, got " + pos.shape_str());
  const std::size_t n = pos.dim(0), k = pos.dim(1);
  const std::size_t n_prims = n * k;
  std::vector<GaussianPrimitive> prims(n_prims);
  const ad::Tensor& scl = scales.data();
  const ad::Tensor& qt = quats.data();
  const ad::Tensor& opa = opacities.data();
  const ad::Tensor& col = colors.data();
  auto expect = [&](const ad::Tensor& t, std::vector<std::size_t> shape, const char* what) {
    if (t.shape() != shape)
      throw ad::ShapeError(std::string("rasterize: ") + what + " " + t.shape_str() +
                           " does not match positions " + pos.shape_str());
  };
  expect(scl, {n, k, 3}, "scales");
  expect(qt, {n, k, 4}, "quats");
  expect(opa, {n, k}, "opacities");
  expect(col, {n, k, 3}, "colors");
  for (std::size_t i = 0; i < n_prims; ++i) {
    GaussianPrimitive& p = prims[i];
    for (int c = 0; c < 3; ++c) {
      p.position[c] = pos[i * 3 + c];
      p.scale[c] = scl[i * 3 + c];
      p.color[c] = col[i * 3 + c];
    }
    for (int c = 0; c < 4; ++c) p.quaternion[c] = qt[i * 4 + c];
    p.opacity = opa[i];
    p.parent_anchor = static_cast<std::uint32_t>(i / k);
    p.parent_offset = static_cast<std::uint32_t>(i % k);
  }
  const Image img = render_image(prims, cam, mode);
  ad::Tensor out({cam.height, cam.width, 3});
  std::copy(img.px.begin(), img.px.end(), out.data());

  auto backward = [cam, mode, stats](const ad::Tensor& og,
                                     std::span<const ad::Tensor* const> in,
                                     std::span<ad::Tensor* const> grads) {
    raster_backward(og, *in[0], *in[1], *in[2], *in[3], *in[4], cam, mode, stats, grads);
  };
  return g.custom("rasterize", {positions, scales, quats, opacities, colors}, std::move(out),
                  std::move(backward));
}

}  // namespace edgs
