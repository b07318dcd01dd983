#include <array>
#include <cmath>
#include <vector>

#include "edgs/loss.hpp"

namespace edgs {

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWin> gaussian_window() {
  std::array<double, kWin> w{};
  double sum = 0.0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - (kWin - 1) / 2.0;
    w[i] = std::exp(-d * d / (2.0 * kSigma * kSigma));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Zero-padded separable "same" convolution of one channel plane. The kernel
// is symmetric, so this is its own adjoint.
std::vector<double> blur(const std::vector<double>& src, std::size_t w, std::size_t h) {
  static const std::array<double, kWin> win = gaussian_window();
  const int r = kWin / 2;
  std::vector<double> tmp(w * h, 0.0), out(w * h, 0.0);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const long xx = static_cast<long>(x) + k;
        if (xx < 0 || xx >= static_cast<long>(w)) continue;
        acc += win[k + r] * src[y * w + xx];
      }
      tmp[y * w + x] = acc;
    }
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int k = -r; k <= r; ++k) {
        const long yy = static_cast<long>(y) + k;
        if (yy < 0 || yy >= static_cast<long>(h)) continue;
        acc += win[k + r] * tmp[yy * w + x];
      }
      out[y * w + x] = acc;
    }
  return out;
}

std::vector<double> channel(const double* px, std::size_t n_pixels, int c) {
  std::vector<double> out(n_pixels);
  for (std::size_t i = 0; i < n_pixels; ++i) out[i] = px[i * 3 + c];
  return out;
}

struct SsimMaps {
  std::vector<double> m1, m2, s1, s2, s12, value;
};

SsimMaps ssim_channel(const std::vector<double>& x, const std::vector<double>& y,
                      std::size_t w, std::size_t h) {
  const std::size_t n = w * h;
  SsimMaps maps;
  maps.m1 = blur(x, w, h);
  maps.m2 = blur(y, w, h);
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  maps.s1 = blur(xx, w, h);
  maps.s2 = blur(yy, w, h);
  maps.s12 = blur(xy, w, h);
  maps.value.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    maps.s1[i] -= maps.m1[i] * maps.m1[i];
    maps.s2[i] -= maps.m2[i] * maps.m2[i];
    maps.s12[i] -= maps.m1[i] * maps.m2[i];
    const double a1 = 2.0 * maps.m1[i] * maps.m2[i] + kC1;
    const double a2 = 2.0 * maps.s12[i] + kC2;
    const double b1 = maps.m1[i] * maps.m1[i] + maps.m2[i] * maps.m2[i] + kC1;
    const double b2 = maps.s1[i] + maps.s2[i] + kC2;
    maps.value[i] = (a1 * a2) / (b1 * b2);
  }
  return maps;
}

// Accumulates d(mean ssim)/dx into gx (and symmetrically into gy when given),
// with `scale` the upstream gradient divided by pixel*channel count.
void ssim_channel_backward(const std::vector<double>& x, const std::vector<double>& y,
                           const SsimMaps& maps, std::size_t w, std::size_t h, double scale,
                           std::vector<double>* gx, std::vector<double>* gy) {
  const std::size_t n = w * h;
  std::vector<double> p_m1(n), p_m2(n), p_s1(n), p_s2(n), p_s12(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double m1 = maps.m1[i], m2 = maps.m2[i];
    const double a1 = 2.0 * m1 * m2 + kC1;
    const double a2 = 2.0 * maps.s12[i] + kC2;
    const double b1 = m1 * m1 + m2 * m2 + kC1;
    const double b2 = maps.s1[i] + maps.s2[i] + kC2;
    const double d_a1 = scale * a2 / (b1 * b2);
    const double d_a2 = scale * a1 / (b1 * b2);
    const double d_b1 = -scale * a1 * a2 / (b1 * b1 * b2);
    const double d_b2 = -scale * a1 * a2 / (b1 * b2 * b2);
    p_m1[i] = 2.0 * m2 * d_a1 + 2.0 * m1 * d_b1;
    p_m2[i] = 2.0 * m1 * d_a1 + 2.0 * m2 * d_b1;
    p_s1[i] = d_b2;
    p_s2[i] = d_b2;
    p_s12[i] = 2.0 * d_a2;
  }
  // Variance/covariance maps were formed as blur(prod) - mu terms; push the
  // mu dependence back into the mean gradients before the adjoint blurs.
  for (std::size_t i = 0; i < n; ++i) {
    p_m1[i] += -2.0 * maps.m1[i] * p_s1[i] - maps.m2[i] * p_s12[i];
    p_m2[i] += -2.0 * maps.m2[i] * p_s2[i] - maps.m1[i] * p_s12[i];
  }
  const std::vector<double> bm1 = blur(p_m1, w, h);
  const std::vector<double> bs1 = blur(p_s1, w, h);
  const std::vector<double> bs12 = blur(p_s12, w, h);
  if (gx)
    for (std::size_t i = 0; i < n; ++i)
      (*gx)[i] += bm1[i] + 2.0 * x[i] * bs1[i] + y[i] * bs12[i];
  if (gy) {
    const std::vector<double> bm2 = blur(p_m2, w, h);
    const std::vector<double> bs2 = blur(p_s2, w, h);
    for (std::size_t i = 0; i < n; ++i)
      (*gy)[i] += bm2[i] + 2.0 * y[i] * bs2[i] + x[i] * bs12[i];
  }
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw ad::ShapeError("ssim: image size mismatch");
  const std::size_t n = a.width * a.height;
  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const SsimMaps maps =
        ssim_channel(channel(a.px.data(), n, c), channel(b.px.data(), n, c), a.width, a.height);
    for (double v : maps.value) total += v;
  }
  return total / static_cast<double>(3 * n);
}

ad::Value ssim_op(ad::Graph& g, ad::Value img, ad::Value ref) {
  const ad::Tensor& a = img.data();
  const ad::Tensor& b = ref.data();
  if (!a.same_shape(b) || a.rank() != 3 || a.dim(2) != 3)
    throw ad::ShapeError("ssim: expected matching {H,W,3} images, got " + a.shape_str() +
                         " and " + b.shape_str());
  const std::size_t h = a.dim(0), w = a.dim(1), n = w * h;

  double total = 0.0;
  for (int c = 0; c < 3; ++c) {
    const SsimMaps maps = ssim_channel(channel(a.data(), n, c), channel(b.data(), n, c), w, h);
    for (double v : maps.value) total += v;
  }
  ad::Tensor out = ad::Tensor::scalar(total / static_cast<double>(3 * n));

  auto backward = [w, h, n](const ad::Tensor& og, std::span<const ad::Tensor* const> in,
                            std::span<ad::Tensor* const> grads) {
    if (!grads[0] && !grads[1]) return;
    const double scale = og[0] / static_cast<double>(3 * n);
    for (int c = 0; c < 3; ++c) {
      const std::vector<double> x = channel(in[0]->data(), n, c);
      const std::vector<double> y = channel(in[1]->data(), n, c);
      const SsimMaps maps = ssim_channel(x, y, w, h);
      std::vector<double> gx(n, 0.0), gy(n, 0.0);
      ssim_channel_backward(x, y, maps, w, h, scale, grads[0] ? &gx : nullptr,
                            grads[1] ? &gy : nullptr);
      if (grads[0])
        for (std::size_t i = 0; i < n; ++i) (*grads[0])[i * 3 + c] += gx[i];
      if (grads[1])
        for (std::size_t i = 0; i < n; ++i) (*grads[1])[i * 3 + c] += gy[i];
    }
  };
  return g.custom("ssim", {img, ref}, std::move(out), std::move(backward));
}

}  // namespace edgs
