#include <cmath>
#include <limits>

#include "edgs/loss.hpp"

namespace edgs {

double psnr(const Image& a, const Image& b) {
  if (a.width != b.width || a.height != b.height)
    throw ad::ShapeError("psnr: image size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.px.size(); ++i) {
    const double d = a.px[i] - b.px[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.px.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

LossParts total_loss(ad::Graph& g, ad::Value image, const Image& gt, ad::Value mask_probs,
                     double lambda, double lambda_t) {
  const ad::Tensor& img = image.data();
  if (img.rank() != 3 || img.dim(0) != gt.height || img.dim(1) != gt.width)
    throw ad::ShapeError("loss: image " + img.shape_str() + " does not match ground truth");
  ad::Tensor gt_t({gt.height, gt.width, 3},
                  std::vector<double>(gt.px.begin(), gt.px.end()));
  ad::Value ref = g.constant(std::move(gt_t));

  LossParts parts;
  parts.l1 = g.mean(g.abs(image - ref));
  parts.ssim = ssim_op(g, image, ref);
  ad::Value dssim = g.constant(ad::Tensor::scalar(1.0)) - parts.ssim;
  parts.total = g.scale(parts.l1, 1.0 - lambda) + g.scale(dssim, lambda);
  if (mask_probs.valid() && lambda_t != 0.0) {
    parts.mask_mean = g.mean(mask_probs);
    parts.total = parts.total + g.scale(parts.mask_mean, lambda_t);
  }
  return parts;
}

}  // namespace edgs
