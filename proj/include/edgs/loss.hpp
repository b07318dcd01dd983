#pragma once

#include "edgs/geometry.hpp"
#include "edgs/graph.hpp"

namespace edgs {

/// Single-scale SSIM, 11x11 Gaussian window sigma 1.5, C1=0.01^2, C2=0.03^2,
/// zero-padded same convolution, averaged over pixels and channels.
double ssim(const Image& a, const Image& b);

/// Differentiable SSIM node: image Values shaped {H,W,3} -> scalar.
ad::Value ssim_op(ad::Graph& g, ad::Value img, ad::Value ref);

struct LossParts {
  ad::Value total;
  ad::Value l1;         // mean absolute error
  ad::Value ssim;       // similarity in [-1,1]
  ad::Value mask_mean;  // invalid when no mask term
};

/// L = (1-lambda) L1 + lambda (1 - SSIM) + lambda_t mean(mask_probs).
/// Pass an invalid mask_probs Value (or lambda_t 0) to drop the mask term.
LossParts total_loss(ad::Graph& g, ad::Value image, const Image& gt, ad::Value mask_probs,
                     double lambda, double lambda_t);

}  // namespace edgs
