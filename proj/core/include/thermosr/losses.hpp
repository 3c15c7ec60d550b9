#pragma once

#include "thermosr/autodiff.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/tensor.hpp"
#include "thermosr/tokens.hpp"

namespace thermosr {

// Weights of the combined objective: L = L_CE + lambda1 * L_MSE +
// lambda2 * L_TOC, with thermal-order patches of size toc_patch.
struct LossWeights {
    double lambda1 = 0.2;
    double lambda2 = 0.8;
    int toc_patch = 8;
};

// Mean negative log-likelihood in nats over every token of every scale.
double ce_loss(const LogitsPyramid& logits, const TokenMap& targets);

// Mean squared pixel difference.
double mse_loss(const Image& sr, const Image& hr);

// Mean of each non-overlapping p x p block as a [H/p, W/p] grid. A bottom or
// right remainder is cropped with a warning.
Tensor patch_means(const Image& img, int p);
Tensor patch_means(const Tensor& hw, int p);  // [H,W] tensor variant

// Thermal order consistency: with S, H the patch-mean grids of sr and hr,
// averages relu(-(S(i)-S(j)) * (H(i)-H(j))) over all horizontally and
// vertically adjacent pairs, each counted once (right and down neighbors).
// Returns 0 with a warning when no adjacent pair exists.
double toc_loss(const Image& sr, const Image& hr, int p);
double toc_loss_grids(const Tensor& s_grid, const Tensor& h_grid);

// d toc_loss / d sr, same layout as sr. Computed through the tape, i.e. it
// is exactly the gradient training uses.
Tensor toc_loss_grad_sr(const Image& sr, const Image& hr, int p);

// L_CE + lambda1 * L_MSE + lambda2 * L_TOC.
double total_loss(double ce, double mse, double toc, const LossWeights& w);

// Differentiable variants used by the training loop. sr is a [1,H,W]
// variable; hr is ground truth.
ad::Var mse_loss_ad(const ad::Var& sr_chw, const Tensor& hr_chw);
ad::Var toc_loss_ad(const ad::Var& sr_chw, const Tensor& hr_chw, int p);

}  // namespace thermosr
