#pragma once

#include <utility>
#include <vector>

#include "thermosr/autodiff.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr {

// Thermal-structural guidance: auxiliary heat/edge maps are built directly
// from the LR image, encoded, blended by a learned spatial gate, and injected
// into LR features through cross-attention.

struct GuidanceConfig {
    double heat_quantile = 0.7;      // tau: fraction of pixels treated as background
    double heat_smooth_sigma = 2.0;  // px
    int encoder_width = 32;          // feature channels C
    int attn_dim = 64;               // cross-attention width d
    int heads = 4;

    // Throws config_error on violated bounds (tau in (0,1), sigma > 0,
    // positive dims, heads dividing attn_dim).
    void validate() const;
};

// tau-quantile of the pixel multiset under the lower-interpolation rule:
// the smallest pixel value whose empirical CDF reaches tau.
double quantile_lower(const std::vector<double>& values, double tau);

// Normalized 1-D Gaussian taps at integer offsets -r..r with r = ceil(3*sigma).
Tensor gaussian_taps(double sigma);

// Soft top-quantile emphasis followed by Gaussian smoothing. Pixels at or
// below the tau-quantile go to 0, the maximum goes to 1, values between are
// scaled linearly; a constant image (max equal to the quantile) maps to all
// zeros. Output stays in [0,1].
Image heat_map(const Image& img, const GuidanceConfig& cfg);

// Sobel gradient magnitude with reflect padding, normalized by its maximum
// (all-zero input stays all-zero). Output in [0,1].
Image edge_map(const Image& img);

// Each stream's encoder is two 3x3 convolutions, stride 2 then stride 1,
// with a GELU between, taking 1 channel to C channels at half resolution.
struct EncoderParams {
    ad::Var w1, b1;  // [C,1,3,3], [C]
    ad::Var w2, b2;  // [C,C,3,3], [C]
};

struct GateParams {
    // local operator: depthwise 3x3 over the combined map A
    ad::Var dw_w, dw_b;  // [C,3,3], [C]
    // global operator: GAP -> two-layer perceptron -> per-channel broadcast
    ad::Var mlp_w1, mlp_b1;  // [C,C], [C]
    ad::Var mlp_w2, mlp_b2;  // [C,C], [C]
    // cross-attention projections (no output projection)
    ad::Var wq, wk, wv;  // [C,d] each
};

struct GuidanceParams {
    EncoderParams enc_heat, enc_edge, enc_lr;
    GateParams gate;
};

GuidanceParams init_guidance(const GuidanceConfig& cfg, Rng& rng);

// [1,H,W] -> [C,H/2,W/2]
ad::Var encode_features(const ad::Var& img_chw, const EncoderParams& p);
ad::Var encode_heat(const Image& hm, const EncoderParams& p);
ad::Var encode_edge(const Image& em, const EncoderParams& p);
ad::Var encode_lr(const Image& lr, const EncoderParams& p);

// Convex blend f_heat*w + f_edge*(1-w) with an externally supplied gate;
// used by fuse and by tests that pin the gate to a constant.
ad::Var fuse_with_gate(const ad::Var& f_heat, const ad::Var& f_edge, const ad::Var& w);

// Computes the gate W = sigmoid(local(A) + global(A)) over A = f_heat +
// f_edge and returns (fused, W).
std::pair<ad::Var, ad::Var> fuse(const ad::Var& f_heat, const ad::Var& f_edge,
                                 const GateParams& gate);

// Scaled dot-product attention over token matrices q [nq,d], k,v [nk,d];
// d is split across heads, each scaled by sqrt(d/heads). Returns [nq,d].
ad::Var attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads);

// Queries come from f_lr's tokens, keys/values from f_fused's tokens; the
// result is the guidance token matrix [nq, attn_dim] aligned with f_lr's
// spatial grid in row-major order.
ad::Var cross_attend(const ad::Var& f_lr, const ad::Var& f_fused, const GateParams& gate,
                     const GuidanceConfig& cfg);

// Full pipeline: heat/edge maps from the LR image, encode all three streams,
// fuse, cross-attend. Returns the guidance tokens [nq, attn_dim].
ad::Var guidance_tokens(const Image& lr, const GuidanceParams& params, const GuidanceConfig& cfg);

}  // namespace thermosr
