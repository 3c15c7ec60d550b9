#pragma once

#include <cstdint>
#include <vector>

#include "thermosr/autodiff.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"
#include "thermosr/tokens.hpp"

namespace thermosr {

// Multi-scale residual vector quantization with a condition-adaptive
// codebook: the embedding table can be modulated per image by a low-rank
// update driven by the guidance condition vector.

struct QuantizerConfig {
    int codebook_size = 256;  // K
    int code_dim = 32;        // d
    int cond_rank = 8;        // r
    int vq_width = 64;        // hidden channels of the VQ-VAE encoder/decoder
    std::vector<int> scales = {1, 2, 4, 8};  // square token grids, coarse to fine

    // Throws config_error: K >= 2, 1 <= r <= d, positive width, strictly
    // increasing non-empty scale list.
    void validate() const;
};

struct Codebook {
    ad::Var z;      // [K,d] embedding table
    ad::Var u;      // [K,r] per-code modulation bases
    ad::Var v;      // [d,r] shared direction matrix
    ad::Var alpha;  // [1]  perturbation gate, tanh-squashed

    int size() const { return z->value.shape[0]; }
    int dim() const { return z->value.shape[1]; }
    int rank() const { return u->value.shape[1]; }
    void validate() const;
};

// Projects globally pooled guidance tokens to the modulation rank.
struct CondProj {
    ad::Var w;  // [c_in, r]
    ad::Var b;  // [r]
};

struct VqEncoderParams {
    ad::Var w1, b1;  // [C,1,4,4]
    ad::Var w2, b2;  // [C,C,4,4]
    ad::Var w3, b3;  // [d,C,4,4]
};

struct VqDecoderParams {
    ad::Var w1, b1;  // [d,C,4,4] (transposed-conv layout: in,out,kh,kw)
    ad::Var w2, b2;  // [C,C,4,4]
    ad::Var w3, b3;  // [C,1,4,4]
};

struct VqVae {
    VqEncoderParams enc;
    VqDecoderParams dec;
    Codebook cb;
};

VqVae init_vqvae(const QuantizerConfig& cfg, Rng& rng);
CondProj init_cond_proj(int in_dim, int rank, Rng& rng);

// Counts every condition-adaptive table construction since the last reset;
// stays at zero when quantization runs with use_cac=false, which the
// ablation harness asserts.
std::uint64_t cac_modulation_count();
void reset_cac_modulation_count();

// Mean-pool token rows [n,c] and project to the modulation rank -> [r].
ad::Var condition_vector(const ad::Var& tokens_nc, const CondProj& proj);

// Z'[i] = Z[i] + tanh(alpha) * ((U_i elementwise cond) V^T) -> [d].
Tensor modulated_embedding(const Codebook& cb, int index, const Tensor& cond);

// Whole modulated table [K,d]; table-at-once form of modulated_embedding.
Tensor modulated_table(const Codebook& cb, const Tensor& cond);

// Differentiable table: gradients reach z, u, v, alpha, and cond.
ad::Var modulated_table_ad(const Codebook& cb, const ad::Var& cond);

// Index of the closest code (smallest index wins ties). `table` rows are the
// effective embeddings; the convenience overload builds the table from the
// codebook, modulated when use_cac is set.
int nearest_code_in_table(const Tensor& table, const double* vec);
int nearest_code(const Codebook& cb, const Tensor& cond, const Tensor& vec, bool use_cac);

// Residual pyramid over f [d,H,W]: at each scale quantize the area-averaged
// residual, then add the block-replicated embeddings back. Replication (not
// smooth interpolation) plus the zero code row makes every stage of the
// recurrence non-increasing in reconstruction error. Scale grids must divide
// the latent size; the last scale must equal it.
TokenMap encode_multiscale(const Tensor& f, const Codebook& cb, const Tensor& cond,
                           const std::vector<int>& scales, bool use_cac);

// Sum of upsampled (modulated) embeddings across scales: the f_hat the
// recurrence converges to. The _ad form keeps gradients into the codebook
// (and cond when given). num_scales < 0 means all; a smaller count
// reconstructs the accumulator state after that many stages, still at the
// full grid size.
Tensor reconstruct_tokens(const TokenMap& tm, const Codebook& cb, const Tensor& cond,
                          bool use_cac, int num_scales = -1);
ad::Var reconstruct_tokens_ad(const TokenMap& tm, const Codebook& cb, const ad::Var& cond,
                              bool use_cac, int num_scales = -1);

// [1,H,W] -> [d,H/8,W/8]
ad::Var vq_encode(const ad::Var& img_chw, const VqEncoderParams& p);
// [d,h,w] -> [1,8h,8w], sigmoid output in (0,1)
ad::Var vq_decode(const ad::Var& f, const VqDecoderParams& p);

// Tokens -> feature pyramid sum -> decoder; the plain-image path used at
// inference time.
Image decode_multiscale(const TokenMap& tm, const Codebook& cb, const Tensor& cond,
                        const VqDecoderParams& dec, bool use_cac);

}  // namespace thermosr
