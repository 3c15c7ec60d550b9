#pragma once

#include <cstdint>
#include <vector>

#include "thermosr/autodiff.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"
#include "thermosr/tokens.hpp"

namespace thermosr {

// Next-scale autoregressive transformer. The token sequence is laid out as
// [guidance prefix | scale 1 | scale 2 | ...]; attention uses a block-
// triangular mask so every position sees the prefix, all strictly coarser
// scales, and its own scale (within-scale attention is bidirectional because
// a whole scale is emitted jointly).
struct BackboneConfig {
    int layers = 4;
    int width = 128;
    int heads = 4;
    std::vector<int> scales = {1, 2, 4, 8};
    int vocab = 256;     // codebook size of the quantizer
    int cond_dim = 64;   // feature dim of the guidance tokens
    double dropout = 0.0;

    // Throws config_error. Scales must be strictly increasing and each must
    // divide the next: the input of scale k+1 is the block-replicated
    // embedding grid of scale k's tokens.
    void validate() const;
};

struct AttentionBlockParams {
    ad::Var ln1_g, ln1_b;
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Var ln2_g, ln2_b;
    ad::Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct BackboneParams {
    ad::Var in_proj_w, in_proj_b;  // guidance tokens [nq,cond_dim] -> [nq,width]
    ad::Var prefix_pos;            // [nq,width]
    ad::Var tok_emb;               // [vocab,width], input embedding of the previous scale
    ad::Var start_emb;             // [1,width], sole input of the first scale
    ad::Var scale_emb;             // [num_scales,width]
    std::vector<ad::Var> pos_emb;  // per scale [s*s,width]
    std::vector<AttentionBlockParams> blocks;
    ad::Var final_g, final_b;
    ad::Var head_w, head_b;  // [width,vocab],[vocab]; zero at init so logits start uniform

    int prefix_len() const { return prefix_pos ? prefix_pos->value.shape[0] : 0; }
};

// prefix_len is the number of guidance tokens the model conditions on (fixed
// per configuration since the positional table is learned).
BackboneParams init_backbone(const BackboneConfig& cfg, int prefix_len, Rng& rng);

// Teacher-forced forward pass: per-scale logits [s_k*s_k, vocab]. Logits of
// scale k depend only on f_tsg and tokens of scales < k. Gradients reach the
// parameters and f_tsg. dropout_rng enables dropout when cfg.dropout > 0.
std::vector<ad::Var> forward_teacher_forced_ad(const TokenMap& tm, const ad::Var& f_tsg,
                                               const BackboneConfig& cfg, const BackboneParams& p,
                                               Rng* dropout_rng = nullptr);
LogitsPyramid forward_teacher_forced(const TokenMap& tm, const Tensor& f_tsg,
                                     const BackboneConfig& cfg, const BackboneParams& p);

struct SamplerConfig {
    enum class Kind { argmax, topk };
    Kind kind = Kind::argmax;
    int top_k = 1;             // used by topk
    double temperature = 1.0;  // used by topk, must be > 0

    void validate(int vocab) const;  // throws config_error
};

// Scale-by-scale generation. argmax is deterministic; topk is deterministic
// given the seed. Ties pick the lowest index.
TokenMap generate(const Tensor& f_tsg, const BackboneConfig& cfg, const BackboneParams& p,
                  const SamplerConfig& sampler, std::uint64_t seed);

}  // namespace thermosr
