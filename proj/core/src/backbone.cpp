#include "thermosr/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace thermosr {

void BackboneConfig::validate() const {
    if (layers < 1) throw config_error("backbone: layers must be positive");
    if (width < 1 || heads < 1) throw config_error("backbone: width and heads must be positive");
    if (width % heads != 0) throw config_error("backbone: width must be divisible by heads");
    if (vocab < 2) throw config_error("backbone: vocab must be at least 2");
    if (cond_dim < 1) throw config_error("backbone: cond_dim must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0))
        throw config_error("backbone: dropout must be in [0,1)");
    if (scales.empty()) throw config_error("backbone: scales must not be empty");
    for (std::size_t k = 0; k < scales.size(); ++k) {
        if (scales[k] < 1) throw config_error("backbone: scales must be positive");
        if (k > 0) {
            if (scales[k] <= scales[k - 1])
                throw config_error("backbone: scales must be strictly increasing");
            if (scales[k] % scales[k - 1] != 0)
                throw config_error(
                    "backbone: each scale must divide the next (the next-scale input is a "
                    "block-replicated embedding grid)");
        }
    }
}

void SamplerConfig::validate(int vocab) const {
    if (kind == Kind::topk) {
        if (top_k < 1 || top_k > vocab)
            throw config_error("sampler: top_k must be in [1, vocab]");
        if (!(temperature > 0.0)) throw config_error("sampler: temperature must be positive");
    }
}

namespace {

Tensor normal_tensor(std::vector<int> shape, double stddev, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal(0.0, stddev);
    return t;
}

// Row r of a 2-D table as a flat [width] vector.
ad::Var row_of(const ad::Var& table, int r) {
    return ad::reshape(ad::slice_rows(table, r, r + 1), {table->value.shape[1]});
}

void check_params(const BackboneConfig& cfg, const BackboneParams& p) {
    const int w = cfg.width;
    const bool ok = p.in_proj_w && p.in_proj_w->value.shape == std::vector<int>({cfg.cond_dim, w}) &&
                    p.tok_emb && p.tok_emb->value.shape == std::vector<int>({cfg.vocab, w}) &&
                    p.scale_emb &&
                    p.scale_emb->value.shape ==
                        std::vector<int>({static_cast<int>(cfg.scales.size()), w}) &&
                    p.pos_emb.size() == cfg.scales.size() &&
                    p.blocks.size() == static_cast<std::size_t>(cfg.layers) && p.head_w &&
                    p.head_w->value.shape == std::vector<int>({w, cfg.vocab});
    if (!ok) throw validation_error("backbone: parameters do not match the configuration");
}

void check_cond(const BackboneConfig& cfg, const BackboneParams& p, const Tensor& f_tsg) {
    if (f_tsg.ndim() != 2 || f_tsg.shape[1] != cfg.cond_dim)
        throw validation_error("backbone: guidance tokens must be [n, cond_dim]");
    if (f_tsg.shape[0] != p.prefix_len())
        throw validation_error(
            "backbone: guidance token count does not match the learned prefix length");
}

// Input embeddings for the prefix plus the first num_blocks scale blocks.
// Block 0 is the start embedding; block k >= 1 is the block-replicated
// embedding grid of scale k-1's tokens. Replication (rather than smooth
// interpolation) keeps the map token->input row a pure permutation carrier,
// which the within-scale permutation property relies on.
ad::Var seq_embed(const std::vector<std::vector<int>>& toks, int num_blocks, const ad::Var& f_tsg,
                  const BackboneConfig& cfg, const BackboneParams& p) {
    const int w = cfg.width;
    std::vector<ad::Var> parts;
    parts.push_back(
        ad::add(ad::add_rowvec(ad::matmul(f_tsg, p.in_proj_w), p.in_proj_b), p.prefix_pos));
    for (int k = 0; k < num_blocks; ++k) {
        const int s = cfg.scales[static_cast<std::size_t>(k)];
        const int n = s * s;
        ad::Var x;
        if (k == 0) {
            x = n == 1 ? p.start_emb
                       : ad::matmul(ad::constant(Tensor({n, 1}, 1.0)), p.start_emb);
        } else {
            const int sp = cfg.scales[static_cast<std::size_t>(k - 1)];
            ad::Var emb = ad::embedding_rows(p.tok_emb, toks[static_cast<std::size_t>(k - 1)]);
            ad::Var grid = ad::reshape(ad::transpose2d(emb), {w, sp, sp});
            if (s != sp) grid = ad::nearest_up(grid, s, s);
            x = ad::transpose2d(ad::reshape(grid, {w, n}));
        }
        x = ad::add_rowvec(x, row_of(p.scale_emb, k));
        x = ad::add(x, p.pos_emb[static_cast<std::size_t>(k)]);
        parts.push_back(x);
    }
    return ad::concat_rows(parts);
}

// Additive attention mask for the laid-out sequence: position i may attend
// to position j iff block(j) <= block(i), with the prefix as block 0 and
// scale k as block k+1. Within-block attention is unrestricted.
Tensor block_mask(int prefix_len, const std::vector<int>& scales, int num_blocks) {
    std::vector<int> block_of(static_cast<std::size_t>(prefix_len), 0);
    for (int k = 0; k < num_blocks; ++k) {
        const int n = scales[static_cast<std::size_t>(k)] * scales[static_cast<std::size_t>(k)];
        block_of.insert(block_of.end(), static_cast<std::size_t>(n), k + 1);
    }
    const int t = static_cast<int>(block_of.size());
    Tensor m({t, t}, 0.0);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j)
            if (block_of[static_cast<std::size_t>(j)] > block_of[static_cast<std::size_t>(i)])
                m.at(i, j) = -1e30;
    return m;
}

ad::Var run_blocks(ad::Var x, const Tensor& mask, const BackboneConfig& cfg,
                   const BackboneParams& p, Rng* drop) {
    const int dh = cfg.width / cfg.heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
    for (const auto& b : p.blocks) {
        ad::Var xn = ad::layer_norm_rows(x, b.ln1_g, b.ln1_b);
        ad::Var q = ad::add_rowvec(ad::matmul(xn, b.wq), b.bq);
        ad::Var k = ad::add_rowvec(ad::matmul(xn, b.wk), b.bk);
        ad::Var v = ad::add_rowvec(ad::matmul(xn, b.wv), b.bv);
        std::vector<ad::Var> heads;
        heads.reserve(static_cast<std::size_t>(cfg.heads));
        for (int h = 0; h < cfg.heads; ++h) {
            ad::Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
            ad::Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
            ad::Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
            ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), sc), &mask);
            heads.push_back(ad::matmul(attn, vh));
        }
        ad::Var o = ad::add_rowvec(ad::matmul(ad::concat_cols(heads), b.wo), b.bo);
        if (drop && cfg.dropout > 0.0) o = ad::dropout(o, cfg.dropout, *drop);
        x = ad::add(x, o);
        ad::Var xm = ad::layer_norm_rows(x, b.ln2_g, b.ln2_b);
        ad::Var m = ad::add_rowvec(
            ad::matmul(ad::gelu(ad::add_rowvec(ad::matmul(xm, b.mlp_w1), b.mlp_b1)), b.mlp_w2),
            b.mlp_b2);
        if (drop && cfg.dropout > 0.0) m = ad::dropout(m, cfg.dropout, *drop);
        x = ad::add(x, m);
    }
    return x;
}

ad::Var sequence_logits(const std::vector<std::vector<int>>& toks, int num_blocks,
                        const ad::Var& f_tsg, const BackboneConfig& cfg, const BackboneParams& p,
                        Rng* drop) {
    const ad::Var seq = seq_embed(toks, num_blocks, f_tsg, cfg, p);
    const Tensor mask = block_mask(p.prefix_len(), cfg.scales, num_blocks);
    ad::Var y = run_blocks(seq, mask, cfg, p, drop);
    y = ad::layer_norm_rows(y, p.final_g, p.final_b);
    return ad::add_rowvec(ad::matmul(y, p.head_w), p.head_b);
}

int sample_row(const double* row, int vocab, const SamplerConfig& sampler, Rng& rng) {
    if (sampler.kind == SamplerConfig::Kind::argmax) {
        int best = 0;
        for (int i = 1; i < vocab; ++i)
            if (row[i] > row[best]) best = i;
        return best;
    }
    // Top-k: order by logit descending, index ascending on ties, then sample
    // the temperature softmax over the kept set.
    std::vector<int> idx(static_cast<std::size_t>(vocab));
    std::iota(idx.begin(), idx.end(), 0);
    const int kk = sampler.top_k;
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(),
                      [row](int a, int b) { return row[a] != row[b] ? row[a] > row[b] : a < b; });
    const double mx = row[idx[0]];
    std::vector<double> e(static_cast<std::size_t>(kk));
    double total = 0.0;
    for (int i = 0; i < kk; ++i) {
        e[static_cast<std::size_t>(i)] = std::exp((row[idx[static_cast<std::size_t>(i)]] - mx) /
                                                  sampler.temperature);
        total += e[static_cast<std::size_t>(i)];
    }
    const double u = rng.uniform() * total;
    double cum = 0.0;
    for (int i = 0; i < kk; ++i) {
        cum += e[static_cast<std::size_t>(i)];
        if (cum > u) return idx[static_cast<std::size_t>(i)];
    }
    return idx[static_cast<std::size_t>(kk - 1)];
}

}  // namespace

BackboneParams init_backbone(const BackboneConfig& cfg, int prefix_len, Rng& rng) {
    cfg.validate();
    if (prefix_len < 1) throw config_error("backbone: prefix length must be positive");
    const int w = cfg.width;
    const double stddev = 0.02;
    // Residual-branch output projections are damped with depth so the
    // initial forward pass stays well scaled regardless of layer count.
    const double res_stddev = stddev / std::sqrt(2.0 * cfg.layers);

    BackboneParams p;
    p.in_proj_w = ad::leaf(normal_tensor({cfg.cond_dim, w}, stddev, rng));
    p.in_proj_b = ad::leaf(Tensor({w}, 0.0));
    p.prefix_pos = ad::leaf(normal_tensor({prefix_len, w}, stddev, rng));
    p.tok_emb = ad::leaf(normal_tensor({cfg.vocab, w}, stddev, rng));
    p.start_emb = ad::leaf(normal_tensor({1, w}, stddev, rng));
    p.scale_emb = ad::leaf(normal_tensor({static_cast<int>(cfg.scales.size()), w}, stddev, rng));
    for (int s : cfg.scales)
        p.pos_emb.push_back(ad::leaf(normal_tensor({s * s, w}, stddev, rng)));
    for (int l = 0; l < cfg.layers; ++l) {
        AttentionBlockParams b;
        b.ln1_g = ad::leaf(Tensor({w}, 1.0));
        b.ln1_b = ad::leaf(Tensor({w}, 0.0));
        b.wq = ad::leaf(normal_tensor({w, w}, stddev, rng));
        b.bq = ad::leaf(Tensor({w}, 0.0));
        b.wk = ad::leaf(normal_tensor({w, w}, stddev, rng));
        b.bk = ad::leaf(Tensor({w}, 0.0));
        b.wv = ad::leaf(normal_tensor({w, w}, stddev, rng));
        b.bv = ad::leaf(Tensor({w}, 0.0));
        b.wo = ad::leaf(normal_tensor({w, w}, res_stddev, rng));
        b.bo = ad::leaf(Tensor({w}, 0.0));
        b.ln2_g = ad::leaf(Tensor({w}, 1.0));
        b.ln2_b = ad::leaf(Tensor({w}, 0.0));
        b.mlp_w1 = ad::leaf(normal_tensor({w, 4 * w}, stddev, rng));
        b.mlp_b1 = ad::leaf(Tensor({4 * w}, 0.0));
        b.mlp_w2 = ad::leaf(normal_tensor({4 * w, w}, res_stddev, rng));
        b.mlp_b2 = ad::leaf(Tensor({w}, 0.0));
        p.blocks.push_back(std::move(b));
    }
    p.final_g = ad::leaf(Tensor({w}, 1.0));
    p.final_b = ad::leaf(Tensor({w}, 0.0));
    // Zero head: every token starts with uniform logits, so the initial
    // cross entropy is exactly ln(vocab).
    p.head_w = ad::leaf(Tensor({w, cfg.vocab}, 0.0));
    p.head_b = ad::leaf(Tensor({cfg.vocab}, 0.0));
    return p;
}

std::vector<ad::Var> forward_teacher_forced_ad(const TokenMap& tm, const ad::Var& f_tsg,
                                               const BackboneConfig& cfg, const BackboneParams& p,
                                               Rng* dropout_rng) {
    cfg.validate();
    check_params(cfg, p);
    check_cond(cfg, p, f_tsg->value);
    tm.validate(cfg.vocab);
    if (tm.num_scales() != static_cast<int>(cfg.scales.size()))
        throw validation_error("backbone: token map scale count does not match the configuration");
    for (std::size_t k = 0; k < cfg.scales.size(); ++k)
        if (tm.scales[k].h != cfg.scales[k] || tm.scales[k].w != cfg.scales[k])
            throw validation_error("backbone: token map scales do not match the configuration");

    const int num_blocks = static_cast<int>(cfg.scales.size());
    const ad::Var logits = sequence_logits(tm.tokens, num_blocks, f_tsg, cfg, p, dropout_rng);
    std::vector<ad::Var> out;
    int off = p.prefix_len();
    for (int s : cfg.scales) {
        out.push_back(ad::slice_rows(logits, off, off + s * s));
        off += s * s;
    }
    return out;
}

LogitsPyramid forward_teacher_forced(const TokenMap& tm, const Tensor& f_tsg,
                                     const BackboneConfig& cfg, const BackboneParams& p) {
    const auto vars = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p);
    LogitsPyramid lp;
    for (const auto& v : vars) lp.per_scale.push_back(v->value);
    return lp;
}

TokenMap generate(const Tensor& f_tsg, const BackboneConfig& cfg, const BackboneParams& p,
                  const SamplerConfig& sampler, std::uint64_t seed) {
    cfg.validate();
    sampler.validate(cfg.vocab);
    check_params(cfg, p);
    check_cond(cfg, p, f_tsg);

    Rng rng(derive_seed(seed, "generate"));
    const ad::Var cond = ad::constant(f_tsg);
    TokenMap tm;
    for (std::size_t k = 0; k < cfg.scales.size(); ++k) {
        const int s = cfg.scales[k];
        const int n = s * s;
        const ad::Var logits = sequence_logits(tm.tokens, static_cast<int>(k) + 1, cond, cfg, p,
                                               nullptr);
        int off = p.prefix_len();
        for (std::size_t j = 0; j < k; ++j) off += cfg.scales[j] * cfg.scales[j];
        std::vector<int> toks(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const double* row =
                logits->value.data.data() + static_cast<std::size_t>(off + i) * cfg.vocab;
            toks[static_cast<std::size_t>(i)] = sample_row(row, cfg.vocab, sampler, rng);
        }
        tm.scales.push_back({s, s});
        tm.tokens.push_back(std::move(toks));
    }
    return tm;
}

}  // namespace thermosr
