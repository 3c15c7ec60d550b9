#include "thermosr/quantizer.hpp"

#include <atomic>
#include <cmath>
#include <limits>

#include "thermosr/errors.hpp"

namespace thermosr {

namespace {

std::atomic<std::uint64_t> g_cac_count{0};

void check_scales(const std::vector<int>& scales) {
    if (scales.empty()) throw config_error("quantizer: scale list must not be empty");
    int prev = 0;
    for (int s : scales) {
        if (s <= prev) throw config_error("quantizer: scale list must be strictly increasing");
        prev = s;
    }
}

}  // namespace

void QuantizerConfig::validate() const {
    if (codebook_size < 2) throw config_error("quantizer: codebook_size must be >= 2");
    if (code_dim < 1) throw config_error("quantizer: code_dim must be positive");
    if (cond_rank < 1 || cond_rank > code_dim)
        throw config_error("quantizer: cond_rank must lie in [1, code_dim]");
    if (vq_width < 1) throw config_error("quantizer: vq_width must be positive");
    check_scales(scales);
}

void Codebook::validate() const {
    if (!z || !u || !v || !alpha) throw validation_error("codebook: missing parameter arrays");
    if (z->value.ndim() != 2 || u->value.ndim() != 2 || v->value.ndim() != 2)
        throw validation_error("codebook: z, u, v must be matrices");
    const int k = z->value.shape[0], d = z->value.shape[1], r = u->value.shape[1];
    if (k < 2) throw validation_error("codebook: need at least two codes");
    if (u->value.shape[0] != k) throw validation_error("codebook: u must have one row per code");
    if (v->value.shape[0] != d || v->value.shape[1] != r)
        throw validation_error("codebook: v must be [dim, rank]");
    if (r > d) throw validation_error("codebook: rank must not exceed the code dimension");
    if (alpha->value.numel() != 1) throw validation_error("codebook: alpha must be a scalar");
    if (!z->value.all_finite() || !u->value.all_finite() || !v->value.all_finite() ||
        !alpha->value.all_finite())
        throw validation_error("codebook: non-finite parameters");
}

std::uint64_t cac_modulation_count() { return g_cac_count.load(); }
void reset_cac_modulation_count() { g_cac_count.store(0); }

ad::Var condition_vector(const ad::Var& tokens_nc, const CondProj& proj) {
    if (tokens_nc->value.ndim() != 2)
        throw validation_error("condition_vector: expected a token matrix");
    const int n = tokens_nc->value.shape[0];
    const int r = proj.b->value.shape[0];
    const ad::Var pooled =
        ad::matmul(ad::constant(Tensor({1, n}, 1.0 / n)), tokens_nc);  // [1,c]
    const ad::Var out = ad::add_rowvec(ad::matmul(pooled, proj.w), proj.b);
    return ad::reshape(out, {r});
}

Tensor modulated_embedding(const Codebook& cb, int index, const Tensor& cond) {
    cb.validate();
    const int k = cb.size(), d = cb.dim(), r = cb.rank();
    if (index < 0 || index >= k) throw validation_error("modulated_embedding: index out of range");
    if (cond.numel() != r)
        throw validation_error("modulated_embedding: condition vector has the wrong rank");
    g_cac_count.fetch_add(1);
    const double g = std::tanh(cb.alpha->value.data[0]);
    Tensor out({d});
    for (int c = 0; c < d; ++c) {
        double acc = 0.0;
        for (int j = 0; j < r; ++j)
            acc += cb.u->value.at(index, j) * cond.data[static_cast<std::size_t>(j)] *
                   cb.v->value.at(c, j);
        out.data[static_cast<std::size_t>(c)] = cb.z->value.at(index, c) + g * acc;
    }
    return out;
}

Tensor modulated_table(const Codebook& cb, const Tensor& cond) {
    cb.validate();
    const int k = cb.size(), d = cb.dim(), r = cb.rank();
    if (cond.numel() != r)
        throw validation_error("modulated_table: condition vector has the wrong rank");
    g_cac_count.fetch_add(1);
    const double g = std::tanh(cb.alpha->value.data[0]);
    Tensor out({k, d});
    for (int i = 0; i < k; ++i)
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int j = 0; j < r; ++j)
                acc += cb.u->value.at(i, j) * cond.data[static_cast<std::size_t>(j)] *
                       cb.v->value.at(c, j);
            out.at(i, c) = cb.z->value.at(i, c) + g * acc;
        }
    return out;
}

ad::Var modulated_table_ad(const Codebook& cb, const ad::Var& cond) {
    cb.validate();
    const int k = cb.size(), r = cb.rank();
    if (cond->value.numel() != r)
        throw validation_error("modulated_table_ad: condition vector has the wrong rank");
    g_cac_count.fetch_add(1);
    const ad::Var hrow = ad::reshape(cond, {1, r});
    const ad::Var spread = ad::matmul(ad::constant(Tensor({k, 1}, 1.0)), hrow);  // [K,r]
    const ad::Var gated = ad::mul(cb.u, spread);
    const ad::Var update = ad::matmul_nt(gated, cb.v);  // [K,d]
    return ad::add(cb.z, ad::scale_by(update, ad::tanh_op(cb.alpha)));
}

int nearest_code_in_table(const Tensor& table, const double* vec) {
    const int k = table.shape[0], d = table.shape[1];
    int best = 0;
    double best_dist = std::numeric_limits<double>::infinity();
    for (int i = 0; i < k; ++i) {
        double dist = 0.0;
        const double* row = table.data.data() + static_cast<std::size_t>(i) * d;
        for (int c = 0; c < d; ++c) {
            const double diff = vec[c] - row[c];
            dist += diff * diff;
        }
        if (dist < best_dist) {  // strict: earliest index wins ties
            best_dist = dist;
            best = i;
        }
    }
    return best;
}

int nearest_code(const Codebook& cb, const Tensor& cond, const Tensor& vec, bool use_cac) {
    cb.validate();
    if (vec.numel() != cb.dim())
        throw validation_error("nearest_code: query vector has the wrong dimension");
    const Tensor table = use_cac ? modulated_table(cb, cond) : cb.z->value;
    return nearest_code_in_table(table, vec.data.data());
}

namespace {

// Exact block-mean downsample of [d,H,W] to [d,s,s]; H and W must be
// multiples of s.
Tensor block_mean(const Tensor& f, int s) {
    const int d = f.shape[0], h = f.shape[1], w = f.shape[2];
    if (h % s != 0 || w % s != 0)
        throw validation_error("quantizer: scale must divide the latent grid size");
    const int fy = h / s, fx = w / s;
    const double inv = 1.0 / (static_cast<double>(fy) * fx);
    Tensor out({d, s, s});
    for (int c = 0; c < d; ++c)
        for (int i = 0; i < s; ++i)
            for (int j = 0; j < s; ++j) {
                double acc = 0.0;
                for (int u = 0; u < fy; ++u)
                    for (int v = 0; v < fx; ++v) acc += f.at(c, i * fy + u, j * fx + v);
                out.at(c, i, j) = acc * inv;
            }
    return out;
}

// Tokens of one scale -> upsampled embedding grid [d,H,W], built from the
// same ops the differentiable path uses so both agree to the bit.
// Upsampling is exact block replication: together with block-mean
// downsampling and the zero row of the codebook it makes each stage of the
// residual recurrence non-increasing in reconstruction error (per block,
// the chosen code is at least as close to the block mean as the zero code,
// and replication keeps blocks independent). Smooth interpolation does not
// have that guarantee.
ad::Var scale_contribution(const ad::Var& table, const std::vector<int>& tokens, int s, int h,
                           int w) {
    const int d = table->value.shape[1];
    ad::Var emb = ad::embedding_rows(table, tokens);             // [s*s, d]
    emb = ad::reshape(ad::transpose2d(emb), {d, s, s});          // [d,s,s]
    return s == h && s == w ? emb : ad::nearest_up(emb, h, w);   // [d,h,w]
}

}  // namespace

TokenMap encode_multiscale(const Tensor& f, const Codebook& cb, const Tensor& cond,
                           const std::vector<int>& scales, bool use_cac) {
    cb.validate();
    check_scales(scales);
    if (f.ndim() != 3 || f.shape[0] != cb.dim())
        throw validation_error("encode_multiscale: feature map must be [code_dim, H, W]");
    const int h = f.shape[1], w = f.shape[2];
    if (h != w || h != scales.back())
        throw validation_error("encode_multiscale: final scale must equal the latent grid size");

    const Tensor table = use_cac ? modulated_table(cb, cond) : cb.z->value;
    const ad::Var table_const = ad::constant(table);
    const int d = cb.dim();

    TokenMap tm;
    Tensor acc({d, h, w}, 0.0);
    for (int s : scales) {
        Tensor residual({d, h, w});
        for (std::size_t i = 0; i < residual.data.size(); ++i)
            residual.data[i] = f.data[i] - acc.data[i];
        const Tensor down = block_mean(residual, s);
        std::vector<int> tokens(static_cast<std::size_t>(s) * s);
        std::vector<double> vec(static_cast<std::size_t>(d));
        for (int p = 0; p < s * s; ++p) {
            for (int c = 0; c < d; ++c)
                vec[static_cast<std::size_t>(c)] = down.data[static_cast<std::size_t>(c) * s * s + p];
            tokens[static_cast<std::size_t>(p)] = nearest_code_in_table(table, vec.data());
        }
        const ad::Var lift = scale_contribution(table_const, tokens, s, h, w);
        for (std::size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += lift->value.data[i];
        tm.scales.push_back({s, s});
        tm.tokens.push_back(std::move(tokens));
    }
    return tm;
}

ad::Var reconstruct_tokens_ad(const TokenMap& tm, const Codebook& cb, const ad::Var& cond,
                              bool use_cac, int num_scales) {
    cb.validate();
    tm.validate(cb.size());
    if (tm.num_scales() == 0) throw validation_error("reconstruct_tokens: empty token map");
    if (num_scales < 0) num_scales = tm.num_scales();
    if (num_scales == 0 || num_scales > tm.num_scales())
        throw validation_error("reconstruct_tokens: num_scales out of range");
    const int h = tm.scales.back().h, w = tm.scales.back().w;
    const ad::Var table = use_cac ? modulated_table_ad(cb, cond) : cb.z;
    ad::Var acc;
    for (int k = 0; k < num_scales; ++k) {
        const auto& sc = tm.scales[static_cast<std::size_t>(k)];
        if (sc.h != sc.w) throw validation_error("reconstruct_tokens: scales must be square");
        const ad::Var lift =
            scale_contribution(table, tm.tokens[static_cast<std::size_t>(k)], sc.h, h, w);
        acc = acc ? ad::add(acc, lift) : lift;
    }
    return acc;
}

Tensor reconstruct_tokens(const TokenMap& tm, const Codebook& cb, const Tensor& cond,
                          bool use_cac, int num_scales) {
    return reconstruct_tokens_ad(tm, cb, ad::constant(cond), use_cac, num_scales)->value;
}

ad::Var vq_encode(const ad::Var& img_chw, const VqEncoderParams& p) {
    if (img_chw->value.ndim() != 3 || img_chw->value.shape[0] != 1)
        throw validation_error("vq_encode: expected a [1,H,W] input");
    ad::Var x = ad::gelu(ad::conv2d(img_chw, p.w1, p.b1, 2, 1));
    x = ad::gelu(ad::conv2d(x, p.w2, p.b2, 2, 1));
    return ad::conv2d(x, p.w3, p.b3, 2, 1);
}

ad::Var vq_decode(const ad::Var& f, const VqDecoderParams& p) {
    if (f->value.ndim() != 3) throw validation_error("vq_decode: expected a [d,h,w] input");
    ad::Var x = ad::gelu(ad::conv_transpose2d(f, p.w1, p.b1, 2, 1));
    x = ad::gelu(ad::conv_transpose2d(x, p.w2, p.b2, 2, 1));
    return ad::sigmoid(ad::conv_transpose2d(x, p.w3, p.b3, 2, 1));
}

Image decode_multiscale(const TokenMap& tm, const Codebook& cb, const Tensor& cond,
                        const VqDecoderParams& dec, bool use_cac) {
    const Tensor f_hat = reconstruct_tokens(tm, cb, cond, use_cac);
    const ad::Var out = vq_decode(ad::constant(f_hat), dec);
    return image_from_chw(out->value);
}

VqVae init_vqvae(const QuantizerConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.vq_width, d = cfg.code_dim, k = cfg.codebook_size, r = cfg.cond_rank;
    auto normal_leaf = [&](std::vector<int> shape, double stddev) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = rng.normal(0.0, stddev);
        return ad::leaf(std::move(t));
    };
    auto zeros_leaf = [](std::vector<int> shape) {
        return ad::leaf(Tensor(std::move(shape), 0.0));
    };
    VqVae m;
    m.enc.w1 = normal_leaf({c, 1, 4, 4}, std::sqrt(2.0 / 16.0));
    m.enc.b1 = zeros_leaf({c});
    m.enc.w2 = normal_leaf({c, c, 4, 4}, std::sqrt(2.0 / (16.0 * c)));
    m.enc.b2 = zeros_leaf({c});
    m.enc.w3 = normal_leaf({d, c, 4, 4}, std::sqrt(2.0 / (16.0 * c)));
    m.enc.b3 = zeros_leaf({d});
    m.dec.w1 = normal_leaf({d, c, 4, 4}, std::sqrt(2.0 / (16.0 * d)));
    m.dec.b1 = zeros_leaf({c});
    m.dec.w2 = normal_leaf({c, c, 4, 4}, std::sqrt(2.0 / (16.0 * c)));
    m.dec.b2 = zeros_leaf({c});
    m.dec.w3 = normal_leaf({c, 1, 4, 4}, std::sqrt(2.0 / (16.0 * c)));
    m.dec.b3 = zeros_leaf({1});
    // Code 0 is pinned to the zero vector at init so an all-zero residual
    // quantizes to a no-op contribution; training may move it afterwards.
    Tensor z({k, d});
    for (int i = 1; i < k; ++i)
        for (int cdim = 0; cdim < d; ++cdim)
            z.at(i, cdim) = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    m.cb.z = ad::leaf(std::move(z));
    m.cb.u = normal_leaf({k, r}, 0.1);
    m.cb.v = normal_leaf({d, r}, 0.1);
    m.cb.alpha = zeros_leaf({1});
    return m;
}

CondProj init_cond_proj(int in_dim, int rank, Rng& rng) {
    if (in_dim < 1 || rank < 1) throw config_error("cond_proj: dimensions must be positive");
    CondProj p;
    Tensor w({in_dim, rank});
    for (double& v : w.data) v = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    p.w = ad::leaf(std::move(w));
    p.b = ad::leaf(Tensor({rank}, 0.0));
    return p;
}

}  // namespace thermosr
