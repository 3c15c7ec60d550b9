#include "thermosr/guidance.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "thermosr/degrade.hpp"
#include "thermosr/errors.hpp"

namespace thermosr {

void GuidanceConfig::validate() const {
    if (heat_quantile <= 0.0 || heat_quantile >= 1.0)
        throw config_error("guidance: heat_quantile must lie strictly in (0,1)");
    if (heat_smooth_sigma <= 0.0) throw config_error("guidance: heat_smooth_sigma must be > 0");
    if (encoder_width < 1) throw config_error("guidance: encoder_width must be positive");
    if (attn_dim < 1) throw config_error("guidance: attn_dim must be positive");
    if (heads < 1) throw config_error("guidance: heads must be positive");
    if (attn_dim % heads != 0) throw config_error("guidance: attn_dim must be divisible by heads");
}

double quantile_lower(const std::vector<double>& values, double tau) {
    if (values.empty()) throw validation_error("quantile_lower: empty sample");
    if (tau <= 0.0 || tau >= 1.0)
        throw validation_error("quantile_lower: tau must lie strictly in (0,1)");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    // Smallest value whose empirical CDF reaches tau: index k is the least
    // integer with (k+1)/n >= tau.
    const double t = tau * static_cast<double>(sorted.size());
    long k = static_cast<long>(std::ceil(t)) - 1;
    k = std::clamp<long>(k, 0, static_cast<long>(sorted.size()) - 1);
    return sorted[static_cast<std::size_t>(k)];
}

Tensor gaussian_taps(double sigma) {
    if (sigma <= 0.0) throw validation_error("gaussian_taps: sigma must be > 0");
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    Tensor taps({2 * r + 1});
    double total = 0.0;
    for (int k = -r; k <= r; ++k) {
        const double v = std::exp(-(static_cast<double>(k) * k) / (2.0 * sigma * sigma));
        taps.data[static_cast<std::size_t>(k + r)] = v;
        total += v;
    }
    for (double& v : taps.data) v /= total;
    return taps;
}

Image heat_map(const Image& img, const GuidanceConfig& cfg) {
    cfg.validate();
    const double q = quantile_lower(img.pix, cfg.heat_quantile);
    const double mx = *std::max_element(img.pix.begin(), img.pix.end());
    Image soft(img.h, img.w, 0.0);
    if (mx <= q) return soft;  // flat upper tail: no heat sources to emphasize
    const double inv = 1.0 / (mx - q);
    for (std::size_t i = 0; i < img.pix.size(); ++i)
        soft.pix[i] = std::clamp((img.pix[i] - q) * inv, 0.0, 1.0);
    const Tensor t1 = gaussian_taps(cfg.heat_smooth_sigma);
    const int n = t1.shape[0];
    Tensor k2({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            k2.at(i, j) =
                t1.data[static_cast<std::size_t>(i)] * t1.data[static_cast<std::size_t>(j)];
    return convolve_reflect(soft, k2);
}

namespace {

int reflect_index(int i, int n) {
    if (n == 1) return 0;
    const int period = 2 * n;
    i %= period;
    if (i < 0) i += period;
    return i < n ? i : period - 1 - i;
}

}  // namespace

Image edge_map(const Image& img) {
    static const int gx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
    static const int gy[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
    Image mag(img.h, img.w);
    double mx = 0.0;
    for (int i = 0; i < img.h; ++i) {
        for (int j = 0; j < img.w; ++j) {
            // Working relative to the center pixel makes a locally constant
            // patch cancel exactly (both stencils sum to zero), so flat
            // regions produce a true 0 rather than rounding residue that the
            // max-normalization would blow up.
            const double center = img.at(i, j);
            double sx = 0.0, sy = 0.0;
            for (int u = -1; u <= 1; ++u) {
                const int ii = reflect_index(i + u, img.h);
                for (int v = -1; v <= 1; ++v) {
                    const double px = img.at(ii, reflect_index(j + v, img.w)) - center;
                    sx += gx[u + 1][v + 1] * px;
                    sy += gy[u + 1][v + 1] * px;
                }
            }
            const double m = std::sqrt(sx * sx + sy * sy);
            mag.at(i, j) = m;
            mx = std::max(mx, m);
        }
    }
    if (mx > 0.0)
        for (double& v : mag.pix) v /= mx;
    return mag;
}

GuidanceParams init_guidance(const GuidanceConfig& cfg, Rng& rng) {
    cfg.validate();
    const int c = cfg.encoder_width;
    auto normal_leaf = [&](std::vector<int> shape, double stddev) {
        Tensor t(std::move(shape));
        for (double& v : t.data) v = rng.normal(0.0, stddev);
        return ad::leaf(std::move(t));
    };
    auto zeros_leaf = [](std::vector<int> shape) {
        return ad::leaf(Tensor(std::move(shape), 0.0));
    };
    auto make_encoder = [&]() {
        EncoderParams e;
        e.w1 = normal_leaf({c, 1, 3, 3}, std::sqrt(2.0 / 9.0));
        e.b1 = zeros_leaf({c});
        e.w2 = normal_leaf({c, c, 3, 3}, std::sqrt(2.0 / (9.0 * c)));
        e.b2 = zeros_leaf({c});
        return e;
    };
    GuidanceParams p;
    p.enc_heat = make_encoder();
    p.enc_edge = make_encoder();
    p.enc_lr = make_encoder();
    // Zero local weights and a zero second MLP layer start the gate at a
    // neutral W = 0.5 so neither stream dominates before training.
    p.gate.dw_w = zeros_leaf({c, 3, 3});
    p.gate.dw_b = zeros_leaf({c});
    p.gate.mlp_w1 = normal_leaf({c, c}, std::sqrt(1.0 / c));
    p.gate.mlp_b1 = zeros_leaf({c});
    p.gate.mlp_w2 = zeros_leaf({c, c});
    p.gate.mlp_b2 = zeros_leaf({c});
    p.gate.wq = normal_leaf({c, cfg.attn_dim}, std::sqrt(1.0 / c));
    p.gate.wk = normal_leaf({c, cfg.attn_dim}, std::sqrt(1.0 / c));
    p.gate.wv = normal_leaf({c, cfg.attn_dim}, std::sqrt(1.0 / c));
    return p;
}

ad::Var encode_features(const ad::Var& img_chw, const EncoderParams& p) {
    if (img_chw->value.ndim() != 3 || img_chw->value.shape[0] != 1)
        throw validation_error("encode_features: expected a [1,H,W] input");
    ad::Var h = ad::conv2d(img_chw, p.w1, p.b1, 2, 1);
    h = ad::gelu(h);
    return ad::conv2d(h, p.w2, p.b2, 1, 1);
}

ad::Var encode_heat(const Image& hm, const EncoderParams& p) {
    return encode_features(ad::constant(to_chw(hm)), p);
}

ad::Var encode_edge(const Image& em, const EncoderParams& p) {
    return encode_features(ad::constant(to_chw(em)), p);
}

ad::Var encode_lr(const Image& lr, const EncoderParams& p) {
    return encode_features(ad::constant(to_chw(lr)), p);
}

ad::Var fuse_with_gate(const ad::Var& f_heat, const ad::Var& f_edge, const ad::Var& w) {
    check_same_shape(f_heat->value, f_edge->value, "fuse_with_gate");
    check_same_shape(f_heat->value, w->value, "fuse_with_gate");
    return ad::add(ad::mul(f_heat, w), ad::mul(f_edge, ad::add_scalar(ad::neg(w), 1.0)));
}

std::pair<ad::Var, ad::Var> fuse(const ad::Var& f_heat, const ad::Var& f_edge,
                                 const GateParams& gate) {
    check_same_shape(f_heat->value, f_edge->value, "fuse");
    const ad::Var a = ad::add(f_heat, f_edge);
    const ad::Var local = ad::depthwise_conv3x3(a, gate.dw_w, gate.dw_b);
    const int c = a->value.shape[0];
    ad::Var g = ad::reshape(ad::global_avg_pool(a), {1, c});
    g = ad::gelu(ad::add_rowvec(ad::matmul(g, gate.mlp_w1), gate.mlp_b1));
    g = ad::add_rowvec(ad::matmul(g, gate.mlp_w2), gate.mlp_b2);
    const ad::Var global =
        ad::broadcast_chw(ad::reshape(g, {c}), a->value.shape[1], a->value.shape[2]);
    const ad::Var w = ad::sigmoid(ad::add(local, global));
    return {fuse_with_gate(f_heat, f_edge, w), w};
}

ad::Var attention(const ad::Var& q, const ad::Var& k, const ad::Var& v, int heads) {
    if (q->value.ndim() != 2 || k->value.ndim() != 2 || v->value.ndim() != 2)
        throw validation_error("attention: q, k, v must be token matrices");
    const int d = q->value.shape[1];
    if (k->value.shape[1] != d || v->value.shape[1] != d)
        throw validation_error("attention: q, k, v must share the channel width");
    if (k->value.shape[0] != v->value.shape[0])
        throw validation_error("attention: k and v must have the same token count");
    if (heads < 1 || d % heads != 0)
        throw config_error("attention: width must be divisible by the head count");
    const int dh = d / heads;
    const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<ad::Var> outs;
    outs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        const ad::Var qh = ad::slice_cols(q, h * dh, (h + 1) * dh);
        const ad::Var kh = ad::slice_cols(k, h * dh, (h + 1) * dh);
        const ad::Var vh = ad::slice_cols(v, h * dh, (h + 1) * dh);
        const ad::Var attn = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv_scale));
        outs.push_back(ad::matmul(attn, vh));
    }
    return heads == 1 ? outs[0] : ad::concat_cols(outs);
}

namespace {

// [C,H,W] feature map -> [H*W, C] token matrix, rows in row-major order.
ad::Var to_tokens(const ad::Var& f) {
    if (f->value.ndim() != 3) throw validation_error("to_tokens: expected [C,H,W]");
    const int c = f->value.shape[0];
    const int n = f->value.shape[1] * f->value.shape[2];
    return ad::transpose2d(ad::reshape(f, {c, n}));
}

}  // namespace

ad::Var cross_attend(const ad::Var& f_lr, const ad::Var& f_fused, const GateParams& gate,
                     const GuidanceConfig& cfg) {
    cfg.validate();
    if (f_lr->value.ndim() != 3 || f_fused->value.ndim() != 3 ||
        f_lr->value.shape[0] != f_fused->value.shape[0])
        throw validation_error("cross_attend: feature maps must share the channel width");
    const ad::Var q = ad::matmul(to_tokens(f_lr), gate.wq);
    const ad::Var k = ad::matmul(to_tokens(f_fused), gate.wk);
    const ad::Var v = ad::matmul(to_tokens(f_fused), gate.wv);
    return attention(q, k, v, cfg.heads);
}

ad::Var guidance_tokens(const Image& lr, const GuidanceParams& params, const GuidanceConfig& cfg) {
    const Image hm = heat_map(lr, cfg);
    const Image em = edge_map(lr);
    const ad::Var f_heat = encode_heat(hm, params.enc_heat);
    const ad::Var f_edge = encode_edge(em, params.enc_edge);
    const ad::Var f_lr = encode_lr(lr, params.enc_lr);
    auto [fused, w] = fuse(f_heat, f_edge, params.gate);
    (void)w;
    return cross_attend(f_lr, fused, params.gate, cfg);
}

}  // namespace thermosr
