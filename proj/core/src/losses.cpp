#include "thermosr/losses.hpp"

#include <cmath>

#include "thermosr/errors.hpp"
#include "thermosr/log.hpp"

namespace thermosr {

namespace {

Tensor hw_view(const Image& img) {
    Tensor t({img.h, img.w});
    std::copy(img.pix.begin(), img.pix.end(), t.data.begin());
    return t;
}

}  // namespace

double ce_loss(const LogitsPyramid& logits, const TokenMap& targets) {
    if (logits.num_scales() != targets.num_scales())
        throw validation_error("ce_loss: scale count mismatch");
    double acc = 0.0;
    int count = 0;
    for (int k = 0; k < logits.num_scales(); ++k) {
        const Tensor& l = logits.per_scale[static_cast<std::size_t>(k)];
        const auto& toks = targets.tokens[static_cast<std::size_t>(k)];
        if (l.ndim() != 2 || l.shape[0] != static_cast<int>(toks.size()))
            throw validation_error("ce_loss: logits rows do not match token count at scale " +
                                   std::to_string(k));
        const int K = l.shape[1];
        for (std::size_t i = 0; i < toks.size(); ++i) {
            const int t = toks[i];
            if (t < 0 || t >= K) throw validation_error("ce_loss: target out of range");
            double mx = l.at(static_cast<int>(i), 0);
            for (int j = 1; j < K; ++j) mx = std::max(mx, l.at(static_cast<int>(i), j));
            double denom = 0.0;
            for (int j = 0; j < K; ++j) denom += std::exp(l.at(static_cast<int>(i), j) - mx);
            acc += -(l.at(static_cast<int>(i), t) - mx - std::log(denom));
            ++count;
        }
    }
    if (count == 0) throw validation_error("ce_loss: no tokens");
    return acc / count;
}

double mse_loss(const Image& sr, const Image& hr) {
    if (sr.h != hr.h || sr.w != hr.w) throw validation_error("mse_loss: shape mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < sr.pix.size(); ++i) {
        const double d = sr.pix[i] - hr.pix[i];
        acc += d * d;
    }
    return acc / static_cast<double>(sr.pix.size());
}

Tensor patch_means(const Tensor& hw, int p) {
    if (hw.ndim() != 2) throw validation_error("patch_means: expected [H,W]");
    if (p < 1) throw validation_error("patch_means: patch size must be >= 1");
    const int h = hw.shape[0], w = hw.shape[1];
    const int gh = h / p, gw = w / p;
    if (h % p != 0 || w % p != 0)
        warn("patch_means: cropping " + std::to_string(h % p) + "x" + std::to_string(w % p) +
             " remainder (image " + std::to_string(h) + "x" + std::to_string(w) + ", patch " +
             std::to_string(p) + ")");
    Tensor grid({gh, gw});
    const double inv = 1.0 / (static_cast<double>(p) * p);
    for (int gi = 0; gi < gh; ++gi) {
        for (int gj = 0; gj < gw; ++gj) {
            double acc = 0.0;
            for (int i = 0; i < p; ++i)
                for (int j = 0; j < p; ++j) acc += hw.at(gi * p + i, gj * p + j);
            grid.at(gi, gj) = acc * inv;
        }
    }
    return grid;
}

Tensor patch_means(const Image& img, int p) { return patch_means(hw_view(img), p); }

double toc_loss_grids(const Tensor& s_grid, const Tensor& h_grid) {
    check_same_shape(s_grid, h_grid, "toc_loss");
    const int gh = s_grid.shape[0], gw = s_grid.shape[1];
    const long pairs = static_cast<long>(gh) * (gw - 1) + static_cast<long>(gh - 1) * gw;
    if (pairs <= 0) {
        warn("toc_loss: patch grid has no adjacent pairs, returning 0");
        return 0.0;
    }
    double acc = 0.0;
    for (int i = 0; i < gh; ++i) {
        for (int j = 0; j < gw; ++j) {
            if (j + 1 < gw) {
                const double v = -(s_grid.at(i, j) - s_grid.at(i, j + 1)) *
                                 (h_grid.at(i, j) - h_grid.at(i, j + 1));
                if (v > 0.0) acc += v;
            }
            if (i + 1 < gh) {
                const double v = -(s_grid.at(i, j) - s_grid.at(i + 1, j)) *
                                 (h_grid.at(i, j) - h_grid.at(i + 1, j));
                if (v > 0.0) acc += v;
            }
        }
    }
    return acc / static_cast<double>(pairs);
}

double toc_loss(const Image& sr, const Image& hr, int p) {
    if (sr.h != hr.h || sr.w != hr.w) throw validation_error("toc_loss: shape mismatch");
    return toc_loss_grids(patch_means(sr, p), patch_means(hr, p));
}

double total_loss(double ce, double mse, double toc, const LossWeights& w) {
    if (!std::isfinite(ce) || !std::isfinite(mse) || !std::isfinite(toc))
        throw validation_error("total_loss: non-finite component");
    if (w.lambda1 < 0.0 || w.lambda2 < 0.0)
        throw validation_error("total_loss: weights must be non-negative");
    return ce + w.lambda1 * mse + w.lambda2 * toc;
}

ad::Var mse_loss_ad(const ad::Var& sr_chw, const Tensor& hr_chw) {
    check_same_shape(sr_chw->value, hr_chw, "mse_loss_ad");
    auto diff = ad::sub(sr_chw, ad::constant(hr_chw));
    return ad::mean_all(ad::mul(diff, diff));
}

ad::Var toc_loss_ad(const ad::Var& sr_chw, const Tensor& hr_chw, int p) {
    check_same_shape(sr_chw->value, hr_chw, "toc_loss_ad");
    if (sr_chw->value.ndim() != 3 || sr_chw->value.shape[0] != 1)
        throw validation_error("toc_loss_ad: expected [1,H,W]");
    const int h = sr_chw->value.shape[1], w = sr_chw->value.shape[2];
    const int gh = h / p, gw = w / p;
    const long pairs = static_cast<long>(gh) * (gw - 1) + static_cast<long>(gh - 1) * gw;
    if (pairs <= 0) {
        warn("toc_loss: patch grid has no adjacent pairs, returning 0");
        return ad::constant(Tensor::scalar(0.0));
    }

    // Patch means as a stride-p averaging convolution, then per-axis
    // neighbor differences against the (constant) HR grid.
    ad::Var x = sr_chw;
    if (h % p != 0 || w % p != 0) {
        auto flat = ad::reshape(x, {h, w});
        flat = ad::slice_rows(flat, 0, gh * p);
        flat = ad::slice_cols(flat, 0, gw * p);
        x = ad::reshape(flat, {1, gh * p, gw * p});
    }
    Tensor kernel({1, 1, p, p}, 1.0 / (static_cast<double>(p) * p));
    auto s3 = ad::conv2d(x, ad::constant(kernel), nullptr, /*stride=*/p, /*pad=*/0);
    auto s = ad::reshape(s3, {gh, gw});

    Tensor hr2({h, w});
    std::copy(hr_chw.data.begin(), hr_chw.data.end(), hr2.data.begin());
    const Tensor hg = patch_means(hr2, p);

    std::vector<ad::Var> terms;
    if (gw >= 2) {
        Tensor dh({gh, gw - 1});
        for (int i = 0; i < gh; ++i)
            for (int j = 0; j + 1 < gw; ++j) dh.at(i, j) = hg.at(i, j) - hg.at(i, j + 1);
        auto ds = ad::sub(ad::slice_cols(s, 0, gw - 1), ad::slice_cols(s, 1, gw));
        terms.push_back(ad::sum_all(ad::relu(ad::neg(ad::mul(ds, ad::constant(dh))))));
    }
    if (gh >= 2) {
        Tensor dv({gh - 1, gw});
        for (int i = 0; i + 1 < gh; ++i)
            for (int j = 0; j < gw; ++j) dv.at(i, j) = hg.at(i, j) - hg.at(i + 1, j);
        auto ds = ad::sub(ad::slice_rows(s, 0, gh - 1), ad::slice_rows(s, 1, gh));
        terms.push_back(ad::sum_all(ad::relu(ad::neg(ad::mul(ds, ad::constant(dv))))));
    }
    ad::Var acc = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) acc = ad::add(acc, terms[i]);
    return ad::scale(acc, 1.0 / static_cast<double>(pairs));
}

Tensor toc_loss_grad_sr(const Image& sr, const Image& hr, int p) {
    auto leaf = ad::leaf(to_chw(sr), true);
    auto loss = toc_loss_ad(leaf, to_chw(hr), p);
    if (loss->requires_grad) ad::backward(loss);
    Tensor g({sr.h, sr.w});
    if (!loss->requires_grad) return g;  // constant zero loss
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = leaf->grad.data[i];
    return g;
}

}  // namespace thermosr
