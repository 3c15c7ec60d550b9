#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "grad_check.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/guidance.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/rng.hpp"

using namespace thermosr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& r, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = r.uniform(lo, hi);
    return t;
}

}  // namespace

TEST_CASE("lower-interpolation quantile on hand cases") {
    const std::vector<double> v = {4.0, 1.0, 3.0, 2.0};
    CHECK(quantile_lower(v, 0.7) == 3.0);   // CDF(3) = 0.75 is the first >= 0.7
    CHECK(quantile_lower(v, 0.5) == 2.0);
    CHECK(quantile_lower(v, 0.95) == 4.0);
    CHECK(quantile_lower(v, 0.01) == 1.0);
    CHECK_THROWS_AS(quantile_lower({}, 0.5), validation_error);
    CHECK_THROWS_AS(quantile_lower(v, 1.0), validation_error);
}

TEST_CASE("lower-interpolation quantile matches a linear-scan oracle") {
    Rng r(17);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> v(static_cast<std::size_t>(1 + r.uniform_int(40)));
        for (double& x : v) x = r.uniform(0.0, 1.0);
        if (trial % 3 == 0 && v.size() > 2) v[1] = v[0];  // exercise ties
        const double tau = r.uniform(0.05, 0.95);
        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        // Oracle: scan for the smallest value whose CDF reaches tau.
        double expect = sorted.back();
        const double n = static_cast<double>(sorted.size());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            std::size_t le = 0;
            for (double x : v)
                if (x <= sorted[i]) ++le;
            if (static_cast<double>(le) / n >= tau) {
                expect = sorted[i];
                break;
            }
        }
        CHECK(quantile_lower(v, tau) == expect);
    }
}

TEST_CASE("gaussian taps are normalized, symmetric, and match direct evaluation") {
    for (double sigma : {0.8, 2.0, 3.5}) {
        const Tensor taps = gaussian_taps(sigma);
        const int r = static_cast<int>(std::ceil(3.0 * sigma));
        REQUIRE(taps.shape[0] == 2 * r + 1);
        double sum = 0.0;
        for (double v : taps.data) sum += v;
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
        double total = 0.0;
        std::vector<double> expect;
        for (int k = -r; k <= r; ++k) {
            expect.push_back(std::exp(-(k * k) / (2.0 * sigma * sigma)));
            total += expect.back();
        }
        for (int k = 0; k <= 2 * r; ++k) {
            CHECK(taps.data[static_cast<std::size_t>(k)] ==
                  doctest::Approx(expect[static_cast<std::size_t>(k)] / total).epsilon(1e-12));
            CHECK(taps.data[static_cast<std::size_t>(k)] ==
                  taps.data[static_cast<std::size_t>(2 * r - k)]);
        }
    }
}

TEST_CASE("heat map of a constant image is all-zero") {
    Image img(16, 16, 0.6);
    GuidanceConfig cfg;
    const Image hm = heat_map(img, cfg);
    for (double v : hm.pix) CHECK(v == 0.0);
}

TEST_CASE("heat map of a single hot pixel is the smoothing kernel") {
    Image img(32, 32, 0.0);
    img.at(16, 16) = 1.0;
    GuidanceConfig cfg;
    const Image hm = heat_map(img, cfg);
    // Quantile of {0 x 1023, 1 x 1} at tau=0.7 is 0, so the soft threshold is
    // the identity here and the result is the blurred impulse.
    double c1d;
    {
        double total = 0.0;
        for (int k = -6; k <= 6; ++k) total += std::exp(-(k * k) / 8.0);
        c1d = 1.0 / total;
    }
    CHECK(hm.at(16, 16) == doctest::Approx(c1d * c1d).epsilon(1e-12));
    double sum = 0.0, peak = 0.0;
    int pi = -1, pj = -1;
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            sum += hm.at(i, j);
            if (hm.at(i, j) > peak) {
                peak = hm.at(i, j);
                pi = i;
                pj = j;
            }
        }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));  // mass preserved away from borders
    CHECK(pi == 16);
    CHECK(pj == 16);
}

TEST_CASE("heat map degenerates to all-zero when the quantile reaches the max") {
    // Half zeros, half ones: the 0.7-quantile under the lower-interpolation
    // rule is already the maximum, so there is no range left to stretch.
    Image img(8, 8, 0.0);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 4; ++j) img.at(i, j) = 1.0;
    GuidanceConfig cfg;
    const Image hm = heat_map(img, cfg);
    for (double v : hm.pix) CHECK(v == 0.0);
}

TEST_CASE("heat map stays in range and is translation covariant") {
    GuidanceConfig cfg;
    Rng r(5);
    Image noise(16, 16);
    for (double& v : noise.pix) v = r.uniform();
    const Image hm = heat_map(noise, cfg);
    for (double v : hm.pix) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }

    Image a(32, 32, 0.0), b(32, 32, 0.0);
    a.at(12, 10) = 1.0;
    b.at(14, 13) = 1.0;  // same content shifted by (2, 3)
    const Image ha = heat_map(a, cfg);
    const Image hb = heat_map(b, cfg);
    for (int i = 0; i < 32; ++i)
        for (int j = 0; j < 32; ++j) {
            if (i + 2 < 32 && j + 3 < 32) CHECK(hb.at(i + 2, j + 3) == ha.at(i, j));
        }
}

TEST_CASE("edge map of a constant image is all-zero") {
    Image img(12, 12, 0.3);
    const Image em = edge_map(img);
    for (double v : em.pix) CHECK(v == 0.0);
}

TEST_CASE("edge map of a vertical step peaks at the boundary columns") {
    Image img(8, 8, 0.0);
    for (int i = 0; i < 8; ++i)
        for (int j = 4; j < 8; ++j) img.at(i, j) = 1.0;
    const Image em = edge_map(img);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) {
            if (j == 3 || j == 4)
                CHECK(em.at(i, j) == doctest::Approx(1.0).epsilon(1e-12));
            else
                CHECK(em.at(i, j) == 0.0);
        }
}

TEST_CASE("edge map of an impulse reproduces the stencil arithmetic") {
    Image img(7, 7, 0.0);
    img.at(3, 3) = 1.0;
    const Image em = edge_map(img);
    // Pre-normalization responses: sqrt(2) at diagonal neighbors (|gx| =
    // |gy| = 1), 2 at the four direct neighbors; the max is 2.
    const double diag = std::sqrt(2.0) / 2.0;
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 7; ++j) {
            const int di = std::abs(i - 3), dj = std::abs(j - 3);
            if (di == 1 && dj == 1)
                CHECK(em.at(i, j) == doctest::Approx(diag).epsilon(1e-12));
            else if (di + dj == 1)
                CHECK(em.at(i, j) == doctest::Approx(1.0).epsilon(1e-12));
            else
                CHECK(em.at(i, j) == 0.0);
        }
}

TEST_CASE("edge map is translation covariant for interior content") {
    Image a(24, 24, 0.0), b(24, 24, 0.0);
    for (int i = 8; i < 12; ++i)
        for (int j = 6; j < 11; ++j) a.at(i, j) = 0.8;
    for (int i = 11; i < 15; ++i)
        for (int j = 10; j < 15; ++j) b.at(i, j) = 0.8;  // shifted by (3, 4)
    const Image ea = edge_map(a);
    const Image eb = edge_map(b);
    for (int i = 0; i < 24; ++i)
        for (int j = 0; j < 24; ++j)
            if (i + 3 < 24 && j + 4 < 24) CHECK(eb.at(i + 3, j + 4) == ea.at(i, j));
}

TEST_CASE("guidance config validation") {
    GuidanceConfig bad_tau;
    bad_tau.heat_quantile = 1.0;
    CHECK_THROWS_AS(bad_tau.validate(), config_error);
    GuidanceConfig bad_heads;
    bad_heads.attn_dim = 64;
    bad_heads.heads = 5;
    CHECK_THROWS_AS(bad_heads.validate(), config_error);
    GuidanceConfig ok;
    CHECK_NOTHROW(ok.validate());
}

TEST_CASE("encoders halve the spatial size and widen the channels") {
    GuidanceConfig cfg;
    Rng r(3);
    const GuidanceParams p = init_guidance(cfg, r);
    Image lr(16, 16, 0.5);
    const ad::Var f = encode_lr(lr, p.enc_lr);
    REQUIRE(f->value.shape == std::vector<int>{32, 8, 8});
    CHECK(f->value.all_finite());
}

TEST_CASE("a zero-initialized final encoder layer yields a zero feature map") {
    GuidanceConfig cfg;
    cfg.encoder_width = 8;
    Rng r(4);
    GuidanceParams p = init_guidance(cfg, r);
    std::fill(p.enc_heat.w2->value.data.begin(), p.enc_heat.w2->value.data.end(), 0.0);
    std::fill(p.enc_heat.b2->value.data.begin(), p.enc_heat.b2->value.data.end(), 0.0);
    Image any(12, 12, 0.7);
    const ad::Var f = encode_heat(any, p.enc_heat);
    for (double v : f->value.data) CHECK(v == 0.0);
}

TEST_CASE("guidance pipeline is deterministic for a fixed seed") {
    GuidanceConfig cfg;
    cfg.encoder_width = 8;
    cfg.attn_dim = 8;
    cfg.heads = 2;
    Image lr = Image(16, 16, 0.0);
    Rng pix(21);
    for (double& v : lr.pix) v = pix.uniform();

    Rng r1(99), r2(99);
    const GuidanceParams p1 = init_guidance(cfg, r1);
    const GuidanceParams p2 = init_guidance(cfg, r2);
    const ad::Var t1 = guidance_tokens(lr, p1, cfg);
    const ad::Var t2 = guidance_tokens(lr, p2, cfg);
    REQUIRE(t1->value.shape == std::vector<int>{64, 8});
    REQUIRE(t1->value.data.size() == t2->value.data.size());
    for (std::size_t i = 0; i < t1->value.data.size(); ++i)
        CHECK(t1->value.data[i] == t2->value.data[i]);
}

TEST_CASE("pinning the gate recovers each input stream exactly") {
    Rng r(11);
    const Tensor fh = random_tensor({3, 4, 4}, r);
    const Tensor fe = random_tensor({3, 4, 4}, r);
    const ad::Var heat = ad::constant(fh);
    const ad::Var edge = ad::constant(fe);
    const ad::Var ones = ad::constant(Tensor({3, 4, 4}, 1.0));
    const ad::Var zeros = ad::constant(Tensor({3, 4, 4}, 0.0));
    const ad::Var all_heat = fuse_with_gate(heat, edge, ones);
    const ad::Var all_edge = fuse_with_gate(heat, edge, zeros);
    for (std::size_t i = 0; i < fh.data.size(); ++i) {
        CHECK(all_heat->value.data[i] == fh.data[i]);
        CHECK(all_edge->value.data[i] == fe.data[i]);
    }
}

TEST_CASE("gate blend arithmetic on scalars") {
    const ad::Var h = ad::constant(Tensor({1, 1, 1}, 2.0));
    const ad::Var e = ad::constant(Tensor({1, 1, 1}, 4.0));
    const ad::Var w = ad::constant(Tensor({1, 1, 1}, 0.25));
    CHECK(fuse_with_gate(h, e, w)->value.data[0] == doctest::Approx(3.5).epsilon(1e-15));
}

TEST_CASE("learned gate lies strictly inside (0,1) and fusion is convex") {
    GuidanceConfig cfg;
    cfg.encoder_width = 6;
    Rng r(13);
    GuidanceParams p = init_guidance(cfg, r);
    // Randomize the parts that init keeps at zero so the gate is nontrivial.
    for (double& v : p.gate.dw_w->value.data) v = r.normal(0.0, 0.5);
    for (double& v : p.gate.mlp_w2->value.data) v = r.normal(0.0, 0.5);
    const ad::Var fh = ad::constant(random_tensor({6, 5, 5}, r));
    const ad::Var fe = ad::constant(random_tensor({6, 5, 5}, r));
    auto [fused, w] = fuse(fh, fe, p.gate);
    for (std::size_t i = 0; i < w->value.data.size(); ++i) {
        CHECK(w->value.data[i] > 0.0);
        CHECK(w->value.data[i] < 1.0);
        const double lo = std::min(fh->value.data[i], fe->value.data[i]);
        const double hi = std::max(fh->value.data[i], fe->value.data[i]);
        CHECK(fused->value.data[i] >= lo - 1e-12);
        CHECK(fused->value.data[i] <= hi + 1e-12);
    }
}

TEST_CASE("fuse rejects mismatched feature shapes") {
    GuidanceConfig cfg;
    cfg.encoder_width = 4;
    Rng r(14);
    const GuidanceParams p = init_guidance(cfg, r);
    const ad::Var a = ad::constant(Tensor({4, 3, 3}, 0.0));
    const ad::Var b = ad::constant(Tensor({4, 3, 4}, 0.0));
    CHECK_THROWS_AS(fuse(a, b, p.gate), validation_error);
    CHECK_THROWS_AS(fuse_with_gate(a, b, a), validation_error);
}

TEST_CASE("attention reproduces a hand-evaluated softmax") {
    const ad::Var q = ad::constant(Tensor::from({1, 1}, {1.0}));
    const ad::Var k = ad::constant(Tensor::from({2, 1}, {0.0, std::log(3.0)}));
    const ad::Var v = ad::constant(Tensor::from({2, 1}, {0.0, 1.0}));
    const ad::Var out = attention(q, k, v, 1);
    CHECK(out->value.data[0] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("a single key broadcasts its value to every query") {
    Rng r(15);
    const ad::Var q = ad::constant(random_tensor({5, 4}, r));
    const ad::Var k = ad::constant(random_tensor({1, 4}, r));
    const Tensor vt = random_tensor({1, 4}, r);
    const ad::Var out = attention(q, k, ad::constant(vt), 2);
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 4; ++j)
            CHECK(out->value.at(i, j) == doctest::Approx(vt.at(0, j)).epsilon(1e-12));
}

TEST_CASE("identical keys average the values regardless of the query") {
    Rng r(16);
    const ad::Var q = ad::constant(random_tensor({3, 2}, r));
    const ad::Var k = ad::constant(Tensor::from({2, 2}, {0.3, 0.7, 0.3, 0.7}));
    const ad::Var v = ad::constant(Tensor::from({2, 2}, {1.0, 2.0, 5.0, 6.0}));
    const ad::Var out = attention(q, k, v, 1);
    for (int i = 0; i < 3; ++i) {
        CHECK(out->value.at(i, 0) == doctest::Approx(3.0).epsilon(1e-12));
        CHECK(out->value.at(i, 1) == doctest::Approx(4.0).epsilon(1e-12));
    }
}

TEST_CASE("attention rows sum to one") {
    Rng r(18);
    const ad::Var q = ad::constant(random_tensor({6, 4}, r, -2.0, 2.0));
    const ad::Var k = ad::constant(random_tensor({7, 4}, r, -2.0, 2.0));
    const ad::Var v = ad::constant(Tensor({7, 4}, 1.0));
    // With all-ones values, each output element equals its row's total
    // attention weight.
    const ad::Var out = attention(q, k, v, 2);
    for (double x : out->value.data) CHECK(x == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("attention is invariant to a joint key/value permutation") {
    Rng r(19);
    const Tensor qt = random_tensor({5, 4}, r);
    const Tensor kt = random_tensor({6, 4}, r);
    const Tensor vt = random_tensor({6, 4}, r);
    const std::vector<int> perm = {4, 0, 5, 2, 1, 3};
    Tensor kp({6, 4}), vp({6, 4});
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 4; ++j) {
            kp.at(i, j) = kt.at(perm[static_cast<std::size_t>(i)], j);
            vp.at(i, j) = vt.at(perm[static_cast<std::size_t>(i)], j);
        }
    const ad::Var a = attention(ad::constant(qt), ad::constant(kt), ad::constant(vt), 2);
    const ad::Var b = attention(ad::constant(qt), ad::constant(kp), ad::constant(vp), 2);
    for (std::size_t i = 0; i < a->value.data.size(); ++i)
        CHECK(a->value.data[i] == doctest::Approx(b->value.data[i]).epsilon(1e-12));
}

TEST_CASE("multi-head attention matches a per-head oracle") {
    Rng r(20);
    const Tensor qt = random_tensor({3, 4}, r);
    const Tensor kt = random_tensor({5, 4}, r);
    const Tensor vt = random_tensor({5, 4}, r);
    const ad::Var out = attention(ad::constant(qt), ad::constant(kt), ad::constant(vt), 2);

    // Oracle: plain double loops, one head at a time over column halves.
    for (int h = 0; h < 2; ++h) {
        const int c0 = h * 2;
        for (int i = 0; i < 3; ++i) {
            double logits[5], mx = -1e300;
            for (int t = 0; t < 5; ++t) {
                double dot = 0.0;
                for (int c = 0; c < 2; ++c) dot += qt.at(i, c0 + c) * kt.at(t, c0 + c);
                logits[t] = dot / std::sqrt(2.0);
                mx = std::max(mx, logits[t]);
            }
            double z = 0.0;
            for (double& l : logits) {
                l = std::exp(l - mx);
                z += l;
            }
            for (int c = 0; c < 2; ++c) {
                double acc = 0.0;
                for (int t = 0; t < 5; ++t) acc += logits[t] / z * vt.at(t, c0 + c);
                CHECK(out->value.at(i, c0 + c) == doctest::Approx(acc).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("attention rejects a head count that does not divide the width") {
    Rng r(22);
    const ad::Var q = ad::constant(random_tensor({2, 6}, r));
    const ad::Var k = ad::constant(random_tensor({3, 6}, r));
    const ad::Var v = ad::constant(random_tensor({3, 6}, r));
    CHECK_THROWS_AS(attention(q, k, v, 4), config_error);
    CHECK_NOTHROW(attention(q, k, v, 3));
}

TEST_CASE("cross attention produces one guidance token per LR feature cell") {
    GuidanceConfig cfg;
    cfg.encoder_width = 4;
    cfg.attn_dim = 6;
    cfg.heads = 3;
    Rng r(23);
    GuidanceParams p = init_guidance(cfg, r);
    const ad::Var f_lr = ad::constant(random_tensor({4, 3, 2}, r));
    const ad::Var f_fused = ad::constant(random_tensor({4, 2, 2}, r));
    const ad::Var out = cross_attend(f_lr, f_fused, p.gate, cfg);
    REQUIRE(out->value.shape == std::vector<int>{6, 6});
    CHECK(out->value.all_finite());
}

TEST_CASE("gate parameter gradients match finite differences") {
    GuidanceConfig cfg;
    cfg.encoder_width = 3;
    Rng r(24);
    const Tensor fh = random_tensor({3, 3, 3}, r);
    const Tensor fe = random_tensor({3, 3, 3}, r);
    const Tensor weight = random_tensor({3, 3, 3}, r);  // breaks gradient symmetry

    auto fn = [&](const std::vector<ad::Var>& leaves) {
        GateParams g;
        g.dw_w = leaves[0];
        g.dw_b = leaves[1];
        g.mlp_w1 = leaves[2];
        g.mlp_b1 = leaves[3];
        g.mlp_w2 = leaves[4];
        g.mlp_b2 = leaves[5];
        auto [fused, w] = fuse(ad::constant(fh), ad::constant(fe), g);
        (void)w;
        return ad::sum_all(ad::mul(fused, ad::constant(weight)));
    };
    std::vector<Tensor> inputs = {random_tensor({3, 3, 3}, r), random_tensor({3}, r),
                                  random_tensor({3, 3}, r),    random_tensor({3}, r),
                                  random_tensor({3, 3}, r),    random_tensor({3}, r)};
    const auto res = testutil::grad_check(fn, inputs);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
}

TEST_CASE("attention projection gradients match finite differences") {
    GuidanceConfig cfg;
    cfg.encoder_width = 3;
    cfg.attn_dim = 4;
    cfg.heads = 2;
    Rng r(25);
    GuidanceParams p = init_guidance(cfg, r);
    const Tensor f_lr = random_tensor({3, 2, 2}, r);
    const Tensor f_fused = random_tensor({3, 2, 2}, r);
    const Tensor weight = random_tensor({4, 4}, r);

    auto fn = [&](const std::vector<ad::Var>& leaves) {
        GateParams g = p.gate;
        g.wq = leaves[0];
        g.wk = leaves[1];
        g.wv = leaves[2];
        const ad::Var out = cross_attend(ad::constant(f_lr), ad::constant(f_fused), g, cfg);
        return ad::sum_all(ad::mul(out, ad::constant(weight)));
    };
    std::vector<Tensor> inputs = {random_tensor({3, 4}, r), random_tensor({3, 4}, r),
                                  random_tensor({3, 4}, r)};
    const auto res = testutil::grad_check(fn, inputs);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
}

TEST_CASE("end-to-end guidance gradients reach the encoder weights") {
    GuidanceConfig cfg;
    cfg.encoder_width = 3;
    cfg.attn_dim = 4;
    cfg.heads = 1;
    Rng r(26);
    GuidanceParams p = init_guidance(cfg, r);
    for (double& v : p.gate.dw_w->value.data) v = r.normal(0.0, 0.3);
    for (double& v : p.gate.mlp_w2->value.data) v = r.normal(0.0, 0.3);
    Image lr(8, 8, 0.0);
    Rng pix(27);
    for (double& v : lr.pix) v = pix.uniform();
    const Tensor weight = random_tensor({16, 4}, r);

    auto fn = [&](const std::vector<ad::Var>& leaves) {
        GuidanceParams q = p;
        q.enc_heat.w1 = leaves[0];
        q.enc_lr.w2 = leaves[1];
        const ad::Var out = guidance_tokens(lr, q, cfg);
        return ad::sum_all(ad::mul(out, ad::constant(weight)));
    };
    std::vector<Tensor> inputs = {p.enc_heat.w1->value, p.enc_lr.w2->value};
    const auto res = testutil::grad_check(fn, inputs);
    CHECK_MESSAGE(res.max_rel_err < 1e-4, res.worst);
}
