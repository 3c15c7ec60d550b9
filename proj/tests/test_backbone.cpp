#include <doctest.h>

#include <cmath>
#include <vector>

#include "grad_check.hpp"
#include "thermosr/backbone.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"

using namespace thermosr;

namespace {

Tensor random_tensor(std::vector<int> shape, Rng& r, double stddev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = r.normal(0.0, stddev);
    return t;
}

BackboneConfig small_config() {
    BackboneConfig cfg;
    cfg.layers = 2;
    cfg.width = 16;
    cfg.heads = 2;
    cfg.scales = {1, 2, 4, 8};
    cfg.vocab = 9;
    cfg.cond_dim = 5;
    return cfg;
}

TokenMap random_tokens(const std::vector<int>& scales, int vocab, Rng& r) {
    TokenMap tm;
    for (int s : scales) {
        std::vector<int> t(static_cast<std::size_t>(s) * s);
        for (int& v : t) v = r.uniform_int(vocab);
        tm.scales.push_back({s, s});
        tm.tokens.push_back(std::move(t));
    }
    return tm;
}

// The head is zero at init (uniform start); tests that need informative
// logits randomize it.
void randomize_head(BackboneParams& p, Rng& r) {
    for (double& v : p.head_w->value.data) v = r.normal(0.0, 0.5);
}

bool same_bits(const Tensor& a, const Tensor& b) {
    if (a.shape != b.shape) return false;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        if (a.data[i] != b.data[i]) return false;
    return true;
}

}  // namespace

TEST_CASE("config and sampler validation") {
    BackboneConfig cfg = small_config();
    CHECK_NOTHROW(cfg.validate());

    BackboneConfig bad = cfg;
    bad.layers = 0;
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = cfg;
    bad.width = 15;  // not divisible by heads
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = cfg;
    bad.vocab = 1;
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = cfg;
    bad.scales = {4, 2};
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = cfg;
    bad.scales = {2, 3};  // 3 is not a multiple of 2
    CHECK_THROWS_AS(bad.validate(), config_error);
    bad = cfg;
    bad.dropout = 1.0;
    CHECK_THROWS_AS(bad.validate(), config_error);

    SamplerConfig s;
    s.kind = SamplerConfig::Kind::topk;
    s.top_k = 0;
    CHECK_THROWS_AS(s.validate(cfg.vocab), config_error);
    s.top_k = cfg.vocab + 1;
    CHECK_THROWS_AS(s.validate(cfg.vocab), config_error);
    s.top_k = 3;
    s.temperature = 0.0;
    CHECK_THROWS_AS(s.validate(cfg.vocab), config_error);
    s.temperature = 0.7;
    CHECK_NOTHROW(s.validate(cfg.vocab));

    Rng r(1);
    CHECK_THROWS_AS(init_backbone(cfg, 0, r), config_error);
}

TEST_CASE("zero parameters give uniform logits and cross entropy ln vocab") {
    BackboneConfig cfg = small_config();
    Rng r(2);
    BackboneParams p = init_backbone(cfg, 6, r);
    // Zero every parameter; layer norm with zero gain collapses to zero, so
    // the head sees zeros and emits exactly uniform logits.
    std::vector<ad::Var> all = {p.in_proj_w, p.in_proj_b, p.prefix_pos, p.tok_emb,
                                p.start_emb,  p.scale_emb, p.final_g,   p.final_b,
                                p.head_w,     p.head_b};
    for (const auto& v : p.pos_emb) all.push_back(v);
    for (const auto& b : p.blocks) {
        for (const auto& v : {b.ln1_g, b.ln1_b, b.wq, b.bq, b.wk, b.bk, b.wv, b.bv, b.wo, b.bo,
                              b.ln2_g, b.ln2_b, b.mlp_w1, b.mlp_b1, b.mlp_w2, b.mlp_b2})
            all.push_back(v);
    }
    for (auto& v : all)
        for (double& x : v->value.data) x = 0.0;

    const TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);
    const Tensor f_tsg = random_tensor({6, cfg.cond_dim}, r);
    const auto logits = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p);
    REQUIRE(logits.size() == cfg.scales.size());
    for (std::size_t k = 0; k < logits.size(); ++k) {
        const int n = cfg.scales[k] * cfg.scales[k];
        REQUIRE(logits[k]->value.shape == std::vector<int>({n, cfg.vocab}));
        for (double v : logits[k]->value.data) CHECK(v == 0.0);
        const auto ce = ad::cross_entropy_rows(logits[k], tm.tokens[k]);
        CHECK(ce->value.data[0] ==
              doctest::Approx(std::log(static_cast<double>(cfg.vocab))).epsilon(1e-12));
    }
}

TEST_CASE("logits of a scale ignore its own and all finer tokens") {
    BackboneConfig cfg = small_config();
    Rng r(3);
    BackboneParams p = init_backbone(cfg, 6, r);
    randomize_head(p, r);
    const Tensor f_tsg = random_tensor({6, cfg.cond_dim}, r);
    TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);

    const LogitsPyramid base = forward_teacher_forced(tm, f_tsg, cfg, p);
    for (const auto& t : base.per_scale)
        for (double v : t.data) CHECK(std::isfinite(v));

    // Perturb one token of the third scale (4x4): scales 1..3 must be
    // bit-identical, the fourth must react (its input embeds scale 3).
    TokenMap bumped = tm;
    bumped.tokens[2][5] = (bumped.tokens[2][5] + 1) % cfg.vocab;
    const LogitsPyramid after = forward_teacher_forced(bumped, f_tsg, cfg, p);
    CHECK(same_bits(after.per_scale[0], base.per_scale[0]));
    CHECK(same_bits(after.per_scale[1], base.per_scale[1]));
    CHECK(same_bits(after.per_scale[2], base.per_scale[2]));
    CHECK_FALSE(same_bits(after.per_scale[3], base.per_scale[3]));

    // The last scale's tokens are targets only; they feed no input block, so
    // every logit is unchanged.
    TokenMap last = tm;
    for (int& v : last.tokens[3]) v = (v + 3) % cfg.vocab;
    const LogitsPyramid after_last = forward_teacher_forced(last, f_tsg, cfg, p);
    for (std::size_t k = 0; k < base.per_scale.size(); ++k)
        CHECK(same_bits(after_last.per_scale[k], base.per_scale[k]));
}

TEST_CASE("permuting a scale's tokens permutes only the next scale's logits") {
    BackboneConfig cfg = small_config();
    cfg.scales = {1, 2, 4};
    Rng r(4);
    BackboneParams p = init_backbone(cfg, 5, r);
    randomize_head(p, r);
    // Zero the positional table of the scale whose inputs get permuted, so
    // position identity comes only from the token content.
    for (double& v : p.pos_emb[2]->value.data) v = 0.0;

    const Tensor f_tsg = random_tensor({5, cfg.cond_dim}, r);
    TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);
    // Make the 2x2 tokens distinct so the permutation is visible.
    tm.tokens[1] = {1, 2, 3, 4};

    const LogitsPyramid base = forward_teacher_forced(tm, f_tsg, cfg, p);

    // Swap coarse cells (0,0) and (1,1) of the 2x2 scale.
    TokenMap perm = tm;
    std::swap(perm.tokens[1][0], perm.tokens[1][3]);
    const LogitsPyramid after = forward_teacher_forced(perm, f_tsg, cfg, p);

    CHECK(same_bits(after.per_scale[0], base.per_scale[0]));
    CHECK(same_bits(after.per_scale[1], base.per_scale[1]));

    // Induced permutation on the 4x4 grid: each coarse cell carries its 2x2
    // block of replicated rows along.
    auto coarse_of = [](int y, int x) { return std::pair<int, int>(y / 2, x / 2); };
    auto permuted_coarse = [](int ci, int cj) {
        if (ci == 0 && cj == 0) return std::pair<int, int>(1, 1);
        if (ci == 1 && cj == 1) return std::pair<int, int>(0, 0);
        return std::pair<int, int>(ci, cj);
    };
    for (int y = 0; y < 4; ++y) {
        for (int x = 0; x < 4; ++x) {
            const auto [ci, cj] = coarse_of(y, x);
            const auto [pi, pj] = permuted_coarse(ci, cj);
            const int src_y = 2 * pi + (y % 2), src_x = 2 * pj + (x % 2);
            const int row = y * 4 + x, src = src_y * 4 + src_x;
            for (int c = 0; c < cfg.vocab; ++c)
                CHECK(after.per_scale[2].at(row, c) ==
                      doctest::Approx(base.per_scale[2].at(src, c)).epsilon(1e-12));
        }
    }
}

TEST_CASE("changing the guidance tokens changes the first scale's logits") {
    BackboneConfig cfg = small_config();
    Rng r(5);
    BackboneParams p = init_backbone(cfg, 6, r);
    randomize_head(p, r);
    const TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);
    const Tensor a = random_tensor({6, cfg.cond_dim}, r);
    Tensor b = a;
    b.at(0, 0) += 0.5;
    const LogitsPyramid la = forward_teacher_forced(tm, a, cfg, p);
    const LogitsPyramid lb = forward_teacher_forced(tm, b, cfg, p);
    CHECK_FALSE(same_bits(la.per_scale[0], lb.per_scale[0]));
}

TEST_CASE("argmax generation is deterministic and top-k reduces to it") {
    BackboneConfig cfg = small_config();
    Rng r(6);
    BackboneParams p = init_backbone(cfg, 6, r);
    randomize_head(p, r);
    const Tensor f_tsg = random_tensor({6, cfg.cond_dim}, r);

    SamplerConfig argmax;
    const TokenMap a = generate(f_tsg, cfg, p, argmax, 77);
    const TokenMap b = generate(f_tsg, cfg, p, argmax, 78);  // argmax ignores the seed
    REQUIRE(a.num_scales() == static_cast<int>(cfg.scales.size()));
    a.validate(cfg.vocab);
    for (int k = 0; k < a.num_scales(); ++k) {
        CHECK(a.scales[static_cast<std::size_t>(k)].h == cfg.scales[static_cast<std::size_t>(k)]);
        CHECK(a.tokens[static_cast<std::size_t>(k)] == b.tokens[static_cast<std::size_t>(k)]);
    }

    SamplerConfig top1;
    top1.kind = SamplerConfig::Kind::topk;
    top1.top_k = 1;
    top1.temperature = 2.0;
    const TokenMap c = generate(f_tsg, cfg, p, top1, 123);
    for (int k = 0; k < a.num_scales(); ++k)
        CHECK(c.tokens[static_cast<std::size_t>(k)] == a.tokens[static_cast<std::size_t>(k)]);

    // Full-vocabulary top-k at vanishing temperature concentrates all mass
    // on the maximum.
    SamplerConfig cold;
    cold.kind = SamplerConfig::Kind::topk;
    cold.top_k = cfg.vocab;
    cold.temperature = 1e-9;
    const TokenMap d = generate(f_tsg, cfg, p, cold, 9);
    for (int k = 0; k < a.num_scales(); ++k)
        CHECK(d.tokens[static_cast<std::size_t>(k)] == a.tokens[static_cast<std::size_t>(k)]);

    // Same seed, same draw; the sampled path is reproducible.
    SamplerConfig warm;
    warm.kind = SamplerConfig::Kind::topk;
    warm.top_k = cfg.vocab;
    warm.temperature = 5.0;
    const TokenMap e1 = generate(f_tsg, cfg, p, warm, 31);
    const TokenMap e2 = generate(f_tsg, cfg, p, warm, 31);
    for (int k = 0; k < e1.num_scales(); ++k)
        CHECK(e1.tokens[static_cast<std::size_t>(k)] == e2.tokens[static_cast<std::size_t>(k)]);
}

TEST_CASE("input validation rejects mismatched token maps and guidance") {
    BackboneConfig cfg = small_config();
    Rng r(7);
    BackboneParams p = init_backbone(cfg, 6, r);
    const Tensor f_tsg = random_tensor({6, cfg.cond_dim}, r);
    TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);

    TokenMap short_map = tm;
    short_map.scales.pop_back();
    short_map.tokens.pop_back();
    CHECK_THROWS_AS(forward_teacher_forced(short_map, f_tsg, cfg, p), validation_error);

    TokenMap wrong = tm;
    wrong.scales[1] = {3, 3};
    wrong.tokens[1].assign(9, 0);
    CHECK_THROWS_AS(forward_teacher_forced(wrong, f_tsg, cfg, p), validation_error);

    CHECK_THROWS_AS(forward_teacher_forced(tm, random_tensor({5, cfg.cond_dim}, r), cfg, p),
                    validation_error);
    CHECK_THROWS_AS(forward_teacher_forced(tm, random_tensor({6, cfg.cond_dim + 1}, r), cfg, p),
                    validation_error);
    CHECK_THROWS_AS(generate(random_tensor({4, cfg.cond_dim}, r), cfg, p, SamplerConfig{}, 1),
                    validation_error);
}

TEST_CASE("gradients flow end to end through the teacher-forced loss") {
    BackboneConfig cfg;
    cfg.layers = 1;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.scales = {1, 2};
    cfg.vocab = 5;
    cfg.cond_dim = 3;
    Rng r(8);
    const BackboneParams base = init_backbone(cfg, 2, r);
    const TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);

    // Perturbed leaves: token embedding, one attention weight, the head, the
    // input projection, and the guidance tokens themselves.
    std::vector<Tensor> inputs = {base.tok_emb->value, base.blocks[0].wq->value,
                                  random_tensor({cfg.width, cfg.vocab}, r, 0.5),
                                  base.in_proj_w->value, random_tensor({2, cfg.cond_dim}, r)};

    auto fn = [&](const std::vector<ad::Var>& in) {
        BackboneParams p = base;
        p.tok_emb = in[0];
        p.blocks[0].wq = in[1];
        p.head_w = in[2];
        p.in_proj_w = in[3];
        const auto logits = forward_teacher_forced_ad(tm, in[4], cfg, p);
        ad::Var loss;
        for (std::size_t k = 0; k < logits.size(); ++k) {
            const auto ce = ad::cross_entropy_rows(logits[k], tm.tokens[k]);
            loss = loss ? ad::add(loss, ce) : ce;
        }
        return loss;
    };
    const auto res = testutil::grad_check(fn, inputs);
    CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("dropout is reproducible under the same stream and off by default") {
    BackboneConfig cfg = small_config();
    cfg.dropout = 0.3;
    Rng r(9);
    BackboneParams p = init_backbone(cfg, 6, r);
    randomize_head(p, r);
    const TokenMap tm = random_tokens(cfg.scales, cfg.vocab, r);
    const Tensor f_tsg = random_tensor({6, cfg.cond_dim}, r);

    Rng d1(42), d2(42), d3(43);
    const auto a = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p, &d1);
    const auto b = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p, &d2);
    const auto c = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p, &d3);
    CHECK(same_bits(a[3]->value, b[3]->value));
    CHECK_FALSE(same_bits(a[3]->value, c[3]->value));

    // Without a dropout stream the pass is the deterministic one.
    const auto e = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p);
    const auto f = forward_teacher_forced_ad(tm, ad::constant(f_tsg), cfg, p);
    CHECK(same_bits(e[3]->value, f[3]->value));
}
