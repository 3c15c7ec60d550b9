#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "thermosr/degrade.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"

using namespace thermosr;

namespace {

double kernel_sum(const Tensor& k) {
    double s = 0.0;
    for (double v : k.data) s += v;
    return s;
}

// Independent rasterizer: same geometric definition, but written as a plain
// double-space hit count over a fixed 4x4 grid per cell so a bug in the
// production indexing or normalization cannot hide.
double oracle_disk_weight(int i, int j, double radius) {
    int hits = 0;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) {
            const double y = i + (a + 0.5) / 4.0 - 0.5;
            const double x = j + (b + 0.5) / 4.0 - 0.5;
            if (std::sqrt(x * x + y * y) <= radius) ++hits;
        }
    return hits / 16.0;
}

}  // namespace

TEST_CASE("defocus kernel sums to one across the parameter range") {
    Rng r(42);
    for (int trial = 0; trial < 100; ++trial) {
        const double radius = r.uniform(0.5, 6.0);
        const Tensor k = defocus_kernel(radius);
        CHECK(kernel_sum(k) == doctest::Approx(1.0).epsilon(1e-9));
        for (double v : k.data) CHECK(v >= 0.0);
    }
}

TEST_CASE("motion kernel sums to one across the parameter range") {
    Rng r(43);
    for (int trial = 0; trial < 100; ++trial) {
        const double length = r.uniform(3.0, 15.0);
        const double angle = r.uniform(0.0, 3.14159);
        const Tensor k = motion_kernel(length, angle);
        CHECK(kernel_sum(k) == doctest::Approx(1.0).epsilon(1e-9));
        for (double v : k.data) CHECK(v >= 0.0);
    }
}

TEST_CASE("small defocus kernel concentrates mass at the center") {
    const Tensor k = defocus_kernel(0.5);
    const int c = k.shape[0] / 2;
    CHECK(k.at(c, c) > 0.9);
}

TEST_CASE("defocus kernel has exact 4-fold symmetry") {
    for (double radius : {0.7, 1.3, 2.0, 3.7, 5.2}) {
        const Tensor k = defocus_kernel(radius);
        const int n = k.shape[0];
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                CHECK(k.at(i, j) == k.at(n - 1 - i, j));
                CHECK(k.at(i, j) == k.at(i, n - 1 - j));
                CHECK(k.at(i, j) == k.at(j, i));
            }
    }
}

TEST_CASE("defocus kernel matches an independent rasterization oracle") {
    for (double radius : {0.8, 1.9, 3.1}) {
        const Tensor k = defocus_kernel(radius);
        const int half = k.shape[0] / 2;
        // The oracle normalizes by the analytic cell-hit total, so first
        // recover that total from the unnormalized per-cell weights.
        double total = 0.0;
        for (int i = -half; i <= half; ++i)
            for (int j = -half; j <= half; ++j) total += oracle_disk_weight(i, j, radius);
        for (int i = -half; i <= half; ++i)
            for (int j = -half; j <= half; ++j) {
                const double expected = oracle_disk_weight(i, j, radius) / total;
                CHECK(k.at(i + half, j + half) == doctest::Approx(expected).epsilon(1e-12));
            }
    }
}

TEST_CASE("axis-aligned motion kernel is a single uniform row") {
    const Tensor k = motion_kernel(5.0, 0.0);
    const int n = k.shape[0];
    const int c = n / 2;
    int nonzero_rows = 0, taps = 0;
    for (int i = 0; i < n; ++i) {
        bool any = false;
        for (int j = 0; j < n; ++j)
            if (k.at(i, j) != 0.0) {
                any = true;
                ++taps;
                CHECK(i == c);
                CHECK(k.at(i, j) == doctest::Approx(0.2).epsilon(1e-12));
            }
        if (any) ++nonzero_rows;
    }
    CHECK(nonzero_rows == 1);
    CHECK(taps == 5);
}

TEST_CASE("vertical motion kernel is the transpose of the horizontal one") {
    const Tensor kh = motion_kernel(7.0, 0.0);
    const Tensor kv = motion_kernel(7.0, 3.14159265358979323846 / 2.0);
    REQUIRE(kh.shape == kv.shape);
    const int n = kh.shape[0];
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) CHECK(kv.at(i, j) == kh.at(j, i));
}

TEST_CASE("kernel parameter validation") {
    CHECK_THROWS_AS(defocus_kernel(0.3), validation_error);
    CHECK_THROWS_AS(motion_kernel(0.5, 0.0), validation_error);
}

TEST_CASE("reflect convolution preserves constants") {
    Image img(12, 9, 0.37);
    const Image out = convolve_reflect(img, defocus_kernel(2.0));
    for (double v : out.pix) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
}

TEST_CASE("reflect convolution matches a brute-force interior computation") {
    Rng r(7);
    Image img(10, 11);
    for (double& v : img.pix) v = r.uniform();
    const Tensor k = motion_kernel(3.0, 1.1);
    const Image out = convolve_reflect(img, k);
    const int half = k.shape[0] / 2;
    // Interior pixels need no padding, so direct accumulation is exact.
    for (int i = half; i < img.h - half; ++i)
        for (int j = half; j < img.w - half; ++j) {
            double acc = 0.0;
            for (int u = 0; u < k.shape[0]; ++u)
                for (int v = 0; v < k.shape[1]; ++v)
                    acc += k.at(u, v) * img.at(i + u - half, j + v - half);
            CHECK(out.at(i, j) == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("degrade_pair produces quarter-size LR and keeps HR bit-exact") {
    Image hr = synth_scene(1, 64, 64);
    DegradationSpec spec;
    spec.seed = 5;
    const DegradedPair pair = degrade_pair(hr, spec);
    CHECK(pair.lr.h == 16);
    CHECK(pair.lr.w == 16);
    CHECK(pair.hr.h == 64);
    CHECK(pair.hr.w == 64);
    for (std::size_t i = 0; i < hr.pix.size(); ++i) CHECK(pair.hr.pix[i] == hr.pix[i]);
    for (double v : pair.lr.pix) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("degrading a constant image without noise yields the same constant") {
    Image hr(64, 64, 0.42);
    DegradationSpec spec;
    spec.noise_sigma = 0.0;
    const DegradedPair pair = degrade_pair(hr, spec);
    for (double v : pair.lr.pix) CHECK(v == doctest::Approx(0.42).epsilon(1e-12));
}

TEST_CASE("degradation is deterministic for a fixed seed") {
    Image hr = synth_scene(9, 64, 64);
    DegradationSpec spec;
    spec.kind = DegradationKind::motion;
    spec.seed = 123;
    const DegradedPair a = degrade_pair(hr, spec);
    const DegradedPair b = degrade_pair(hr, spec);
    REQUIRE(a.lr.pix.size() == b.lr.pix.size());
    for (std::size_t i = 0; i < a.lr.pix.size(); ++i) CHECK(a.lr.pix[i] == b.lr.pix[i]);
}

TEST_CASE("different seeds change the noise realization") {
    Image hr = synth_scene(9, 64, 64);
    DegradationSpec a_spec, b_spec;
    a_spec.seed = 1;
    b_spec.seed = 2;
    const DegradedPair a = degrade_pair(hr, a_spec);
    const DegradedPair b = degrade_pair(hr, b_spec);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.lr.pix.size(); ++i)
        max_diff = std::max(max_diff, std::abs(a.lr.pix[i] - b.lr.pix[i]));
    CHECK(max_diff > 1e-6);
}

TEST_CASE("noiseless degradation is affine in the input away from the clip") {
    // Blur and bicubic resampling are linear maps; with values kept inside
    // [0.2, 0.6] neither the output clamp nor the noise path engages, so
    // degrade(a*x + c) == a*degrade(x) + c must hold to roundoff.
    Rng r(77);
    Image x(64, 64);
    for (double& v : x.pix) v = r.uniform(0.2, 0.6);
    Image ax_c(64, 64);
    const double a = 0.5, c = 0.1;
    for (std::size_t i = 0; i < x.pix.size(); ++i) ax_c.pix[i] = a * x.pix[i] + c;

    DegradationSpec spec;
    spec.noise_sigma = 0.0;
    spec.kind = DegradationKind::motion;
    const Image lx = degrade_pair(x, spec).lr;
    const Image lax = degrade_pair(ax_c, spec).lr;
    for (std::size_t i = 0; i < lx.pix.size(); ++i)
        CHECK(lax.pix[i] == doctest::Approx(a * lx.pix[i] + c).epsilon(1e-9));
}

TEST_CASE("misalignment perturbs the LR branch but never the HR image") {
    Image hr = synth_scene(11, 64, 64);
    DegradationSpec aligned, shifted;
    aligned.noise_sigma = shifted.noise_sigma = 0.0;
    shifted.misalign_px = 0.5;
    const DegradedPair a = degrade_pair(hr, aligned);
    const DegradedPair s = degrade_pair(hr, shifted);
    for (std::size_t i = 0; i < hr.pix.size(); ++i) {
        CHECK(a.hr.pix[i] == hr.pix[i]);
        CHECK(s.hr.pix[i] == hr.pix[i]);
    }
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.lr.pix.size(); ++i)
        max_diff = std::max(max_diff, std::abs(a.lr.pix[i] - s.lr.pix[i]));
    CHECK(max_diff > 1e-6);
}

TEST_CASE("degrade_pair validates its inputs") {
    Image bad(30, 30, 0.5);
    DegradationSpec spec;
    CHECK_THROWS_AS(degrade_pair(bad, spec), validation_error);

    Image ok(64, 64, 0.5);
    DegradationSpec neg;
    neg.noise_sigma = -0.1;
    CHECK_THROWS_AS(degrade_pair(ok, neg), validation_error);

    DegradationSpec wide;
    wide.defocus_radius = 7.5;
    CHECK_THROWS_AS(degrade_pair(ok, wide), validation_error);
}

TEST_CASE("synthetic scenes are deterministic in the seed") {
    const Image a = synth_scene(31, 64, 64);
    const Image b = synth_scene(31, 64, 64);
    REQUIRE(a.pix.size() == b.pix.size());
    for (std::size_t i = 0; i < a.pix.size(); ++i) CHECK(a.pix[i] == b.pix[i]);
    const Image c = synth_scene(32, 64, 64);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < a.pix.size(); ++i)
        max_diff = std::max(max_diff, std::abs(a.pix[i] - c.pix[i]));
    CHECK(max_diff > 1e-6);
}

TEST_CASE("synthetic scenes satisfy the contrast bounds for many seeds") {
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        const Image img = synth_scene(seed, 64, 64);
        double mn = 1.0, mx = 0.0;
        for (double v : img.pix) {
            mn = std::min(mn, v);
            mx = std::max(mx, v);
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        CHECK(mx > 0.9);
        CHECK(mn < 0.1);
    }
}

TEST_CASE("synth_scene rejects undersized canvases") {
    CHECK_THROWS_AS(synth_scene(0, 16, 64), validation_error);
    CHECK_THROWS_AS(synth_scene(0, 64, 31), validation_error);
}

TEST_CASE("degradation kind round-trips through its string form") {
    CHECK(degradation_from_string(to_string(DegradationKind::defocus)) == DegradationKind::defocus);
    CHECK(degradation_from_string(to_string(DegradationKind::motion)) == DegradationKind::motion);
    CHECK_THROWS_AS(degradation_from_string("gaussian"), validation_error);
}
