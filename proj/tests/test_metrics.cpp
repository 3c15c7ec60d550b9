#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "thermosr/dataio.hpp"
#include "thermosr/degrade.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/metrics.hpp"

using namespace thermosr;
namespace fs = std::filesystem;

namespace {

Image filled(int h, int w, double v) {
    Image im(h, w);
    for (auto& p : im.pix) p = v;
    return im;
}

// Image whose p x p patches are constant, so patch means equal the grid
// values exactly.
Image from_grid(const std::vector<std::vector<double>>& grid, int p) {
    const int gh = static_cast<int>(grid.size());
    const int gw = static_cast<int>(grid[0].size());
    Image im(gh * p, gw * p);
    for (int i = 0; i < im.h; ++i)
        for (int j = 0; j < im.w; ++j) im.at(i, j) = grid[static_cast<std::size_t>(i / p)][static_cast<std::size_t>(j / p)];
    return im;
}

}  // namespace

TEST_CASE("psnr golden values, symmetry, and cap") {
    const Image a = synth_scene(1, 32, 32);
    CHECK(psnr(a, a) == 100.0);

    // mse 0.01 at peak 1 is exactly 20 dB.
    const Image z = filled(16, 16, 0.0);
    const Image t = filled(16, 16, 0.1);
    CHECK(psnr(z, t) == doctest::Approx(20.0).epsilon(1e-12));

    // mse 1 at peak 255: 20*log10(255).
    const Image f5 = filled(8, 8, 5.0);
    const Image f6 = filled(8, 8, 6.0);
    CHECK(psnr(f5, f6, 255.0) == doctest::Approx(20.0 * std::log10(255.0)).epsilon(1e-12));

    const Image b = synth_scene(2, 32, 32);
    CHECK(psnr(a, b) == psnr(b, a));

    // Shifting both images by the same constant leaves the error unchanged.
    Image a2 = a, b2 = b;
    for (auto& p : a2.pix) p += 0.3;
    for (auto& p : b2.pix) p += 0.3;
    CHECK(psnr(a2, b2) == doctest::Approx(psnr(a, b)).epsilon(1e-9));

    CHECK_THROWS_AS(psnr(a, filled(16, 16, 0.0)), validation_error);
    CHECK_THROWS_AS(psnr(a, a, 0.0), validation_error);
}

TEST_CASE("ssim self-identity, flat-image closed form, and inversion") {
    const Image a = synth_scene(3, 32, 32);
    CHECK(ssim(a, a) == doctest::Approx(1.0).epsilon(1e-9));

    // Two flat images have zero variance everywhere, so only the luminance
    // term survives.
    const double c1 = 1e-4;
    const Image u = filled(16, 16, 0.3);
    const Image v = filled(16, 16, 0.4);
    const double lum = (2.0 * 0.3 * 0.4 + c1) / (0.3 * 0.3 + 0.4 * 0.4 + c1);
    CHECK(ssim(u, v) == doctest::Approx(lum).epsilon(1e-12));

    const Image b = synth_scene(4, 32, 32);
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));

    // A binary image against its negation has anticorrelated structure.
    Image bits(24, 24);
    for (int i = 0; i < 24; ++i)
        for (int j = 0; j < 24; ++j) bits.at(i, j) = ((i / 4 + j / 4) % 2 == 0) ? 0.0 : 1.0;
    Image inv = bits;
    for (auto& p : inv.pix) p = 1.0 - p;
    CHECK(ssim(bits, inv) < 0.5);

    CHECK_THROWS_AS(ssim(filled(10, 16, 0.0), filled(10, 16, 0.0)), validation_error);
    CHECK_THROWS_AS(ssim(a, filled(16, 16, 0.0)), validation_error);
}

TEST_CASE("toc violation rate goldens and monotone-map invariance") {
    const Image a = synth_scene(5, 64, 64);
    CHECK(toc_violation_rate(a, a) == 0.0);

    // Worked example: one swapped pair of neighboring patch means flips one
    // of the four adjacent contrasts.
    const Image sr = from_grid({{0.1, 0.2}, {0.3, 0.4}}, 8);
    const Image hr = from_grid({{0.2, 0.1}, {0.3, 0.4}}, 8);
    CHECK(toc_violation_rate(sr, hr, 8) == 0.25);

    // Distinct patch means everywhere: negating the image flips every
    // adjacent contrast.
    std::vector<std::vector<double>> g(4, std::vector<double>(4));
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) g[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = 0.05 + 0.06 * (4 * i + j) + 0.001 * ((i * j) % 3);
    const Image ramp = from_grid(g, 8);
    Image neg = ramp;
    for (auto& p : neg.pix) p = 1.0 - p;
    CHECK(toc_violation_rate(neg, ramp, 8) == 1.0);
    CHECK(toc_violation_rate(ramp, ramp, 8) == 0.0);

    // Strictly increasing pointwise maps preserve every contrast sign. With
    // patch size 1 the patch means are the pixels themselves, so cubing is
    // such a map.
    const Image b = synth_scene(6, 32, 32);
    const Image ref = synth_scene(7, 32, 32);
    Image cubed = b;
    for (auto& p : cubed.pix) p = p * p * p;
    CHECK(toc_violation_rate(b, b, 1) == 0.0);
    CHECK(toc_violation_rate(cubed, ref, 1) == toc_violation_rate(b, ref, 1));

    // Affine rescaling of one side does not change the rate either.
    Image scaled = ramp;
    for (auto& p : scaled.pix) p = 0.5 * p + 0.25;
    CHECK(toc_violation_rate(scaled, ramp, 8) == 0.0);
    CHECK(toc_violation_rate(scaled, neg, 8) == 1.0);

    CHECK_THROWS_AS(toc_violation_rate(a, synth_scene(7, 32, 32)), validation_error);
}

TEST_CASE("corpus evaluation, missing predictions, and report round trips") {
    struct TempDir {
        fs::path path;
        explicit TempDir(const std::string& tag) {
            path = fs::temp_directory_path() / ("thermosr_test_" + tag);
            fs::remove_all(path);
            fs::create_directories(path);
        }
        ~TempDir() { fs::remove_all(path); }
    };
    TempDir td("metrics_eval");

    const Image hr_a = synth_scene(8, 64, 64);
    const Image hr_b = synth_scene(9, 64, 64);
    save_image(hr_a, (td.path / "a_HR.png").string());
    save_image(hr_b, (td.path / "b_HR.png").string());
    save_image(resize(hr_a, 16, 16, ResizeMode::bicubic), (td.path / "a_LR.png").string());
    save_image(resize(hr_b, 16, 16, ResizeMode::bicubic), (td.path / "b_LR.png").string());
    {
        std::ofstream mf(td.path / "m.jsonl");
        for (const char* id : {"a", "b"})
            mf << "{\"id\":\"" << id << "\",\"lr_path\":\"" << id << "_LR.png\",\"hr_path\":\""
               << id << "_HR.png\",\"degradation\":\"defocus\",\"scenes\":[],\"split\":\"test\"}\n";
    }
    const Manifest m = load_manifest((td.path / "m.jsonl").string());

    // Prediction dir holds a perfect output for a and nothing for b.
    const fs::path pd = td.path / "pred";
    fs::create_directories(pd);
    save_image(hr_a, (pd / "a_SR.png").string());

    EvalReport rep = eval_corpus(pd.string(), m);
    rep.checkpoint_id = "ckpt-7";
    rep.config_hash = "deadbeef";
    REQUIRE(rep.rows.size() == 1);
    CHECK(rep.rows[0].id == "a");
    CHECK(rep.rows[0].psnr_db == 100.0);
    CHECK(rep.rows[0].ssim == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rep.rows[0].toc_violation_rate == 0.0);
    CHECK(rep.missing == std::vector<std::string>{"b"});
    REQUIRE(rep.mean_psnr.has_value());
    CHECK(*rep.mean_psnr == rep.rows[0].psnr_db);
    CHECK(*rep.mean_ssim == rep.rows[0].ssim);
    CHECK(*rep.mean_toc_violation == rep.rows[0].toc_violation_rate);

    // JSON round trip is lossless and serialization is byte-stable.
    const std::string js = rep.to_json();
    CHECK(EvalReport::from_json(js) == rep);
    CHECK(rep.to_json() == js);
    const std::string csv = rep.to_csv();
    CHECK(csv.find("id,psnr_db,ssim,toc_violation_rate") == 0);
    CHECK(csv.find("a,") != std::string::npos);
    CHECK(csv.find("mean,") != std::string::npos);
    CHECK(rep.to_csv() == csv);

    // With every prediction present the aggregates cover both rows.
    save_image(resize(resize(hr_b, 16, 16, ResizeMode::bicubic), 64, 64, ResizeMode::bicubic),
               (pd / "b_SR.png").string());
    const EvalReport rep2 = eval_corpus(pd.string(), m);
    REQUIRE(rep2.rows.size() == 2);
    CHECK(rep2.missing.empty());
    CHECK(*rep2.mean_psnr ==
          doctest::Approx((rep2.rows[0].psnr_db + rep2.rows[1].psnr_db) / 2.0).epsilon(1e-12));
    CHECK(rep2.rows[1].psnr_db < 100.0);
    CHECK(rep2.rows[1].psnr_db > 10.0);

    // Empty manifests produce empty reports with null aggregates.
    Manifest none;
    none.root = td.path.string();
    const EvalReport rep3 = eval_corpus(pd.string(), none);
    CHECK(rep3.rows.empty());
    CHECK_FALSE(rep3.mean_psnr.has_value());
    const std::string js3 = rep3.to_json();
    CHECK(js3.find("null") != std::string::npos);
    CHECK(EvalReport::from_json(js3) == rep3);
}
