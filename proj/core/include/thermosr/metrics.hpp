#pragma once

#include <optional>
#include <string>
#include <vector>

#include "thermosr/dataio.hpp"
#include "thermosr/imaging.hpp"

namespace thermosr {

// 10*log10(peak^2 / MSE), capped at 100 dB (identical images hit the cap).
// Shape mismatch throws validation_error.
double psnr(const Image& a, const Image& b, double peak = 1.0);

// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, k1 0.01,
// k2 0.03, dynamic range 1.0). Both dims must be at least 11.
double ssim(const Image& a, const Image& b);

// Fraction of horizontally/vertically adjacent patch-mean pairs whose order
// is strictly inverted between sr and hr: (S(i)-S(j)) * (H(i)-H(j)) < 0.
// Patch grids come from patch_means; no adjacent pairs means rate 0.
double toc_violation_rate(const Image& sr, const Image& hr, int p = 8);

struct EvalRow {
    std::string id;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double toc_violation_rate = 0.0;

    bool operator==(const EvalRow&) const = default;
};

// Per-image metric rows plus aggregate means; aggregates are null (absent)
// when no row is present. LPIPS-style perceptual columns are intentionally
// not computed here; external tools may merge extra columns into the CSV.
struct EvalReport {
    std::string checkpoint_id;
    std::string config_hash;
    std::vector<EvalRow> rows;          // manifest order
    std::vector<std::string> missing;   // ids without a prediction file
    std::optional<double> mean_psnr;
    std::optional<double> mean_ssim;
    std::optional<double> mean_toc_violation;

    // Byte-stable for identical content: fixed key order, shortest
    // round-trip number formatting.
    std::string to_json() const;
    std::string to_csv() const;
    static EvalReport from_json(const std::string& text);

    bool operator==(const EvalReport&) const = default;
};

// Scores `<id>_SR.png` from pred_dir against each record's HR image, for
// every record in the manifest (callers filter by split beforehand). Missing
// predictions are listed, not fatal; aggregates cover present rows only.
EvalReport eval_corpus(const std::string& pred_dir, const Manifest& manifest);

}  // namespace thermosr
