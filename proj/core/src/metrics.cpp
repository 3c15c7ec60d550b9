#include "thermosr/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>

#include <json.hpp>

#include "thermosr/losses.hpp"

namespace thermosr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void require_same_shape(const Image& a, const Image& b, const char* who) {
    if (a.h != b.h || a.w != b.w)
        throw validation_error(std::string(who) + ": images must have the same shape");
}

}  // namespace

double psnr(const Image& a, const Image& b, double peak) {
    require_same_shape(a, b, "psnr");
    if (!(peak > 0.0)) throw validation_error("psnr: peak must be positive");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.pix.size(); ++i) {
        const double d = a.pix[i] - b.pix[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.pix.size());
    if (mse == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& a, const Image& b) {
    require_same_shape(a, b, "ssim");
    constexpr int win = 11;
    if (a.h < win || a.w < win)
        throw validation_error("ssim: images must be at least 11x11");
    constexpr double sigma = 1.5;
    constexpr double c1 = 0.01 * 0.01;  // (k1 * L)^2 at L = 1
    constexpr double c2 = 0.03 * 0.03;

    double taps[win];
    double norm = 0.0;
    for (int i = 0; i < win; ++i) {
        const double d = i - (win - 1) / 2.0;
        taps[i] = std::exp(-d * d / (2.0 * sigma * sigma));
        norm += taps[i];
    }
    for (double& t : taps) t /= norm;

    const int oh = a.h - win + 1, ow = a.w - win + 1;
    double total = 0.0;
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double ma = 0.0, mb = 0.0, maa = 0.0, mbb = 0.0, mab = 0.0;
            for (int i = 0; i < win; ++i) {
                for (int j = 0; j < win; ++j) {
                    const double wgt = taps[i] * taps[j];
                    const double va = a.at(y + i, x + j), vb = b.at(y + i, x + j);
                    ma += wgt * va;
                    mb += wgt * vb;
                    maa += wgt * va * va;
                    mbb += wgt * vb * vb;
                    mab += wgt * va * vb;
                }
            }
            const double var_a = maa - ma * ma;
            const double var_b = mbb - mb * mb;
            const double cov = mab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                     ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
        }
    }
    return total / (static_cast<double>(oh) * ow);
}

double toc_violation_rate(const Image& sr, const Image& hr, int p) {
    require_same_shape(sr, hr, "toc_violation_rate");
    const Tensor s = patch_means(sr, p);
    const Tensor h = patch_means(hr, p);
    const int gh = s.shape[0], gw = s.shape[1];
    long violations = 0, pairs = 0;
    auto probe = [&](int ai, int aj, int bi, int bj) {
        ++pairs;
        const double prod = (s.at(ai, aj) - s.at(bi, bj)) * (h.at(ai, aj) - h.at(bi, bj));
        if (prod < 0.0) ++violations;
    };
    for (int i = 0; i < gh; ++i)
        for (int j = 0; j + 1 < gw; ++j) probe(i, j, i, j + 1);
    for (int i = 0; i + 1 < gh; ++i)
        for (int j = 0; j < gw; ++j) probe(i, j, i + 1, j);
    if (pairs == 0) return 0.0;
    return static_cast<double>(violations) / static_cast<double>(pairs);
}

namespace {

// Shortest round-trip representation; keeps serialized reports byte-stable
// and exact through a parse.
std::string fmt_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

json optional_to_json(const std::optional<double>& v) {
    return v ? json(*v) : json(nullptr);
}

std::optional<double> optional_from_json(const json& j) {
    if (j.is_null()) return std::nullopt;
    return j.get<double>();
}

}  // namespace

std::string EvalReport::to_json() const {
    json j;
    j["aggregates"]["psnr_db"] = optional_to_json(mean_psnr);
    j["aggregates"]["ssim"] = optional_to_json(mean_ssim);
    j["aggregates"]["toc_violation_rate"] = optional_to_json(mean_toc_violation);
    j["checkpoint_id"] = checkpoint_id;
    j["config_hash"] = config_hash;
    j["missing"] = missing;
    j["rows"] = json::array();
    for (const auto& r : rows) {
        json row;
        row["id"] = r.id;
        row["psnr_db"] = r.psnr_db;
        row["ssim"] = r.ssim;
        row["toc_violation_rate"] = r.toc_violation_rate;
        j["rows"].push_back(std::move(row));
    }
    return j.dump(2) + "\n";
}

EvalReport EvalReport::from_json(const std::string& text) {
    const json j = json::parse(text);
    EvalReport r;
    r.checkpoint_id = j.at("checkpoint_id").get<std::string>();
    r.config_hash = j.at("config_hash").get<std::string>();
    r.missing = j.at("missing").get<std::vector<std::string>>();
    r.mean_psnr = optional_from_json(j.at("aggregates").at("psnr_db"));
    r.mean_ssim = optional_from_json(j.at("aggregates").at("ssim"));
    r.mean_toc_violation = optional_from_json(j.at("aggregates").at("toc_violation_rate"));
    for (const auto& row : j.at("rows")) {
        EvalRow e;
        e.id = row.at("id").get<std::string>();
        e.psnr_db = row.at("psnr_db").get<double>();
        e.ssim = row.at("ssim").get<double>();
        e.toc_violation_rate = row.at("toc_violation_rate").get<double>();
        r.rows.push_back(std::move(e));
    }
    return r;
}

std::string EvalReport::to_csv() const {
    std::string out = "id,psnr_db,ssim,toc_violation_rate\n";
    for (const auto& r : rows) {
        out += r.id;
        out += ',';
        out += fmt_double(r.psnr_db);
        out += ',';
        out += fmt_double(r.ssim);
        out += ',';
        out += fmt_double(r.toc_violation_rate);
        out += '\n';
    }
    out += "mean,";
    out += mean_psnr ? fmt_double(*mean_psnr) : "";
    out += ',';
    out += mean_ssim ? fmt_double(*mean_ssim) : "";
    out += ',';
    out += mean_toc_violation ? fmt_double(*mean_toc_violation) : "";
    out += '\n';
    return out;
}

EvalReport eval_corpus(const std::string& pred_dir, const Manifest& manifest) {
    EvalReport rep;
    double sp = 0.0, ss = 0.0, st = 0.0;
    for (const auto& rec : manifest.records) {
        const std::string pred_path = (fs::path(pred_dir) / (rec.id + "_SR.png")).string();
        if (!fs::exists(pred_path)) {
            rep.missing.push_back(rec.id);
            continue;
        }
        const Image sr = load_image(pred_path);
        const Image hr = load_image(manifest.resolve(rec.hr_path));
        EvalRow row;
        row.id = rec.id;
        row.psnr_db = psnr(sr, hr);
        row.ssim = ssim(sr, hr);
        row.toc_violation_rate = toc_violation_rate(sr, hr);
        sp += row.psnr_db;
        ss += row.ssim;
        st += row.toc_violation_rate;
        rep.rows.push_back(std::move(row));
    }
    if (!rep.rows.empty()) {
        const double n = static_cast<double>(rep.rows.size());
        rep.mean_psnr = sp / n;
        rep.mean_ssim = ss / n;
        rep.mean_toc_violation = st / n;
    }
    return rep;
}

}  // namespace thermosr
