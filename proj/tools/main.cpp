// Command line front end: corpus synthesis, the two training stages,
// inference, evaluation, and scanline export.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "thermosr/dataio.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/harness.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/metrics.hpp"

namespace fs = std::filesystem;
using namespace thermosr;

namespace {

// Shortest round-trip formatting keeps emitted CSV byte-stable across runs.
std::string fmt_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

void log_line(const std::string& text) { std::fprintf(stderr, "thermosr: %s\n", text.c_str()); }

ExperimentConfig load_and_log(const std::string& path) {
    ExperimentConfig cfg = load_config(path);
    log_line("config " + cfg.hash() + " seed " + std::to_string(cfg.seed));
    return cfg;
}

void apply_ablations(ExperimentConfig& cfg, const std::vector<std::string>& ablate) {
    for (const std::string& a : ablate) {
        if (a == "no-tsg") {
            cfg.ablations.use_tsg = false;
        } else if (a == "no-cac") {
            cfg.ablations.use_cac = false;
        } else if (a == "no-toc") {
            cfg.ablations.use_toc = false;
        } else {
            throw config_error("unknown ablation: " + a + " (expected no-tsg, no-cac or no-toc)");
        }
    }
    cfg.validate();
}

SamplerConfig make_sampler(const std::string& kind, int top_k, double temperature, int vocab) {
    SamplerConfig s;
    s.kind = kind == "topk" ? SamplerConfig::Kind::topk : SamplerConfig::Kind::argmax;
    s.top_k = top_k;
    s.temperature = temperature;
    s.validate(vocab);
    return s;
}

int run_synth(int count, const std::string& out, std::uint64_t seed, double train_frac,
              int hr_size, int scale) {
    log_line("synth seed " + std::to_string(seed));
    std::string manifest = synth_corpus(out, count, seed, train_frac, hr_size, scale);
    log_line("wrote " + std::to_string(count) + " pairs, manifest " + manifest);
    return 0;
}

int run_train_vqvae(const std::string& config, const std::string& out) {
    ExperimentConfig cfg = load_and_log(config);
    TrainResult r = train_vqvae(cfg, out);
    log_line("vqvae checkpoint " + r.ckpt_stem + " final total " + fmt_double(r.curve.back().back()));
    return 0;
}

int run_train_ar(const std::string& config, const std::string& vqvae_stem, const std::string& out,
                 const std::vector<std::string>& ablate) {
    ExperimentConfig cfg = load_and_log(config);
    apply_ablations(cfg, ablate);
    Checkpoint vq = load_checkpoint(vqvae_stem);
    TrainResult r = train_ar(cfg, vq, out);
    log_line("ar checkpoint " + r.ckpt_stem + " final total " + fmt_double(r.curve.back().back()));
    return 0;
}

int run_infer(const std::string& config, const std::string& ckpt_stem, const std::string& lr_path,
              const std::string& out_path, const std::string& sampler, int top_k,
              double temperature, std::uint64_t seed, const std::string& dump_guidance,
              const std::vector<std::string>& ablate) {
    ExperimentConfig cfg = load_and_log(config);
    apply_ablations(cfg, ablate);
    Model m = init_model(cfg);
    restore(m, load_checkpoint(ckpt_stem));
    Image lr = load_image(lr_path);
    SamplerConfig sc = make_sampler(sampler, top_k, temperature, cfg.quantizer.codebook_size);
    Image sr = infer(m, lr, sc, seed);
    std::string dest = out_path;
    if (dest.empty()) {
        // default next to the input: s00012_LR.png -> s00012_SR.png
        fs::path p(lr_path);
        std::string stem = p.stem().string();
        if (stem.size() >= 3 && stem.compare(stem.size() - 3, 3, "_LR") == 0)
            stem.resize(stem.size() - 3);
        dest = (p.parent_path() / (stem + "_SR.png")).string();
    }
    if (fs::path(dest).has_parent_path()) fs::create_directories(fs::path(dest).parent_path());
    save_image(sr, dest);
    log_line("wrote " + dest);
    if (!dump_guidance.empty()) {
        fs::create_directories(dump_guidance);
        GuidanceMaps maps = guidance_maps(m, lr);
        save_image(maps.heat, (fs::path(dump_guidance) / "heat.png").string());
        save_image(maps.edge, (fs::path(dump_guidance) / "edge.png").string());
        log_line("wrote guidance maps under " + dump_guidance);
    }
    return 0;
}

int run_eval(const std::string& pred_dir, const std::string& manifest_path,
             const std::string& report, const std::string& split, const std::string& config,
             const std::string& checkpoint_id) {
    Manifest all = load_manifest(manifest_path);
    Manifest part;
    part.root = all.root;
    part.version = all.version;
    for (const auto& r : all.records) {
        if (split == "all" || (split == "train" && r.split == Split::train) ||
            (split == "test" && r.split == Split::test))
            part.records.push_back(r);
    }
    EvalReport rep = eval_corpus(pred_dir, part);
    rep.checkpoint_id = checkpoint_id;
    if (!config.empty()) {
        ExperimentConfig cfg = load_and_log(config);
        rep.config_hash = cfg.hash();
    }
    log_line("eval " + std::to_string(rep.rows.size()) + " scored, " +
             std::to_string(rep.missing.size()) + " missing (split " + split + ")");
    std::fputs((report == "csv" ? rep.to_csv() : rep.to_json()).c_str(), stdout);
    return 0;
}

int run_profile(const std::string& image_path, int row, const std::string& out_path) {
    Image img = load_image(image_path);
    if (row < 0 || row >= img.h)
        throw validation_error("row " + std::to_string(row) + " outside image height " +
                               std::to_string(img.h));
    std::string csv = "column,intensity\n";
    for (int j = 0; j < img.w; ++j)
        csv += std::to_string(j) + "," + fmt_double(img.at(row, j)) + "\n";
    if (out_path.empty()) {
        std::fputs(csv.c_str(), stdout);
    } else {
        std::ofstream f(out_path, std::ios::binary);
        if (!f) throw io_error("cannot open for writing: " + out_path);
        f << csv;
        log_line("wrote " + out_path);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"thermal image super-resolution toolkit"};
    app.require_subcommand(1);

    // synth
    auto* synth = app.add_subcommand("synth", "write a synthetic LR/HR corpus with a manifest");
    int s_count = 16;
    std::string s_out;
    std::uint64_t s_seed = 0;
    double s_frac = 0.9;
    int s_hr = 64, s_scale = 4;
    synth->add_option("--count", s_count, "number of pairs")->required();
    synth->add_option("--out", s_out, "output directory")->required();
    synth->add_option("--seed", s_seed, "corpus seed")->required();
    synth->add_option("--train-frac", s_frac, "train split fraction (default 0.9)");
    synth->add_option("--hr-size", s_hr, "HR image size (default 64)");
    synth->add_option("--scale", s_scale, "downscale factor (default 4)");

    // train-vqvae
    auto* tvq = app.add_subcommand("train-vqvae", "stage 1: train the autoencoder and codebook");
    std::string tvq_config, tvq_out;
    tvq->add_option("--config", tvq_config, "experiment TOML")->required();
    tvq->add_option("--out", tvq_out, "output directory")->required();

    // train-ar
    auto* tar = app.add_subcommand("train-ar", "stage 2: train guidance, modulation and generator");
    std::string tar_config, tar_vqvae, tar_out;
    std::vector<std::string> tar_ablate;
    tar->add_option("--config", tar_config, "experiment TOML")->required();
    tar->add_option("--vqvae", tar_vqvae, "stage-1 checkpoint stem")->required();
    tar->add_option("--out", tar_out, "output directory")->required();
    tar->add_option("--ablate", tar_ablate, "disable a path: no-tsg, no-cac, no-toc (repeatable)");

    // infer
    auto* inf = app.add_subcommand("infer", "super-resolve one LR image");
    std::string i_config, i_ckpt, i_lr, i_out, i_dump;
    std::string i_sampler = "argmax";
    int i_topk = 1;
    double i_temp = 1.0;
    std::uint64_t i_seed = 0;
    std::vector<std::string> i_ablate;
    inf->add_option("--config", i_config, "experiment TOML")->required();
    inf->add_option("--ckpt", i_ckpt, "stage-2 checkpoint stem")->required();
    inf->add_option("--lr", i_lr, "input LR image (PNG)")->required();
    inf->add_option("--out", i_out, "output SR image (PNG)");
    inf->add_option("--sampler", i_sampler, "argmax or topk")
        ->check(CLI::IsMember({"argmax", "topk"}));
    inf->add_option("--top-k", i_topk, "top-k cutoff for the topk sampler");
    inf->add_option("--temperature", i_temp, "softmax temperature for the topk sampler");
    inf->add_option("--seed", i_seed, "sampling seed");
    inf->add_option("--dump-guidance", i_dump, "directory for heat.png / edge.png of the input");
    inf->add_option("--ablate", i_ablate, "must match the flags the checkpoint was trained with");

    // eval
    auto* ev = app.add_subcommand("eval", "score <id>_SR.png predictions against a manifest");
    std::string e_pred, e_manifest, e_config, e_ckpt_id;
    std::string e_report = "json", e_split = "test";
    ev->add_option("--pred-dir", e_pred, "directory of prediction PNGs")->required();
    ev->add_option("--manifest", e_manifest, "corpus manifest")->required();
    ev->add_option("--report", e_report, "json or csv (stdout)")
        ->check(CLI::IsMember({"json", "csv"}));
    ev->add_option("--split", e_split, "which records to score (default test)")
        ->check(CLI::IsMember({"train", "test", "all"}));
    ev->add_option("--config", e_config, "stamp this experiment's hash into the report");
    ev->add_option("--checkpoint-id", e_ckpt_id, "free-form checkpoint label for the report");

    // profile
    auto* prof = app.add_subcommand("profile", "export one scanline as CSV");
    std::string p_image, p_out;
    int p_row = 0;
    prof->add_option("--image", p_image, "grayscale PNG")->required();
    prof->add_option("--row", p_row, "scanline index")->required();
    prof->add_option("--out", p_out, "CSV path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (synth->parsed()) return run_synth(s_count, s_out, s_seed, s_frac, s_hr, s_scale);
        if (tvq->parsed()) return run_train_vqvae(tvq_config, tvq_out);
        if (tar->parsed()) return run_train_ar(tar_config, tar_vqvae, tar_out, tar_ablate);
        if (inf->parsed())
            return run_infer(i_config, i_ckpt, i_lr, i_out, i_sampler, i_topk, i_temp, i_seed,
                             i_dump, i_ablate);
        if (ev->parsed()) return run_eval(e_pred, e_manifest, e_report, e_split, e_config, e_ckpt_id);
        if (prof->parsed()) return run_profile(p_image, p_row, p_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "thermosr: error: %s\n", e.what());
        return 1;
    }
    return 2;
}
