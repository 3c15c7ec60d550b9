#include "thermosr/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <json.hpp>

#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/toml.hpp"

namespace thermosr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Defocus share of the reference acquisition campaign the synthetic corpus
// imitates (1305 of 1457 captures).
constexpr double kDefocusShare = 1305.0 / 1457.0;

constexpr double kPi = 3.14159265358979323846;

// Shortest decimal representation that round-trips.
std::string fmt_double(double v) {
    char buf[32];
    auto r = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, r.ptr);
}

std::string toml_quote(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out.push_back('\\');
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

std::string fmt_int_array(const std::vector<int>& v) {
    std::string out = "[";
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ", ";
        out += std::to_string(v[i]);
    }
    return out + "]";
}

ad::Var mean_sq_diff(const ad::Var& a, const ad::Var& b) {
    ad::Var d = ad::sub(a, b);
    return ad::mean_all(ad::mul(d, d));
}

// Guidance token matrix: the real pipeline, or one learned row broadcast to
// the prefix length when the guidance path is ablated away.
ad::Var guidance_input(const Model& m, const Image& lr) {
    if (m.cfg.ablations.use_tsg) return guidance_tokens(lr, m.guidance, m.cfg.guidance);
    ad::Var ones = ad::constant(Tensor::full({m.cfg.prefix_len(), 1}, 1.0));
    return ad::matmul(ones, m.tsg_const);
}

void write_curve_csv(const std::string& path, const std::vector<std::string>& header,
                     const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw io_error("cannot write loss curve: " + path);
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out << ",";
            if (i == 0)
                out << static_cast<long long>(row[0]);
            else
                out << fmt_double(row[i]);
        }
        out << "\n";
    }
    if (!out) throw io_error("failed writing loss curve: " + path);
}

// Batched (lr, hr) image pairs: the in-memory synthetic corpus, or training
// crops streamed from a manifest. Epoch order is derived from the seed.
class PairStream {
public:
    explicit PairStream(const ExperimentConfig& cfg) : cfg_(cfg) {
        if (cfg.manifest.empty()) {
            for (int i = 0; i < cfg.synth_count; ++i) {
                SynthSample s = make_synth_sample(cfg.seed, i, cfg.crop, cfg.scale);
                pairs_.emplace_back(std::move(s.pair.lr), std::move(s.pair.hr));
            }
            order_.resize(pairs_.size());
            for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
            reshuffle();
        } else {
            Manifest all = load_manifest(cfg.manifest);
            // The iterator keeps a pointer to its manifest, so the filtered
            // train split must live as long as the stream.
            train_.root = all.root;
            train_.version = all.version;
            for (const auto& r : all.records)
                if (r.split == Split::train) train_.records.push_back(r);
            if (train_.records.empty())
                throw validation_error("manifest has no training records: " + cfg.manifest);
            it_.emplace(train_, cfg.batch, cfg.crop, cfg.crop, cfg.scale,
                        derive_seed(cfg.seed, "data"));
            it_->start_epoch(0);
        }
    }

    void next(std::vector<Image>& lr, std::vector<Image>& hr) {
        lr.clear();
        hr.clear();
        if (it_) {
            Batch b;
            if (!it_->next(b)) {
                it_->start_epoch(++epoch_);
                if (!it_->next(b))
                    throw validation_error("training set yields no usable crops");
            }
            const int bs = b.lr.shape[0];
            const int lh = b.lr.shape[2], lw = b.lr.shape[3];
            const int hh = b.hr.shape[2], hw = b.hr.shape[3];
            for (int e = 0; e < bs; ++e) {
                Image li(lh, lw), hi(hh, hw);
                for (int i = 0; i < lh; ++i)
                    for (int j = 0; j < lw; ++j) li.at(i, j) = b.lr.at(e, 0, i, j);
                for (int i = 0; i < hh; ++i)
                    for (int j = 0; j < hw; ++j) hi.at(i, j) = b.hr.at(e, 0, i, j);
                lr.push_back(std::move(li));
                hr.push_back(std::move(hi));
            }
            return;
        }
        for (int k = 0; k < cfg_.batch; ++k) {
            if (pos_ == order_.size()) {
                ++epoch_;
                reshuffle();
            }
            lr.push_back(pairs_[static_cast<std::size_t>(order_[pos_])].first);
            hr.push_back(pairs_[static_cast<std::size_t>(order_[pos_])].second);
            ++pos_;
        }
    }

private:
    void reshuffle() {
        Rng r(derive_seed(cfg_.seed, "order", static_cast<std::uint64_t>(epoch_)));
        r.shuffle(order_);
        pos_ = 0;
    }

    ExperimentConfig cfg_;
    Manifest train_;
    std::vector<std::pair<Image, Image>> pairs_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
    long epoch_ = 0;
    std::optional<BatchIterator> it_;
};

}  // namespace

BackboneConfig ExperimentConfig::backbone() const {
    BackboneConfig b;
    b.layers = backbone_layers;
    b.width = backbone_width;
    b.heads = backbone_heads;
    b.scales = quantizer.scales;
    b.vocab = quantizer.codebook_size;
    b.cond_dim = guidance.attn_dim;
    b.dropout = backbone_dropout;
    return b;
}

void ExperimentConfig::validate() const {
    guidance.validate();
    quantizer.validate();
    backbone().validate();
    if (losses.lambda1 < 0.0 || losses.lambda2 < 0.0)
        throw config_error("loss weights must be >= 0");
    if (losses.toc_patch < 1) throw config_error("toc_patch must be >= 1");
    if (crop < 16 || crop % 8 != 0)
        throw config_error("crop must be >= 16 and divisible by 8 (three stride-2 encoder stages)");
    if (scale < 1 || crop % scale != 0) throw config_error("crop must be a multiple of scale");
    if (lr_size() < 2 || lr_size() % 2 != 0)
        throw config_error("crop/scale must be even (guidance encoder halves the LR grid)");
    if (quantizer.scales.back() != latent_size())
        throw config_error("finest quantizer scale must equal crop/8, got " +
                           std::to_string(quantizer.scales.back()) + " for crop " +
                           std::to_string(crop));
    if (lr <= 0.0 || vqvae_lr <= 0.0) throw config_error("learning rates must be > 0");
    if (weight_decay < 0.0) throw config_error("weight_decay must be >= 0");
    if (batch < 1) throw config_error("batch must be >= 1");
    if (iterations < 1 || vqvae_iterations < 1) throw config_error("iterations must be >= 1");
    if (manifest.empty() && synth_count < 1)
        throw config_error("synth_count must be >= 1 when no manifest is given");
}

// The architecture part of the dump: everything that determines parameter
// shapes and the forward wiring, nothing about how training was driven.
static std::string canonical_arch(const ExperimentConfig& c) {
    std::ostringstream o;
    o << "[data]\n";
    o << "crop = " << c.crop << "\n";
    o << "scale = " << c.scale << "\n";
    o << "\n[guidance]\n";
    o << "heat_quantile = " << fmt_double(c.guidance.heat_quantile) << "\n";
    o << "heat_smooth_sigma = " << fmt_double(c.guidance.heat_smooth_sigma) << "\n";
    o << "encoder_width = " << c.guidance.encoder_width << "\n";
    o << "attn_dim = " << c.guidance.attn_dim << "\n";
    o << "heads = " << c.guidance.heads << "\n";
    o << "\n[quantizer]\n";
    o << "codebook_size = " << c.quantizer.codebook_size << "\n";
    o << "code_dim = " << c.quantizer.code_dim << "\n";
    o << "cond_rank = " << c.quantizer.cond_rank << "\n";
    o << "vq_width = " << c.quantizer.vq_width << "\n";
    o << "scales = " << fmt_int_array(c.quantizer.scales) << "\n";
    o << "\n[backbone]\n";
    o << "layers = " << c.backbone_layers << "\n";
    o << "width = " << c.backbone_width << "\n";
    o << "heads = " << c.backbone_heads << "\n";
    o << "dropout = " << fmt_double(c.backbone_dropout) << "\n";
    return o.str();
}

std::string ExperimentConfig::canonical() const {
    std::ostringstream o;
    o << "seed = " << seed << "\n";
    o << "\n[data]\n";
    o << "manifest = " << toml_quote(manifest) << "\n";
    o << "synth_count = " << synth_count << "\n";
    o << canonical_arch(*this).substr(7);  // drop the duplicate "[data]\n" header
    o << "\n[losses]\n";
    o << "lambda1 = " << fmt_double(losses.lambda1) << "\n";
    o << "lambda2 = " << fmt_double(losses.lambda2) << "\n";
    o << "toc_patch = " << losses.toc_patch << "\n";
    o << "\n[optimizer]\n";
    o << "lr = " << fmt_double(lr) << "\n";
    o << "vqvae_lr = " << fmt_double(vqvae_lr) << "\n";
    o << "weight_decay = " << fmt_double(weight_decay) << "\n";
    o << "batch = " << batch << "\n";
    o << "iterations = " << iterations << "\n";
    o << "vqvae_iterations = " << vqvae_iterations << "\n";
    o << "unfreeze_decoder = " << (unfreeze_decoder ? "true" : "false") << "\n";
    o << "\n[ablations]\n";
    o << "use_tsg = " << (ablations.use_tsg ? "true" : "false") << "\n";
    o << "use_cac = " << (ablations.use_cac ? "true" : "false") << "\n";
    o << "use_toc = " << (ablations.use_toc ? "true" : "false") << "\n";
    return o.str();
}

static std::string hex16(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string ExperimentConfig::hash() const { return hex16(fnv1a64(canonical())); }

ExperimentConfig config_from_toml_text(const std::string& text) {
    TomlReader r(parse_toml_text(text));
    ExperimentConfig c;

    const long long seed = r.integer("seed", static_cast<long long>(c.seed));
    if (seed < 0) throw config_error("seed must be >= 0");
    c.seed = static_cast<std::uint64_t>(seed);

    c.manifest = r.str("data.manifest", c.manifest);
    c.synth_count = static_cast<int>(r.integer("data.synth_count", c.synth_count));
    c.crop = static_cast<int>(r.integer("data.crop", c.crop));
    c.scale = static_cast<int>(r.integer("data.scale", c.scale));

    c.guidance.heat_quantile = r.number("guidance.heat_quantile", c.guidance.heat_quantile);
    c.guidance.heat_smooth_sigma =
        r.number("guidance.heat_smooth_sigma", c.guidance.heat_smooth_sigma);
    c.guidance.encoder_width =
        static_cast<int>(r.integer("guidance.encoder_width", c.guidance.encoder_width));
    c.guidance.attn_dim = static_cast<int>(r.integer("guidance.attn_dim", c.guidance.attn_dim));
    c.guidance.heads = static_cast<int>(r.integer("guidance.heads", c.guidance.heads));

    c.quantizer.codebook_size =
        static_cast<int>(r.integer("quantizer.codebook_size", c.quantizer.codebook_size));
    c.quantizer.code_dim = static_cast<int>(r.integer("quantizer.code_dim", c.quantizer.code_dim));
    c.quantizer.cond_rank =
        static_cast<int>(r.integer("quantizer.cond_rank", c.quantizer.cond_rank));
    c.quantizer.vq_width = static_cast<int>(r.integer("quantizer.vq_width", c.quantizer.vq_width));
    c.quantizer.scales = r.int_array("quantizer.scales", c.quantizer.scales);

    c.backbone_layers = static_cast<int>(r.integer("backbone.layers", c.backbone_layers));
    c.backbone_width = static_cast<int>(r.integer("backbone.width", c.backbone_width));
    c.backbone_heads = static_cast<int>(r.integer("backbone.heads", c.backbone_heads));
    c.backbone_dropout = r.number("backbone.dropout", c.backbone_dropout);

    c.losses.lambda1 = r.number("losses.lambda1", c.losses.lambda1);
    c.losses.lambda2 = r.number("losses.lambda2", c.losses.lambda2);
    c.losses.toc_patch = static_cast<int>(r.integer("losses.toc_patch", c.losses.toc_patch));

    c.lr = r.number("optimizer.lr", c.lr);
    c.vqvae_lr = r.number("optimizer.vqvae_lr", c.vqvae_lr);
    c.weight_decay = r.number("optimizer.weight_decay", c.weight_decay);
    c.batch = static_cast<int>(r.integer("optimizer.batch", c.batch));
    c.iterations = static_cast<int>(r.integer("optimizer.iterations", c.iterations));
    c.vqvae_iterations =
        static_cast<int>(r.integer("optimizer.vqvae_iterations", c.vqvae_iterations));
    c.unfreeze_decoder = r.boolean("optimizer.unfreeze_decoder", c.unfreeze_decoder);

    c.ablations.use_tsg = r.boolean("ablations.use_tsg", c.ablations.use_tsg);
    c.ablations.use_cac = r.boolean("ablations.use_cac", c.ablations.use_cac);
    c.ablations.use_toc = r.boolean("ablations.use_toc", c.ablations.use_toc);

    r.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw config_error("cannot open config: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_toml_text(ss.str());
}

Model init_model(const ExperimentConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng grng(derive_seed(cfg.seed, "guidance"));
    m.guidance = init_guidance(cfg.guidance, grng);
    m.tsg_const = ad::leaf(Tensor::zeros({1, cfg.guidance.attn_dim}));
    Rng crng(derive_seed(cfg.seed, "cond"));
    m.cond_proj = init_cond_proj(cfg.guidance.attn_dim, cfg.quantizer.cond_rank, crng);
    Rng qrng(derive_seed(cfg.seed, "vqvae"));
    m.vqvae = init_vqvae(cfg.quantizer, qrng);
    Rng brng(derive_seed(cfg.seed, "backbone"));
    m.backbone = init_backbone(cfg.backbone(), cfg.prefix_len(), brng);
    return m;
}

std::vector<std::pair<std::string, ad::Var>> named_params(const Model& m) {
    std::vector<std::pair<std::string, ad::Var>> out;
    auto add = [&out](const std::string& name, const ad::Var& v) { out.emplace_back(name, v); };

    auto add_encoder = [&](const std::string& p, const EncoderParams& e) {
        add(p + ".w1", e.w1);
        add(p + ".b1", e.b1);
        add(p + ".w2", e.w2);
        add(p + ".b2", e.b2);
    };
    add_encoder("guidance.enc_heat", m.guidance.enc_heat);
    add_encoder("guidance.enc_edge", m.guidance.enc_edge);
    add_encoder("guidance.enc_lr", m.guidance.enc_lr);
    add("guidance.gate.dw_w", m.guidance.gate.dw_w);
    add("guidance.gate.dw_b", m.guidance.gate.dw_b);
    add("guidance.gate.mlp_w1", m.guidance.gate.mlp_w1);
    add("guidance.gate.mlp_b1", m.guidance.gate.mlp_b1);
    add("guidance.gate.mlp_w2", m.guidance.gate.mlp_w2);
    add("guidance.gate.mlp_b2", m.guidance.gate.mlp_b2);
    add("guidance.gate.wq", m.guidance.gate.wq);
    add("guidance.gate.wk", m.guidance.gate.wk);
    add("guidance.gate.wv", m.guidance.gate.wv);
    add("guidance.tsg_const", m.tsg_const);

    add("cond_proj.w", m.cond_proj.w);
    add("cond_proj.b", m.cond_proj.b);

    add("vqvae.enc.w1", m.vqvae.enc.w1);
    add("vqvae.enc.b1", m.vqvae.enc.b1);
    add("vqvae.enc.w2", m.vqvae.enc.w2);
    add("vqvae.enc.b2", m.vqvae.enc.b2);
    add("vqvae.enc.w3", m.vqvae.enc.w3);
    add("vqvae.enc.b3", m.vqvae.enc.b3);
    add("vqvae.dec.w1", m.vqvae.dec.w1);
    add("vqvae.dec.b1", m.vqvae.dec.b1);
    add("vqvae.dec.w2", m.vqvae.dec.w2);
    add("vqvae.dec.b2", m.vqvae.dec.b2);
    add("vqvae.dec.w3", m.vqvae.dec.w3);
    add("vqvae.dec.b3", m.vqvae.dec.b3);
    add("codebook.z", m.vqvae.cb.z);
    add("codebook.u", m.vqvae.cb.u);
    add("codebook.v", m.vqvae.cb.v);
    add("codebook.alpha", m.vqvae.cb.alpha);

    add("backbone.in_proj_w", m.backbone.in_proj_w);
    add("backbone.in_proj_b", m.backbone.in_proj_b);
    add("backbone.prefix_pos", m.backbone.prefix_pos);
    add("backbone.tok_emb", m.backbone.tok_emb);
    add("backbone.start_emb", m.backbone.start_emb);
    add("backbone.scale_emb", m.backbone.scale_emb);
    for (std::size_t k = 0; k < m.backbone.pos_emb.size(); ++k)
        add("backbone.pos_emb." + std::to_string(k), m.backbone.pos_emb[k]);
    for (std::size_t i = 0; i < m.backbone.blocks.size(); ++i) {
        const std::string p = "backbone.blocks." + std::to_string(i);
        const AttentionBlockParams& b = m.backbone.blocks[i];
        add(p + ".ln1_g", b.ln1_g);
        add(p + ".ln1_b", b.ln1_b);
        add(p + ".wq", b.wq);
        add(p + ".bq", b.bq);
        add(p + ".wk", b.wk);
        add(p + ".bk", b.bk);
        add(p + ".wv", b.wv);
        add(p + ".bv", b.bv);
        add(p + ".wo", b.wo);
        add(p + ".bo", b.bo);
        add(p + ".ln2_g", b.ln2_g);
        add(p + ".ln2_b", b.ln2_b);
        add(p + ".mlp_w1", b.mlp_w1);
        add(p + ".mlp_b1", b.mlp_b1);
        add(p + ".mlp_w2", b.mlp_w2);
        add(p + ".mlp_b2", b.mlp_b2);
    }
    add("backbone.final_g", m.backbone.final_g);
    add("backbone.final_b", m.backbone.final_b);
    add("backbone.head_w", m.backbone.head_w);
    add("backbone.head_b", m.backbone.head_b);
    return out;
}

std::vector<ad::Var> vqvae_stage_params(const Model& m) {
    std::vector<ad::Var> out;
    for (const auto& [name, v] : named_params(m))
        if (name.rfind("vqvae.", 0) == 0 || name == "codebook.z") out.push_back(v);
    return out;
}

std::vector<ad::Var> ar_stage_params(const Model& m) {
    // The autoencoder and the embedding table stay frozen; what trains is
    // the guidance path (or its learned stand-in), the condition-adaptive
    // modulation, and the generator. The decoder can be unfrozen by config.
    const AblationFlags& a = m.cfg.ablations;
    std::vector<ad::Var> out;
    for (const auto& [name, v] : named_params(m)) {
        const bool is_guidance = name.rfind("guidance.", 0) == 0 && name != "guidance.tsg_const";
        const bool is_tsg_const = name == "guidance.tsg_const";
        const bool is_cac = name == "codebook.u" || name == "codebook.v" ||
                            name == "codebook.alpha" || name.rfind("cond_proj.", 0) == 0;
        const bool is_backbone = name.rfind("backbone.", 0) == 0;
        const bool is_decoder = name.rfind("vqvae.dec.", 0) == 0;
        bool take = false;
        if (is_guidance) take = a.use_tsg;
        if (is_tsg_const) take = !a.use_tsg;
        if (is_cac) take = a.use_cac;
        if (is_backbone) take = true;
        if (is_decoder) take = m.cfg.unfreeze_decoder;
        if (take) out.push_back(v);
    }
    return out;
}

void save_checkpoint(const Checkpoint& c, const std::string& stem) {
    json side;
    side["config_hash"] = c.config_hash;
    side["arch_hash"] = c.arch_hash;
    side["iteration"] = c.iteration;
    json plist = json::array();
    long long offset = 0;
    for (const auto& [name, t] : c.params) {
        json e;
        e["name"] = name;
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["count"] = t.numel();
        plist.push_back(e);
        offset += t.numel();
    }
    side["params"] = plist;

    std::ofstream js(stem + ".json", std::ios::binary);
    if (!js) throw io_error("cannot write checkpoint sidecar: " + stem + ".json");
    js << side.dump(2) << "\n";
    if (!js) throw io_error("failed writing checkpoint sidecar");

    // Raw little-endian doubles in sidecar order (this project targets
    // little-endian hosts; the sidecar is the source of truth for layout).
    std::ofstream bin(stem + ".bin", std::ios::binary);
    if (!bin) throw io_error("cannot write checkpoint data: " + stem + ".bin");
    for (const auto& [name, t] : c.params)
        bin.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!bin) throw io_error("failed writing checkpoint data");
}

Checkpoint load_checkpoint(const std::string& stem) {
    std::ifstream js(stem + ".json", std::ios::binary);
    if (!js) throw io_error("cannot open checkpoint sidecar: " + stem + ".json");
    json side;
    try {
        js >> side;
    } catch (const std::exception& e) {
        throw validation_error(std::string("malformed checkpoint sidecar: ") + e.what());
    }

    Checkpoint c;
    try {
        c.config_hash = side.at("config_hash").get<std::string>();
        c.arch_hash = side.at("arch_hash").get<std::string>();
        c.iteration = side.at("iteration").get<long>();

        std::ifstream bin(stem + ".bin", std::ios::binary | std::ios::ate);
        if (!bin) throw io_error("cannot open checkpoint data: " + stem + ".bin");
        const std::streamsize bytes = bin.tellg();
        bin.seekg(0);

        long long expect = 0;
        for (const auto& e : side.at("params")) expect += e.at("count").get<long long>();
        if (bytes != expect * static_cast<long long>(sizeof(double)))
            throw validation_error("checkpoint data size does not match sidecar");

        for (const auto& e : side.at("params")) {
            const std::string name = e.at("name").get<std::string>();
            const std::vector<int> shape = e.at("shape").get<std::vector<int>>();
            const long long count = e.at("count").get<long long>();
            Tensor t(shape);
            if (t.numel() != count)
                throw validation_error("checkpoint entry " + name + " has inconsistent layout");
            bin.seekg(e.at("offset").get<long long>() *
                      static_cast<long long>(sizeof(double)));
            bin.read(reinterpret_cast<char*>(t.data.data()),
                     static_cast<std::streamsize>(t.data.size() * sizeof(double)));
            if (!bin) throw validation_error("checkpoint data truncated at " + name);
            c.params.emplace_back(name, std::move(t));
        }
    } catch (const json::exception& e) {
        throw validation_error(std::string("malformed checkpoint sidecar: ") + e.what());
    }
    return c;
}

Checkpoint snapshot(const Model& m, long iteration) {
    Checkpoint c;
    c.config_hash = m.cfg.hash();
    c.arch_hash = hex16(fnv1a64(canonical_arch(m.cfg)));
    c.iteration = iteration;
    for (const auto& [name, v] : named_params(m)) c.params.emplace_back(name, v->value);
    std::sort(c.params.begin(), c.params.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return c;
}

void restore(Model& m, const Checkpoint& c) {
    const std::string want = hex16(fnv1a64(canonical_arch(m.cfg)));
    if (c.arch_hash != want)
        throw validation_error("checkpoint was built for a different architecture (arch hash " +
                               c.arch_hash + ", config needs " + want + ")");
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : c.params) by_name[name] = &t;
    auto np = named_params(m);
    if (by_name.size() != np.size())
        throw validation_error("checkpoint parameter count differs from the model");
    for (auto& [name, v] : np) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw validation_error("checkpoint is missing parameter " + name);
        if (it->second->shape != v->value.shape)
            throw validation_error("checkpoint parameter " + name + " has shape " +
                                   it->second->shape_str() + ", model expects " +
                                   v->value.shape_str());
        v->value = *it->second;
    }
}

AdamW::AdamW(std::vector<ad::Var> params, double lr, double weight_decay)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay) {
    if (lr_ <= 0.0) throw config_error("AdamW: lr must be > 0");
    if (wd_ < 0.0) throw config_error("AdamW: weight_decay must be >= 0");
    for (const auto& p : params_) {
        m_.push_back(Tensor(p->value.shape));
        v_.push_back(Tensor(p->value.shape));
    }
}

void AdamW::zero_grads() {
    for (const auto& p : params_) p->zero_grad();
}

void AdamW::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        ad::Node& n = *params_[i];
        n.ensure_grad();
        auto& val = n.value.data;
        const auto& g = n.grad.data;
        auto& mm = m_[i].data;
        auto& vv = v_[i].data;
        for (std::size_t e = 0; e < val.size(); ++e) {
            mm[e] = 0.9 * mm[e] + 0.1 * g[e];
            vv[e] = 0.999 * vv[e] + 0.001 * g[e] * g[e];
            const double mhat = mm[e] / bc1;
            const double vhat = vv[e] / bc2;
            // Decoupled decay: the regularizer never enters the moments.
            val[e] -= lr_ * (mhat / (std::sqrt(vhat) + 1e-8) + wd_ * val[e]);
        }
    }
}

SynthSample make_synth_sample(std::uint64_t corpus_seed, int index, int hr_size, int scale) {
    Rng rng(derive_seed(corpus_seed, "sample", static_cast<std::uint64_t>(index)));
    DegradationSpec spec;
    spec.kind = rng.uniform() < kDefocusShare ? DegradationKind::defocus : DegradationKind::motion;
    spec.defocus_radius = rng.uniform(0.5, 6.0);
    spec.motion_length = rng.uniform(3.0, 15.0);
    spec.motion_angle = rng.uniform(0.0, kPi);
    spec.noise_sigma = 0.01;
    spec.scale = scale;
    spec.seed = derive_seed(corpus_seed, "noise", static_cast<std::uint64_t>(index));

    SynthSample s;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "s%05d", index);
    s.id = buf;
    const Image hr = synth_scene(derive_seed(corpus_seed, "scene", static_cast<std::uint64_t>(index)),
                                 hr_size, hr_size);
    s.pair = degrade_pair(hr, spec);

    const auto& vocab = scene_vocabulary();
    const int v = static_cast<int>(vocab.size());
    const int first = rng.uniform_int(v);
    s.scenes.push_back(vocab[static_cast<std::size_t>(first)]);
    if (rng.uniform() < 0.3) {
        const int second = (first + 1 + rng.uniform_int(v - 1)) % v;
        s.scenes.push_back(vocab[static_cast<std::size_t>(second)]);
    }
    return s;
}

std::string synth_corpus(const std::string& out_dir, int count, std::uint64_t corpus_seed,
                         double train_frac, int hr_size, int scale) {
    if (count < 1) throw config_error("synth_corpus: count must be >= 1");
    fs::create_directories(out_dir);

    Manifest m;
    m.root = out_dir;
    m.version = "1";
    for (int i = 0; i < count; ++i) {
        SynthSample s = make_synth_sample(corpus_seed, i, hr_size, scale);
        save_image(s.pair.hr, (fs::path(out_dir) / (s.id + "_HR.png")).string());
        save_image(s.pair.lr, (fs::path(out_dir) / (s.id + "_LR.png")).string());
        SampleRecord r;
        r.id = s.id;
        r.lr_path = s.id + "_LR.png";
        r.hr_path = s.id + "_HR.png";
        r.degradation = s.pair.kind;
        r.scenes = s.scenes;
        r.split = Split::train;
        m.records.push_back(std::move(r));
    }

    auto [train, test] = split_manifest(m, train_frac, derive_seed(corpus_seed, "split"));
    std::map<std::string, Split> split_of;
    for (const auto& r : train.records) split_of[r.id] = Split::train;
    for (const auto& r : test.records) split_of[r.id] = Split::test;
    for (auto& r : m.records) r.split = split_of.at(r.id);

    const std::string manifest_path = (fs::path(out_dir) / "manifest.jsonl").string();
    save_manifest(m, manifest_path);
    return manifest_path;
}

TrainResult train_vqvae(const ExperimentConfig& cfg, const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    Model model = init_model(cfg);
    PairStream stream(cfg);
    AdamW opt(vqvae_stage_params(model), cfg.vqvae_lr, cfg.weight_decay);

    const Tensor zero_cond = Tensor::zeros({cfg.quantizer.cond_rank});
    const ad::Var zero_cond_var = ad::constant(zero_cond);

    TrainResult res;
    res.curve_header = {"iteration", "recon", "codebook", "commit", "total"};
    std::vector<Image> lr, hr;
    for (int it = 0; it < cfg.vqvae_iterations; ++it) {
        stream.next(lr, hr);
        opt.zero_grads();
        ad::Var total;
        double recon_v = 0.0, cb_v = 0.0, commit_v = 0.0;
        for (std::size_t s = 0; s < hr.size(); ++s) {
            const Tensor x_chw = to_chw(hr[s]);
            ad::Var x = ad::constant(x_chw);
            ad::Var f = vq_encode(x, model.vqvae.enc);
            TokenMap tm = encode_multiscale(f->value, model.vqvae.cb, zero_cond,
                                            cfg.quantizer.scales, /*use_cac=*/false);
            ad::Var f_hat =
                reconstruct_tokens_ad(tm, model.vqvae.cb, zero_cond_var, /*use_cac=*/false);
            // Decoder sees the quantized features; its gradient reaches the
            // encoder through the straight-through step.
            ad::Var y = vq_decode(ad::straight_through(f, f_hat->value), model.vqvae.dec);
            ad::Var recon = mse_loss_ad(y, x_chw);
            ad::Var cb_term = mean_sq_diff(ad::stop_gradient(f), f_hat);
            ad::Var commit = ad::scale(mean_sq_diff(f, ad::constant(f_hat->value)), 0.25);
            ad::Var li = ad::add(recon, ad::add(cb_term, commit));
            recon_v += recon->value[0];
            cb_v += cb_term->value[0];
            commit_v += commit->value[0];
            total = total ? ad::add(total, li) : li;
        }
        const double inv = 1.0 / static_cast<double>(hr.size());
        total = ad::scale(total, inv);
        recon_v *= inv;
        cb_v *= inv;
        commit_v *= inv;
        const double tv = total->value[0];
        if (!std::isfinite(tv))
            throw validation_error("vqvae training diverged: non-finite loss at iteration " +
                                   std::to_string(it + 1));
        ad::backward(total);
        opt.step();
        res.curve.push_back({static_cast<double>(it + 1), recon_v, cb_v, commit_v, tv});
    }

    res.checkpoint = snapshot(model, cfg.vqvae_iterations);
    res.ckpt_stem = (fs::path(out_dir) / "vqvae").string();
    save_checkpoint(res.checkpoint, res.ckpt_stem);
    res.csv_path = (fs::path(out_dir) / "vqvae_loss.csv").string();
    write_curve_csv(res.csv_path, res.curve_header, res.curve);
    return res;
}

TrainResult train_ar(const ExperimentConfig& cfg, const Checkpoint& vqvae_ckpt,
                     const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(out_dir);
    Model model = init_model(cfg);
    restore(model, vqvae_ckpt);
    PairStream stream(cfg);
    AdamW opt(ar_stage_params(model), cfg.lr, cfg.weight_decay);
    auto all_params = named_params(model);

    const Tensor zero_cond = Tensor::zeros({cfg.quantizer.cond_rank});
    const BackboneConfig bcfg = cfg.backbone();

    TrainResult res;
    res.curve_header = {"iteration", "ce", "mse", "toc", "total"};
    std::vector<Image> lr, hr;
    for (int it = 0; it < cfg.iterations; ++it) {
        stream.next(lr, hr);
        // Zero every parameter, frozen ones included: gradients accumulate
        // on the tape and stale values would leak across iterations.
        for (auto& [name, p] : all_params) p->zero_grad();

        std::optional<Rng> drng;
        if (cfg.backbone_dropout > 0.0)
            drng.emplace(derive_seed(cfg.seed, "dropout", static_cast<std::uint64_t>(it)));

        ad::Var total;
        double ce_v = 0.0, mse_v = 0.0, toc_v = 0.0;
        for (std::size_t s = 0; s < hr.size(); ++s) {
            const Tensor x_chw = to_chw(hr[s]);
            ad::Var f_tsg = guidance_input(model, lr[s]);
            ad::Var cond = condition_vector(f_tsg, model.cond_proj);

            // Targets come from the frozen autoencoder under the static
            // table, so the token sequence is stable while guidance and
            // modulation train.
            ad::Var fx = vq_encode(ad::constant(x_chw), model.vqvae.enc);
            TokenMap tm = encode_multiscale(fx->value, model.vqvae.cb, zero_cond,
                                            cfg.quantizer.scales, /*use_cac=*/false);

            auto logits =
                forward_teacher_forced_ad(tm, f_tsg, bcfg, model.backbone, drng ? &*drng : nullptr);
            const double ntok = static_cast<double>(tm.total_tokens());
            ad::Var ce;
            for (int k = 0; k < tm.num_scales(); ++k) {
                const double nk = static_cast<double>(tm.scales[static_cast<std::size_t>(k)].h *
                                                      tm.scales[static_cast<std::size_t>(k)].w);
                ad::Var cek = ad::scale(
                    ad::cross_entropy_rows(logits[static_cast<std::size_t>(k)],
                                           tm.tokens[static_cast<std::size_t>(k)]),
                    nk / ntok);
                ce = ce ? ad::add(ce, cek) : cek;
            }

            ad::Var f_hat =
                reconstruct_tokens_ad(tm, model.vqvae.cb, cond, cfg.ablations.use_cac);
            ad::Var sr = vq_decode(f_hat, model.vqvae.dec);
            ad::Var mse = mse_loss_ad(sr, x_chw);
            ad::Var li = ad::add(ce, ad::scale(mse, cfg.losses.lambda1));
            ce_v += ce->value[0];
            mse_v += mse->value[0];
            if (cfg.ablations.use_toc) {
                ad::Var toc = toc_loss_ad(sr, x_chw, cfg.losses.toc_patch);
                li = ad::add(li, ad::scale(toc, cfg.losses.lambda2));
                toc_v += toc->value[0];
            }
            total = total ? ad::add(total, li) : li;
        }
        const double inv = 1.0 / static_cast<double>(hr.size());
        total = ad::scale(total, inv);
        ce_v *= inv;
        mse_v *= inv;
        toc_v *= inv;  // stays exactly 0 when the order term is ablated
        const double tv = total->value[0];
        if (!std::isfinite(tv))
            throw validation_error("ar training diverged: non-finite loss at iteration " +
                                   std::to_string(it + 1));
        ad::backward(total);
        opt.step();
        res.curve.push_back({static_cast<double>(it + 1), ce_v, mse_v, toc_v, tv});
    }

    res.checkpoint = snapshot(model, cfg.iterations);
    res.ckpt_stem = (fs::path(out_dir) / "ar").string();
    save_checkpoint(res.checkpoint, res.ckpt_stem);
    res.csv_path = (fs::path(out_dir) / "ar_loss.csv").string();
    write_curve_csv(res.csv_path, res.curve_header, res.curve);
    return res;
}

Image infer(const Model& m, const Image& lr, const SamplerConfig& sampler, std::uint64_t seed) {
    const int want = m.cfg.lr_size();
    if (lr.h != want || lr.w != want)
        throw validation_error("infer: LR is " + std::to_string(lr.h) + "x" +
                               std::to_string(lr.w) + ", this configuration expects " +
                               std::to_string(want) + "x" + std::to_string(want));
    ad::Var f_tsg = guidance_input(m, lr);
    ad::Var cond = condition_vector(f_tsg, m.cond_proj);
    TokenMap tm = generate(f_tsg->value, m.cfg.backbone(), m.backbone, sampler, seed);
    return decode_multiscale(tm, m.vqvae.cb, cond->value, m.vqvae.dec, m.cfg.ablations.use_cac);
}

GuidanceMaps guidance_maps(const Model& m, const Image& lr) {
    return GuidanceMaps{heat_map(lr, m.cfg.guidance), edge_map(lr)};
}

}  // namespace thermosr
