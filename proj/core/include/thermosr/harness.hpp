#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "thermosr/backbone.hpp"
#include "thermosr/dataio.hpp"
#include "thermosr/degrade.hpp"
#include "thermosr/guidance.hpp"
#include "thermosr/imaging.hpp"
#include "thermosr/losses.hpp"
#include "thermosr/quantizer.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr {

// Experiment harness: one config drives corpus synthesis, the two training
// stages (codebook autoencoder first, then the autoregressive generator),
// inference, and evaluation. Everything downstream of (config, seed) is
// deterministic on a single machine.

struct AblationFlags {
    bool use_tsg = true;  // false: guidance tokens become one learned row
    bool use_cac = true;  // false: the codebook is never condition-modulated
    bool use_toc = true;  // false: the thermal-order term is dropped (weight 0)
};

struct ExperimentConfig {
    GuidanceConfig guidance;
    QuantizerConfig quantizer;
    int backbone_layers = 4;
    int backbone_width = 128;
    int backbone_heads = 4;
    double backbone_dropout = 0.0;
    LossWeights losses;

    // Data: a manifest path, or (when empty) an in-memory synthetic corpus.
    std::string manifest;
    int synth_count = 8;
    int crop = 64;  // HR training size; LR is crop/scale
    int scale = 4;

    double lr = 5e-5;
    double vqvae_lr = 2e-3;
    double weight_decay = 5e-2;
    int batch = 4;
    int iterations = 500;
    int vqvae_iterations = 200;
    bool unfreeze_decoder = false;

    AblationFlags ablations;
    std::uint64_t seed = 0;

    int lr_size() const { return crop / scale; }
    int latent_size() const { return crop / 8; }
    int prefix_len() const { return (lr_size() / 2) * (lr_size() / 2); }

    // Backbone view: vocab, scales, and cond_dim are derived from the
    // quantizer and guidance sections rather than configured twice.
    BackboneConfig backbone() const;

    // Throws config_error; also validates the nested sections.
    void validate() const;

    // Stable TOML rendering of every field in schema order. Hashing this
    // string identifies the experiment; it round-trips through the parser.
    std::string canonical() const;
    std::string hash() const;  // 16 hex digits
};

ExperimentConfig config_from_toml_text(const std::string& text);
ExperimentConfig load_config(const std::string& path);

// Every trainable array in one place. The guidance constant stands in for
// the guidance tokens when use_tsg is off (still fed through the condition
// projection so the codebook modulation keeps an input).
struct Model {
    ExperimentConfig cfg;
    GuidanceParams guidance;
    ad::Var tsg_const;  // [1, attn_dim]
    CondProj cond_proj;
    VqVae vqvae;
    BackboneParams backbone;
};

Model init_model(const ExperimentConfig& cfg);

// Stable name -> parameter enumeration (checkpoint order).
std::vector<std::pair<std::string, ad::Var>> named_params(const Model& m);
// Stage-specific trainable subsets.
std::vector<ad::Var> vqvae_stage_params(const Model& m);
std::vector<ad::Var> ar_stage_params(const Model& m);

struct Checkpoint {
    std::string config_hash;  // full experiment hash, informational
    std::string arch_hash;    // architecture-only hash, gates restore()
    long iteration = 0;
    std::vector<std::pair<std::string, Tensor>> params;  // sorted by name
};

// stem + ".bin" holds the raw little-endian doubles, stem + ".json" the
// layout sidecar. Loading restores values bit-exactly.
void save_checkpoint(const Checkpoint& c, const std::string& stem);
Checkpoint load_checkpoint(const std::string& stem);

Checkpoint snapshot(const Model& m, long iteration);
// Strict: the hash must match the model's config and the name/shape sets
// must agree exactly; throws validation_error otherwise.
void restore(Model& m, const Checkpoint& c);

// Decoupled-weight-decay Adam over a fixed parameter list.
class AdamW {
public:
    AdamW(std::vector<ad::Var> params, double lr, double weight_decay);
    void zero_grads();
    void step();
    long steps() const { return t_; }

private:
    std::vector<ad::Var> params_;
    std::vector<Tensor> m_, v_;
    double lr_, wd_;
    long t_ = 0;
};

// One reproducible synthetic acquisition: scene, degradation parameters,
// scene labels. Shared by the corpus writer and the in-memory training set.
struct SynthSample {
    std::string id;
    DegradedPair pair;
    std::vector<std::string> scenes;
};
SynthSample make_synth_sample(std::uint64_t corpus_seed, int index, int hr_size, int scale);

// Writes <id>_LR.png / <id>_HR.png pairs plus manifest.jsonl (with splits
// stratified at train_frac) under out_dir. Returns the manifest path.
std::string synth_corpus(const std::string& out_dir, int count, std::uint64_t corpus_seed,
                         double train_frac = 0.9, int hr_size = 64, int scale = 4);

struct TrainResult {
    Checkpoint checkpoint;
    // One row per iteration; the header names the columns.
    std::vector<std::string> curve_header;
    std::vector<std::vector<double>> curve;
    std::string ckpt_stem;
    std::string csv_path;
};

// Stage 1: autoencoder + codebook on the training set. Writes
// out_dir/vqvae.{bin,json} and out_dir/vqvae_loss.csv.
// Columns: iteration, recon, codebook, commit, total.
TrainResult train_vqvae(const ExperimentConfig& cfg, const std::string& out_dir);

// Stage 2: guidance + modulation + generator on top of a stage-1 checkpoint
// (autoencoder and embedding table frozen unless unfreeze_decoder). Writes
// out_dir/ar.{bin,json} and out_dir/ar_loss.csv.
// Columns: iteration, ce, mse, toc, total.
TrainResult train_ar(const ExperimentConfig& cfg, const Checkpoint& vqvae_ckpt,
                     const std::string& out_dir);

// LR image -> SR image at the configured scale factor. Deterministic under
// the argmax sampler; LR dims must match the checkpointed configuration.
Image infer(const Model& m, const Image& lr, const SamplerConfig& sampler, std::uint64_t seed);

// Guidance maps of one LR image, for --dump-guidance style introspection.
struct GuidanceMaps {
    Image heat;
    Image edge;
};
GuidanceMaps guidance_maps(const Model& m, const Image& lr);

}  // namespace thermosr
