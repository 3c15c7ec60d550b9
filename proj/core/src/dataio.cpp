#include "thermosr/dataio.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <unordered_set>

#include <json.hpp>

#include "thermosr/imaging.hpp"

namespace thermosr {

namespace fs = std::filesystem;
using nlohmann::json;

const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw validation_error("unknown split: " + s);
}

const std::vector<std::string>& scene_vocabulary() {
    static const std::vector<std::string> v = {
        "person", "bicycle", "motorcycle", "tricycle",      "car",  "bus",
        "plane",  "statue",  "regular object", "building", "road", "complex scene"};
    return v;
}

std::string Manifest::resolve(const std::string& rel) const {
    fs::path p(rel);
    if (p.is_absolute()) return rel;
    return (fs::path(root) / p).string();
}

namespace {

[[noreturn]] void line_error(int line, const std::string& what) {
    throw validation_error("manifest line " + std::to_string(line) + ": " + what);
}

SampleRecord parse_record(const json& j, int line) {
    static const std::unordered_set<std::string> known = {"id",     "lr_path", "hr_path",
                                                          "degradation", "scenes", "split"};
    if (!j.is_object()) line_error(line, "record is not a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) line_error(line, "unknown field: " + key);
    for (const char* key : {"id", "lr_path", "hr_path", "degradation", "scenes", "split"})
        if (!j.contains(key)) line_error(line, std::string("missing field: ") + key);

    SampleRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.lr_path = j.at("lr_path").get<std::string>();
        r.hr_path = j.at("hr_path").get<std::string>();
        r.degradation = degradation_from_string(j.at("degradation").get<std::string>());
        r.split = split_from_string(j.at("split").get<std::string>());
        if (!j.at("scenes").is_array()) throw validation_error("scenes must be an array");
        for (const auto& s : j.at("scenes")) {
            const std::string label = s.get<std::string>();
            const auto& vocab = scene_vocabulary();
            if (std::find(vocab.begin(), vocab.end(), label) == vocab.end())
                throw validation_error("unknown scene category: " + label);
            r.scenes.push_back(label);
        }
    } catch (const std::exception& e) {
        // A single prefixing point: sub-parsers throw bare messages.
        line_error(line, e.what());
    }
    if (r.id.empty()) line_error(line, "empty id");
    return r;
}

json record_to_json(const SampleRecord& r) {
    json j;
    j["id"] = r.id;
    j["lr_path"] = r.lr_path;
    j["hr_path"] = r.hr_path;
    j["degradation"] = to_string(r.degradation);
    j["scenes"] = r.scenes;
    j["split"] = to_string(r.split);
    return j;
}

bool is_blank(const std::string& s) {
    return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

Manifest load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw validation_error("cannot open manifest: " + path);

    Manifest m;
    m.root = fs::path(path).parent_path().string();
    if (m.root.empty()) m.root = ".";
    m.version = "1";

    std::unordered_set<std::string> seen;
    std::string linebuf;
    int line = 0;
    bool first_content = true;
    while (std::getline(in, linebuf)) {
        ++line;
        if (is_blank(linebuf)) continue;
        json j;
        try {
            j = json::parse(linebuf);
        } catch (const std::exception& e) {
            line_error(line, std::string("invalid JSON: ") + e.what());
        }
        if (first_content) {
            first_content = false;
            if (j.is_object() && j.contains("manifest_version")) {
                if (j.size() != 1) line_error(line, "version header must hold only manifest_version");
                m.version = j.at("manifest_version").is_string()
                                ? j.at("manifest_version").get<std::string>()
                                : j.at("manifest_version").dump();
                continue;
            }
        }
        SampleRecord r = parse_record(j, line);
        if (!seen.insert(r.id).second) line_error(line, "duplicate id: " + r.id);
        for (const std::string* p : {&r.lr_path, &r.hr_path}) {
            const std::string full = m.resolve(*p);
            if (!fs::exists(full)) line_error(line, "missing file: " + full);
        }
        m.records.push_back(std::move(r));
    }
    return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw validation_error("cannot write manifest: " + path);
    json header;
    header["manifest_version"] = m.version;
    out << header.dump() << "\n";
    for (const auto& r : m.records) out << record_to_json(r).dump() << "\n";
    if (!out) throw validation_error("failed writing manifest: " + path);
}

std::pair<Manifest, Manifest> split_manifest(const Manifest& m, double train_frac,
                                             std::uint64_t seed) {
    if (!(train_frac > 0.0 && train_frac < 1.0))
        throw config_error("split: train fraction must lie strictly between 0 and 1");

    std::vector<bool> in_train(m.records.size(), false);
    for (int kind = 0; kind < 2; ++kind) {
        std::vector<int> idx;
        for (std::size_t i = 0; i < m.records.size(); ++i)
            if (static_cast<int>(m.records[i].degradation) == kind)
                idx.push_back(static_cast<int>(i));
        Rng rng(derive_seed(seed, "split", static_cast<std::uint64_t>(kind)));
        rng.shuffle(idx);
        const auto n_train = static_cast<std::size_t>(
            std::llround(train_frac * static_cast<double>(idx.size())));
        for (std::size_t i = 0; i < n_train && i < idx.size(); ++i)
            in_train[static_cast<std::size_t>(idx[i])] = true;
    }

    Manifest train, test;
    train.root = test.root = m.root;
    train.version = test.version = m.version;
    for (std::size_t i = 0; i < m.records.size(); ++i) {
        SampleRecord r = m.records[i];
        r.split = in_train[i] ? Split::train : Split::test;
        (in_train[i] ? train : test).records.push_back(std::move(r));
    }
    return {std::move(train), std::move(test)};
}

BatchIterator::BatchIterator(const Manifest& m, int batch_size, int crop_h, int crop_w, int scale,
                             std::uint64_t seed)
    : m_(&m), batch_(batch_size), ch_(crop_h), cw_(crop_w), scale_(scale), seed_(seed), rng_(0) {
    if (batch_size < 1) throw config_error("batch_iter: batch size must be positive");
    if (scale < 1) throw config_error("batch_iter: scale must be positive");
    if (crop_h < scale || crop_w < scale || crop_h % scale != 0 || crop_w % scale != 0)
        throw config_error("batch_iter: crop dims must be positive multiples of the scale");
    start_epoch(0);
}

void BatchIterator::start_epoch(std::uint64_t epoch) {
    order_.resize(m_->records.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = static_cast<int>(i);
    Rng shuffle_rng(derive_seed(seed_, "epoch", epoch));
    shuffle_rng.shuffle(order_);
    rng_ = Rng(derive_seed(seed_, "crops", epoch));
    pos_ = 0;
}

bool BatchIterator::next(Batch& out) {
    const int lh = ch_ / scale_, lw = cw_ / scale_;
    std::vector<const SampleRecord*> picked;
    std::vector<Image> lrs, hrs;
    std::vector<std::pair<int, int>> offsets;
    while (pos_ < order_.size() && static_cast<int>(picked.size()) < batch_) {
        const SampleRecord& r = m_->records[static_cast<std::size_t>(order_[pos_++])];
        Image lr = load_image(m_->resolve(r.lr_path));
        Image hr = load_image(m_->resolve(r.hr_path));
        if (hr.h != lr.h * scale_ || hr.w != lr.w * scale_)
            throw validation_error("batch_iter: record " + r.id +
                                   " HR dims are not scale x LR dims");
        if (hr.h < ch_ || hr.w < cw_) {
            std::cerr << "batch_iter: skipping " << r.id << ": image " << hr.h << "x" << hr.w
                      << " is smaller than the " << ch_ << "x" << cw_ << " crop\n";
            continue;
        }
        // Offsets are drawn on the LR grid so the HR window is exactly the
        // scaled LR window.
        const int y_lr = rng_.uniform_int(lr.h - lh + 1);
        const int x_lr = rng_.uniform_int(lr.w - lw + 1);
        picked.push_back(&r);
        offsets.push_back({y_lr * scale_, x_lr * scale_});
        Image lc(lh, lw), hc(ch_, cw_);
        for (int i = 0; i < lh; ++i)
            for (int j = 0; j < lw; ++j) lc.at(i, j) = lr.at(y_lr + i, x_lr + j);
        for (int i = 0; i < ch_; ++i)
            for (int j = 0; j < cw_; ++j)
                hc.at(i, j) = hr.at(y_lr * scale_ + i, x_lr * scale_ + j);
        lrs.push_back(std::move(lc));
        hrs.push_back(std::move(hc));
    }
    if (picked.empty()) return false;

    const int b = static_cast<int>(picked.size());
    out.lr = Tensor({b, 1, lh, lw});
    out.hr = Tensor({b, 1, ch_, cw_});
    out.ids.clear();
    out.hr_yx = std::move(offsets);
    for (int e = 0; e < b; ++e) {
        out.ids.push_back(picked[static_cast<std::size_t>(e)]->id);
        std::copy(lrs[static_cast<std::size_t>(e)].pix.begin(),
                  lrs[static_cast<std::size_t>(e)].pix.end(),
                  out.lr.data.begin() + static_cast<std::ptrdiff_t>(e) * lh * lw);
        std::copy(hrs[static_cast<std::size_t>(e)].pix.begin(),
                  hrs[static_cast<std::size_t>(e)].pix.end(),
                  out.hr.data.begin() + static_cast<std::ptrdiff_t>(e) * ch_ * cw_);
    }
    return true;
}

}  // namespace thermosr
