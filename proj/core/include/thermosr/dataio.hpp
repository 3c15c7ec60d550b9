#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "thermosr/degrade.hpp"
#include "thermosr/errors.hpp"
#include "thermosr/rng.hpp"
#include "thermosr/tensor.hpp"

namespace thermosr {

enum class Split { train, test };

const char* to_string(Split s);
Split split_from_string(const std::string& s);

// The closed scene vocabulary; any other label is rejected at load time.
const std::vector<std::string>& scene_vocabulary();

struct SampleRecord {
    std::string id;
    std::string lr_path;  // resolved against the manifest root unless absolute
    std::string hr_path;
    DegradationKind degradation = DegradationKind::defocus;
    std::vector<std::string> scenes;  // may be empty: synthetic data is unlabeled
    Split split = Split::train;

    bool operator==(const SampleRecord&) const = default;
};

struct Manifest {
    std::vector<SampleRecord> records;
    std::string root;     // directory of the manifest file
    std::string version;  // schema version, "1"

    // root-relative join; absolute paths pass through.
    std::string resolve(const std::string& rel) const;
};

// JSON-lines, one record per line. An optional leading {"manifest_version":
// ...} line pins the schema version. Unknown keys, unknown scene labels,
// duplicate ids, and unreadable referenced files are all rejected with the
// offending line number.
Manifest load_manifest(const std::string& path);
void save_manifest(const Manifest& m, const std::string& path);

// Disjoint, exhaustive, deterministic split, stratified by degradation: each
// class is shuffled under its own derived seed and cut at
// round(train_frac * class_size). Record order within each half follows the
// input manifest. The split field of every record is rewritten to match.
std::pair<Manifest, Manifest> split_manifest(const Manifest& m, double train_frac,
                                             std::uint64_t seed);

struct Batch {
    Tensor lr;  // [b,1,ch/scale,cw/scale]
    Tensor hr;  // [b,1,ch,cw]
    std::vector<std::string> ids;            // source record per element
    std::vector<std::pair<int, int>> hr_yx;  // HR crop offset per element
};

// Streams aligned random crops: the HR window is scale x the LR window at
// the corresponding location, so offsets are sampled on the LR grid. Records
// smaller than the crop are skipped with a warning. One pass over the
// (shuffled) manifest per epoch; identical seed and epoch replay the exact
// same batches.
class BatchIterator {
public:
    // crop_h/crop_w are HR-space dims and must be divisible by scale.
    BatchIterator(const Manifest& m, int batch_size, int crop_h, int crop_w, int scale,
                  std::uint64_t seed);

    void start_epoch(std::uint64_t epoch);
    // Fills `out`; false once the epoch is exhausted.
    bool next(Batch& out);

private:
    const Manifest* m_;
    int batch_, ch_, cw_, scale_;
    std::uint64_t seed_;
    std::vector<int> order_;
    std::size_t pos_ = 0;
    Rng rng_;  // crop-offset stream, reseeded per epoch
};

}  // namespace thermosr
