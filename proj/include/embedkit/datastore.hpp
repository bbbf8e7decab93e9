#pragma once

// Feature banks, dataset manifests, class statistics, unseen-class splits and
// the synthetic dataset generator.
//
// Feature bank file format ("GUEF", little-endian):
//   magic   "GUEF"            4 bytes
//   version u32 = 1
//   N       u32               record count
//   D       u32               vector dimension
//   data    N*D f32           row-major
//   ids     N x (u16 len, bytes)   UTF-8, in record order
//
// Manifest file format: UTF-8 CSV with header `id,class,vertical`. Fields are
// restricted to [A-Za-z0-9_./-] so no quoting is ever needed.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "embedkit/numkit.hpp"

namespace embedkit {

struct FeatureBank {
    std::size_t dim = 0;
    std::vector<std::string> ids;  // unique, one per row of features
    Matrix features;               // ids.size() x dim, finite

    std::size_t count() const { return ids.size(); }
};

struct ManifestEntry {
    std::string id;
    std::string class_label;
    std::string vertical;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
};

struct ClassStats {
    std::map<std::string, std::size_t> counts;
    std::size_t n_min = 0;
    std::size_t n_max = 0;
};

struct Split {
    std::vector<std::string> train_ids;       // manifest order
    std::vector<std::string> validation_ids;  // manifest order
    std::uint64_t seed = 0;
};

void save_feature_bank(const FeatureBank& bank, const std::string& path);
FeatureBank load_feature_bank(const std::string& path);

void save_manifest(const DatasetManifest& manifest, const std::string& path);
DatasetManifest load_manifest(const std::string& path);

ClassStats class_stats(const DatasetManifest& manifest);

DatasetManifest filter_min_samples(const DatasetManifest& manifest, std::size_t min_samples = 3);

// Assigns ceil(val_class_fraction * #classes) whole classes (clamped so at
// least one class stays on each side) to validation via a seeded shuffle of
// the sorted class list. Requires 0 < fraction < 1 and >= 2 classes.
Split split_unseen_classes(const DatasetManifest& manifest, double val_class_fraction,
                           std::uint64_t seed);

DatasetManifest subset_manifest(const DatasetManifest& manifest,
                                const std::vector<std::string>& ids);
FeatureBank subset_bank(const FeatureBank& bank, const std::vector<std::string>& ids);

// Per-class Gaussian clusters around random unit-norm centers. Verticals are
// assigned round-robin: class c goes to vertical c % n_verticals.
struct SynthDataset {
    FeatureBank bank;
    DatasetManifest manifest;
};
SynthDataset synth_dataset(const std::vector<std::size_t>& per_class_counts, std::size_t dim,
                           double cluster_spread, std::size_t n_verticals, std::uint64_t seed);

// Uniform per-class counts in [count_min, count_max], one draw per class.
std::vector<std::size_t> draw_class_counts(std::size_t n_classes, std::size_t count_min,
                                           std::size_t count_max, RngStream& rng);

}  // namespace embedkit
