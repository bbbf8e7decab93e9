#include "embedkit/datastore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

namespace embedkit {

namespace {

constexpr char kMagic[4] = {'G', 'U', 'E', 'F'};
constexpr std::uint32_t kVersion = 1;

void put_u16(std::ostream& os, std::uint16_t v) {
    char b[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    os.write(b, 2);
}

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

void put_f32(std::ostream& os, float v) { put_u32(os, std::bit_cast<std::uint32_t>(v)); }

std::uint16_t get_u16(std::istream& is, const std::string& what) {
    unsigned char b[2];
    if (!is.read(reinterpret_cast<char*>(b), 2))
        throw std::runtime_error("load_feature_bank: truncated file reading " + what);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error("load_feature_bank: truncated file reading " + what);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void check_unique_ids(const std::vector<std::string>& ids, const char* op) {
    std::set<std::string> seen;
    for (const auto& id : ids)
        if (!seen.insert(id).second)
            throw std::invalid_argument(std::string(op) + ": duplicate id '" + id + "'");
}

bool valid_field(const std::string& s) {
    if (s.empty()) return false;
    for (char ch : s) {
        bool ok = (ch >= 'A' && ch <= 'Z') || (ch >= 'a' && ch <= 'z') ||
                  (ch >= '0' && ch <= '9') || ch == '_' || ch == '.' || ch == '/' || ch == '-';
        if (!ok) return false;
    }
    return true;
}

}  // namespace

void save_feature_bank(const FeatureBank& bank, const std::string& path) {
    if (bank.features.rows() != bank.ids.size() || bank.features.cols() != bank.dim)
        throw std::invalid_argument("save_feature_bank: bank shape inconsistent");
    if (!bank.features.all_finite())
        throw std::invalid_argument("save_feature_bank: non-finite feature values");
    check_unique_ids(bank.ids, "save_feature_bank");

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_feature_bank: cannot open '" + path + "' for writing");

    os.write(kMagic, 4);
    put_u32(os, kVersion);
    put_u32(os, static_cast<std::uint32_t>(bank.count()));
    put_u32(os, static_cast<std::uint32_t>(bank.dim));
    for (std::size_t i = 0; i < bank.features.size(); ++i) {
        float f = static_cast<float>(bank.features.data()[i]);
        if (!std::isfinite(f))
            throw std::invalid_argument("save_feature_bank: value overflows 32-bit float range");
        put_f32(os, f);
    }
    for (const auto& id : bank.ids) {
        if (id.size() > 0xffff)
            throw std::invalid_argument("save_feature_bank: id longer than 65535 bytes");
        put_u16(os, static_cast<std::uint16_t>(id.size()));
        os.write(id.data(), static_cast<std::streamsize>(id.size()));
    }
    if (!os) throw std::runtime_error("save_feature_bank: write failure on '" + path + "'");
}

FeatureBank load_feature_bank(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_feature_bank: cannot open '" + path + "'");

    char magic[4];
    if (!is.read(magic, 4)) throw std::runtime_error("load_feature_bank: truncated header");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw std::runtime_error("load_feature_bank: bad magic in '" + path + "'");
    std::uint32_t version = get_u32(is, "version");
    if (version != kVersion)
        throw std::runtime_error("load_feature_bank: unsupported version " +
                                 std::to_string(version));
    std::uint32_t n = get_u32(is, "record count");
    std::uint32_t d = get_u32(is, "dimension");

    FeatureBank bank;
    bank.dim = d;
    bank.features = Matrix(n, d);
    for (std::size_t i = 0; i < static_cast<std::size_t>(n) * d; ++i) {
        std::uint32_t bits = get_u32(is, "feature data");
        double v = static_cast<double>(std::bit_cast<float>(bits));
        if (!std::isfinite(v))
            throw std::runtime_error("load_feature_bank: non-finite feature value");
        bank.features.data()[i] = v;
    }
    bank.ids.reserve(n);
    for (std::uint32_t i = 0; i < n; ++i) {
        std::uint16_t len = get_u16(is, "id length");
        std::string id(len, '\0');
        if (len > 0 && !is.read(id.data(), len))
            throw std::runtime_error("load_feature_bank: truncated id table");
        bank.ids.push_back(std::move(id));
    }
    if (is.peek() != EOF)
        throw std::runtime_error("load_feature_bank: trailing bytes after id table");
    check_unique_ids(bank.ids, "load_feature_bank");
    return bank;
}

void save_manifest(const DatasetManifest& manifest, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("save_manifest: cannot open '" + path + "' for writing");
    os << "id,class,vertical\n";
    for (const auto& e : manifest.entries) {
        if (!valid_field(e.id) || !valid_field(e.class_label) || !valid_field(e.vertical))
            throw std::invalid_argument("save_manifest: field outside [A-Za-z0-9_./-] in id '" +
                                        e.id + "'");
        os << e.id << ',' << e.class_label << ',' << e.vertical << '\n';
    }
    if (!os) throw std::runtime_error("save_manifest: write failure on '" + path + "'");
}

DatasetManifest load_manifest(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("load_manifest: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw std::runtime_error("load_manifest: empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "id,class,vertical")
        throw std::runtime_error("load_manifest: expected header 'id,class,vertical', got '" +
                                 line + "'");

    DatasetManifest manifest;
    std::size_t lineno = 1;
    std::vector<std::string> ids;
    while (std::getline(is, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::size_t c1 = line.find(',');
        std::size_t c2 = c1 == std::string::npos ? std::string::npos : line.find(',', c1 + 1);
        if (c1 == std::string::npos || c2 == std::string::npos ||
            line.find(',', c2 + 1) != std::string::npos)
            throw std::runtime_error("load_manifest: line " + std::to_string(lineno) +
                                     " does not have exactly 3 fields");
        ManifestEntry e{line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)};
        if (!valid_field(e.id) || !valid_field(e.class_label) || !valid_field(e.vertical))
            throw std::runtime_error("load_manifest: line " + std::to_string(lineno) +
                                     " has a field outside [A-Za-z0-9_./-]");
        ids.push_back(e.id);
        manifest.entries.push_back(std::move(e));
    }
    check_unique_ids(ids, "load_manifest");
    return manifest;
}

ClassStats class_stats(const DatasetManifest& manifest) {
    if (manifest.entries.empty()) throw std::invalid_argument("class_stats: empty manifest");
    ClassStats stats;
    for (const auto& e : manifest.entries) ++stats.counts[e.class_label];
    stats.n_min = SIZE_MAX;
    stats.n_max = 0;
    for (const auto& [label, n] : stats.counts) {
        stats.n_min = std::min(stats.n_min, n);
        stats.n_max = std::max(stats.n_max, n);
    }
    return stats;
}

DatasetManifest filter_min_samples(const DatasetManifest& manifest, std::size_t min_samples) {
    if (min_samples < 1)
        throw std::invalid_argument("filter_min_samples: min_samples must be >= 1");
    std::map<std::string, std::size_t> counts;
    for (const auto& e : manifest.entries) ++counts[e.class_label];
    DatasetManifest out;
    for (const auto& e : manifest.entries)
        if (counts[e.class_label] >= min_samples) out.entries.push_back(e);
    return out;
}

Split split_unseen_classes(const DatasetManifest& manifest, double val_class_fraction,
                           std::uint64_t seed) {
    if (!(val_class_fraction > 0.0 && val_class_fraction < 1.0))
        throw std::invalid_argument("split_unseen_classes: fraction must be in (0,1)");
    std::set<std::string> class_set;
    for (const auto& e : manifest.entries) class_set.insert(e.class_label);
    if (class_set.size() < 2)
        throw std::invalid_argument("split_unseen_classes: need at least 2 classes, got " +
                                    std::to_string(class_set.size()));

    std::vector<std::string> classes(class_set.begin(), class_set.end());
    RngStream rng(seed);
    rng.shuffle(classes);

    std::size_t n_val = static_cast<std::size_t>(
        std::ceil(val_class_fraction * static_cast<double>(classes.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, classes.size() - 1);

    std::set<std::string> val_classes(classes.begin(), classes.begin() + n_val);
    Split split;
    split.seed = seed;
    for (const auto& e : manifest.entries) {
        if (val_classes.count(e.class_label))
            split.validation_ids.push_back(e.id);
        else
            split.train_ids.push_back(e.id);
    }
    return split;
}

DatasetManifest subset_manifest(const DatasetManifest& manifest,
                                const std::vector<std::string>& ids) {
    std::unordered_map<std::string, const ManifestEntry*> by_id;
    for (const auto& e : manifest.entries) by_id[e.id] = &e;
    DatasetManifest out;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end())
            throw std::invalid_argument("subset_manifest: id '" + id + "' not in manifest");
        out.entries.push_back(*it->second);
    }
    return out;
}

FeatureBank subset_bank(const FeatureBank& bank, const std::vector<std::string>& ids) {
    std::unordered_map<std::string, std::size_t> row_of;
    for (std::size_t i = 0; i < bank.ids.size(); ++i) row_of[bank.ids[i]] = i;
    FeatureBank out;
    out.dim = bank.dim;
    out.features = Matrix(ids.size(), bank.dim);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        auto it = row_of.find(ids[i]);
        if (it == row_of.end())
            throw std::invalid_argument("subset_bank: id '" + ids[i] + "' not in bank");
        const double* src = bank.features.row(it->second);
        std::copy(src, src + bank.dim, out.features.row(i));
        out.ids.push_back(ids[i]);
    }
    return out;
}

SynthDataset synth_dataset(const std::vector<std::size_t>& per_class_counts, std::size_t dim,
                           double cluster_spread, std::size_t n_verticals, std::uint64_t seed) {
    if (per_class_counts.size() < 2)
        throw std::invalid_argument("synth_dataset: need at least 2 classes");
    if (dim < 2) throw std::invalid_argument("synth_dataset: dim must be >= 2");
    if (cluster_spread < 0.0)
        throw std::invalid_argument("synth_dataset: cluster_spread must be >= 0");
    if (n_verticals < 1) throw std::invalid_argument("synth_dataset: need >= 1 vertical");
    for (std::size_t n : per_class_counts)
        if (n < 1) throw std::invalid_argument("synth_dataset: every class needs >= 1 sample");

    RngStream rng(seed);
    std::size_t total = 0;
    for (std::size_t n : per_class_counts) total += n;

    SynthDataset out;
    out.bank.dim = dim;
    out.bank.features = Matrix(total, dim);

    char buf[64];
    std::size_t row = 0;
    for (std::size_t c = 0; c < per_class_counts.size(); ++c) {
        Matrix center = l2_normalize_rows(rng.gaussian_matrix(1, dim));
        std::snprintf(buf, sizeof(buf), "class_%04zu", c);
        std::string class_label = buf;
        std::snprintf(buf, sizeof(buf), "vertical_%02zu", c % n_verticals);
        std::string vertical = buf;
        for (std::size_t j = 0; j < per_class_counts[c]; ++j) {
            double* dst = out.bank.features.row(row);
            for (std::size_t k = 0; k < dim; ++k)
                dst[k] = center(0, k) + cluster_spread * rng.gaussian();
            std::snprintf(buf, sizeof(buf), "c%04zu_s%04zu", c, j);
            out.bank.ids.emplace_back(buf);
            out.manifest.entries.push_back({buf, class_label, vertical});
            ++row;
        }
    }
    return out;
}

std::vector<std::size_t> draw_class_counts(std::size_t n_classes, std::size_t count_min,
                                           std::size_t count_max, RngStream& rng) {
    if (count_min < 1 || count_max < count_min)
        throw std::invalid_argument("draw_class_counts: need 1 <= count_min <= count_max");
    std::vector<std::size_t> counts(n_classes);
    for (auto& c : counts)
        c = count_min + static_cast<std::size_t>(rng.uniform_below(count_max - count_min + 1));
    return counts;
}

}  // namespace embedkit
