#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <iterator>
#include <span>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gmat/errors.hpp"
#include "gmat/matrix.hpp"
#include "gmat/rng.hpp"

namespace gmat {

/// Per-feature affine map x' = (x - shift) / scale.
struct Normalization {
    std::vector<double> shift;
    std::vector<double> scale;

    bool identity() const { return shift.empty(); }

    static Normalization standardize(const Matrix& x) {
        Normalization n{std::vector<double>(x.cols(), 0.0), std::vector<double>(x.cols(), 0.0)};
        const double rows = static_cast<double>(x.rows());
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) n.shift[c] += x(r, c);
        for (auto& s : n.shift) s /= rows;
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) {
                const double d = x(r, c) - n.shift[c];
                n.scale[c] += d * d;
            }
        for (auto& s : n.scale) {
            s = std::sqrt(s / rows);
            if (s <= 0.0) s = 1.0;
        }
        return n;
    }

    Matrix apply(Matrix x) const {
        if (identity()) return x;
        require(x.cols() == shift.size(), "Normalization: width mismatch");
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = (x(r, c) - shift[c]) / scale[c];
        return x;
    }

    Matrix invert(Matrix x) const {
        if (identity()) return x;
        require(x.cols() == shift.size(), "Normalization: width mismatch");
        for (std::size_t r = 0; r < x.rows(); ++r)
            for (std::size_t c = 0; c < x.cols(); ++c) x(r, c) = x(r, c) * scale[c] + shift[c];
        return x;
    }
};

struct Dataset {
    Matrix x;                                 // N x d
    std::optional<std::vector<int>> labels;   // N entries when present
    std::string name;
    Normalization normalization;              // already applied to x
    std::optional<std::pair<std::size_t, std::size_t>> image_shape;  // rows, cols

    std::size_t size() const { return x.rows(); }
    std::size_t dim() const { return x.cols(); }
    bool labeled() const { return labels.has_value(); }

    std::vector<int> label_set() const {
        if (!labels) return {};
        std::set<int> s(labels->begin(), labels->end());
        return {s.begin(), s.end()};
    }

    Dataset subset(std::span<const std::size_t> idx) const {
        Dataset out;
        out.x = x.select_rows(idx);
        if (labels) {
            out.labels.emplace();
            out.labels->reserve(idx.size());
            for (auto i : idx) out.labels->push_back((*labels)[i]);
        }
        out.name = name;
        out.normalization = normalization;
        out.image_shape = image_shape;
        return out;
    }

    void validate() const {
        if (labels) require(labels->size() == x.rows(), "Dataset: labels length differs from sample count");
        require(x.all_finite(), "Dataset: non-finite features");
    }
};

/// Returns a copy with standardized features and the normalization recorded.
inline Dataset standardized(Dataset d) {
    d.normalization = Normalization::standardize(d.x);
    d.x = d.normalization.apply(std::move(d.x));
    return d;
}

namespace detail {

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

inline std::vector<std::size_t> balanced_classes(std::size_t n, std::size_t k) {
    std::vector<std::size_t> cls;
    cls.reserve(n);
    for (std::size_t c = 0; c < k; ++c) {
        const std::size_t count = n / k + (c < n % k ? 1 : 0);
        cls.insert(cls.end(), count, c);
    }
    return cls;
}

} // namespace detail

/// Isotropic Gaussian clusters around explicit centres (k x dim), balanced within one.
inline Dataset gen_blobs_at(const Matrix& centers, std::size_t n, double cluster_std, std::uint64_t seed) {
    const std::size_t k = centers.rows();
    require(k >= 1 && n >= k, "gen_blobs: need k >= 1 and n >= k");
    require(cluster_std >= 0.0, "gen_blobs: cluster_std must be non-negative");
    Rng rng = Rng(seed).split("points");
    auto cls = detail::balanced_classes(n, k);
    Rng order = Rng(seed).split("order");
    detail::shuffle_indices(cls, order);
    Dataset d;
    d.x = Matrix(n, centers.cols());
    d.labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) {
        (*d.labels)[i] = static_cast<int>(cls[i]);
        for (std::size_t c = 0; c < centers.cols(); ++c) d.x(i, c) = centers(cls[i], c) + cluster_std * rng.normal();
    }
    d.name = "blobs";
    return d;
}

/// Random centres in [box_lo, box_hi]^dim with pairwise separation >= 8 * cluster_std.
inline Matrix blob_centers(std::size_t k, double cluster_std, std::pair<double, double> center_box, std::uint64_t seed,
                           std::size_t dim = 2) {
    require(center_box.first < center_box.second, "gen_blobs: empty center box");
    Rng rng = Rng(seed).split("centers");
    const double min_sep = 8.0 * cluster_std;
    for (int attempt = 0; attempt < 1000; ++attempt) {
        Matrix c(k, dim);
        for (auto& v : c.values()) v = rng.uniform(center_box.first, center_box.second);
        bool ok = true;
        for (std::size_t a = 0; a < k && ok; ++a)
            for (std::size_t b = a + 1; b < k && ok; ++b) {
                double s = 0.0;
                for (std::size_t j = 0; j < dim; ++j) s += (c(a, j) - c(b, j)) * (c(a, j) - c(b, j));
                ok = std::sqrt(s) >= min_sep;
            }
        if (ok) return c;
    }
    throw ConfigError("gen_blobs: could not place " + std::to_string(k) + " centres with separation " +
                      std::to_string(min_sep) + " in 1000 attempts");
}

inline Dataset gen_blobs(std::size_t k, std::size_t n, double cluster_std, std::pair<double, double> center_box,
                         std::uint64_t seed, std::size_t dim = 2) {
    require(k >= 1 && n >= k, "gen_blobs: need k >= 1 and n >= k");
    return gen_blobs_at(blob_centers(k, cluster_std, center_box, seed, dim), n, cluster_std, seed);
}

/// Two interleaving half circles: upper (cos t, sin t), lower (1 - cos t, 0.5 - sin t),
/// t ~ U[0, pi], plus N(0, noise^2) per coordinate.
inline Dataset gen_moons(std::size_t n, double noise, std::uint64_t seed) {
    require(n >= 2, "gen_moons: need at least two samples");
    require(noise >= 0.0, "gen_moons: noise must be non-negative");
    Rng rng(seed);
    auto cls = detail::balanced_classes(n, 2);
    Rng order = rng.split("order");
    detail::shuffle_indices(cls, order);
    Rng angles = rng.split("angles");
    Rng jitter = rng.split("noise");
    Dataset d;
    d.x = Matrix(n, 2);
    d.labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double t = angles.uniform(0.0, std::numbers::pi);
        const int c = static_cast<int>(cls[i]);
        (*d.labels)[i] = c;
        if (c == 0) {
            d.x(i, 0) = std::cos(t);
            d.x(i, 1) = std::sin(t);
        } else {
            d.x(i, 0) = 1.0 - std::cos(t);
            d.x(i, 1) = 0.5 - std::sin(t);
        }
        d.x(i, 0) += noise * jitter.normal();
        d.x(i, 1) += noise * jitter.normal();
    }
    d.name = "moons";
    return d;
}

/// Distance from a point to the noise-free arc of its moon.
inline double moon_arc_distance(double x, double y, int label) {
    // Upper arc: unit circle at (0,0), y >= 0. Lower arc: unit circle at (1, 0.5), y <= 0.5.
    const double cx = label == 0 ? 0.0 : 1.0;
    const double cy = label == 0 ? 0.0 : 0.5;
    const double dx = x - cx, dy = y - cy;
    const bool on_side = label == 0 ? dy >= 0.0 : dy <= 0.0;
    if (on_side) return std::abs(std::hypot(dx, dy) - 1.0);
    // Closest arc endpoint.
    const double e1 = std::hypot(dx - 1.0, dy), e2 = std::hypot(dx + 1.0, dy);
    return std::min(e1, e2);
}

// ---- IDX -------------------------------------------------------------------------------

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t offset, const std::string& path) {
    if (offset + 4 > b.size())
        throw FormatError(path + ": truncated header at offset " + std::to_string(offset));
    return (std::uint32_t(b[offset]) << 24) | (std::uint32_t(b[offset + 1]) << 16) |
           (std::uint32_t(b[offset + 2]) << 8) | std::uint32_t(b[offset + 3]);
}

} // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Parse big-endian IDX image (ubyte, 3 dims) and label (ubyte, 1 dim) files.
/// Pixels scale to [0, 1]; images flatten row-major.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto img = detail::read_file(images_path);
    const auto lab = detail::read_file(labels_path);

    const auto img_magic = detail::read_be32(img, 0, images_path);
    if (img_magic != kIdxImageMagic) {
        std::ostringstream os;
        os << images_path << ": bad image magic 0x" << std::hex << std::setw(8) << std::setfill('0') << img_magic
           << " at offset 0";
        throw FormatError(os.str());
    }
    const std::size_t n = detail::read_be32(img, 4, images_path);
    const std::size_t rows = detail::read_be32(img, 8, images_path);
    const std::size_t cols = detail::read_be32(img, 12, images_path);

    const auto lab_magic = detail::read_be32(lab, 0, labels_path);
    if (lab_magic != kIdxLabelMagic) {
        std::ostringstream os;
        os << labels_path << ": bad label magic 0x" << std::hex << std::setw(8) << std::setfill('0') << lab_magic
           << " at offset 0";
        throw FormatError(os.str());
    }
    const std::size_t nl = detail::read_be32(lab, 4, labels_path);
    if (nl != n)
        throw FormatError(labels_path + ": label count " + std::to_string(nl) + " at offset 4 does not match image count " +
                          std::to_string(n));

    const std::size_t pixels = rows * cols;
    const std::size_t img_need = 16 + n * pixels;
    if (img.size() < img_need)
        throw FormatError(images_path + ": truncated pixel data at offset " + std::to_string(img.size()) +
                          " (expected " + std::to_string(img_need) + " bytes)");
    if (lab.size() < 8 + n)
        throw FormatError(labels_path + ": truncated label data at offset " + std::to_string(lab.size()) +
                          " (expected " + std::to_string(8 + n) + " bytes)");

    Dataset d;
    d.x = Matrix(n, pixels);
    d.labels.emplace(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t p = 0; p < pixels; ++p) d.x(i, p) = img[16 + i * pixels + p] / 255.0;
        (*d.labels)[i] = lab[8 + i];
    }
    d.name = "idx";
    d.image_shape = {rows, cols};
    return d;
}

/// Class-stratified subsample of `n` samples: equal share per class (remainder to the
/// lowest labels), chosen by a seeded shuffle, original order preserved.
inline Dataset stratified_subsample(const Dataset& d, std::size_t n, std::uint64_t seed) {
    require(d.labeled(), "stratified_subsample: dataset has no labels");
    if (n >= d.size()) return d;
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < d.size(); ++i) by_class[(*d.labels)[i]].push_back(i);
    Rng rng = Rng(seed).split("subsample");
    std::vector<std::size_t> keep;
    std::size_t c = 0;
    const std::size_t k = by_class.size();
    for (auto& [label, idx] : by_class) {
        const std::size_t want = std::min(idx.size(), n / k + (c < n % k ? 1 : 0));
        detail::shuffle_indices(idx, rng);
        keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(want));
        ++c;
    }
    std::sort(keep.begin(), keep.end());
    return d.subset(keep);
}

/// Seeded random split: the first part holds round(fraction * N) samples.
inline std::pair<Dataset, Dataset> holdout_split(const Dataset& d, double holdout_fraction, std::uint64_t seed) {
    require(holdout_fraction > 0.0 && holdout_fraction < 1.0, "holdout_split: fraction must be in (0, 1)");
    std::vector<std::size_t> idx(d.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    Rng rng = Rng(seed).split("holdout");
    detail::shuffle_indices(idx, rng);
    const auto n_test = static_cast<std::size_t>(std::llround(holdout_fraction * static_cast<double>(d.size())));
    std::vector<std::size_t> test(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> train(idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
    return {d.subset(train), d.subset(test)};
}

// ---- tasks -----------------------------------------------------------------------------

struct TaskStream {
    std::vector<Dataset> tasks;
    std::vector<std::vector<int>> groups;  // label set of each task
    std::string scheme;

    std::size_t size() const { return tasks.size(); }
};

inline std::vector<std::vector<int>> split_pairs_groups() { return {{0, 1}, {2, 3}, {4, 5}, {6, 7}, {8, 9}}; }

/// Partition a labelled dataset into tasks by label group, order within each task preserved.
/// Empty groups produce no task.
inline TaskStream split_tasks(const Dataset& d, const std::vector<std::vector<int>>& groups, std::string scheme = "custom") {
    require(d.labeled(), "split_tasks: dataset has no labels");
    require(!groups.empty(), "split_tasks: no groups");
    std::map<int, std::size_t> group_of;
    for (std::size_t g = 0; g < groups.size(); ++g)
        for (int label : groups[g]) {
            if (group_of.count(label)) throw ConfigError("split_tasks: label " + std::to_string(label) + " in two groups");
            group_of[label] = g;
        }
    std::vector<std::vector<std::size_t>> members(groups.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const int label = (*d.labels)[i];
        auto it = group_of.find(label);
        if (it == group_of.end()) throw ConfigError("split_tasks: label " + std::to_string(label) + " is in no group");
        members[it->second].push_back(i);
    }
    TaskStream ts;
    ts.scheme = std::move(scheme);
    for (std::size_t g = 0; g < groups.size(); ++g) {
        if (members[g].empty()) continue;
        ts.tasks.push_back(d.subset(members[g]));
        ts.groups.push_back(groups[g]);
    }
    return ts;
}

inline TaskStream split_tasks_pairs(const Dataset& d) { return split_tasks(d, split_pairs_groups(), "split-pairs"); }

// ---- batching --------------------------------------------------------------------------

/// Index batches for one epoch: seeded shuffle, final short batch kept.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, Rng& shuffle) {
    require(batch_size >= 1, "batches: batch size must be positive");
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    detail::shuffle_indices(order, shuffle);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t stop = std::min(n, start + batch_size);
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start), order.begin() + static_cast<std::ptrdiff_t>(stop));
    }
    return out;
}

inline std::vector<std::vector<std::size_t>> batches(const Dataset& d, std::size_t batch_size, std::uint64_t shuffle_seed) {
    Rng rng(shuffle_seed);
    return batches(d.size(), batch_size, rng);
}

/// Unshuffled contiguous batches.
inline std::vector<std::vector<std::size_t>> sequential_batches(std::size_t n, std::size_t batch_size) {
    require(batch_size >= 1, "batches: batch size must be positive");
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size) {
        std::vector<std::size_t> b;
        for (std::size_t i = start; i < std::min(n, start + batch_size); ++i) b.push_back(i);
        out.push_back(std::move(b));
    }
    return out;
}

// ---- CSV -------------------------------------------------------------------------------

/// Header x0..x{d-1}[,label]; one sample per line; values printed round-trip exact.
inline void write_csv(const Dataset& d, std::ostream& out) {
    for (std::size_t c = 0; c < d.dim(); ++c) out << (c ? "," : "") << 'x' << c;
    if (d.labeled()) out << ",label";
    out << '\n';
    char buf[64];
    for (std::size_t r = 0; r < d.size(); ++r) {
        for (std::size_t c = 0; c < d.dim(); ++c) {
            std::snprintf(buf, sizeof buf, "%.17g", d.x(r, c));
            out << (c ? "," : "") << buf;
        }
        if (d.labeled()) out << ',' << (*d.labels)[r];
        out << '\n';
    }
}

inline void write_csv(const Dataset& d, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path);
    write_csv(d, out);
    if (!out) throw IoError("write failed for " + path);
}

inline Dataset read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw FormatError(path + ": empty file");
    std::vector<std::string> header;
    {
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) header.push_back(cell);
    }
    const bool labeled = !header.empty() && header.back() == "label";
    const std::size_t dim = header.size() - (labeled ? 1 : 0);
    require(dim >= 1, "read_csv: no feature columns");
    std::vector<double> values;
    std::vector<int> labels;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        std::size_t col = 0;
        while (std::getline(ss, cell, ',')) {
            char* end = nullptr;
            if (col < dim) {
                values.push_back(std::strtod(cell.c_str(), &end));
            } else {
                labels.push_back(static_cast<int>(std::strtol(cell.c_str(), &end, 10)));
            }
            if (end == cell.c_str()) throw FormatError(path + ": bad number on line " + std::to_string(rows + 2));
            ++col;
        }
        if (col != header.size()) throw FormatError(path + ": wrong column count on line " + std::to_string(rows + 2));
        ++rows;
    }
    Dataset d;
    d.x = Matrix(rows, dim, std::move(values));
    if (labeled) d.labels = std::move(labels);
    d.name = "csv";
    return d;
}

} // namespace gmat
