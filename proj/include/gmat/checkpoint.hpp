#pragma once

// Checkpoints: a JSON manifest (shapes, config, history, RNG state) next to a raw
// little-endian float64 blob holding every parameter array row-major.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmat/errors.hpp"
#include "gmat/growth.hpp"
#include "gmat/model.hpp"

namespace gmat {

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kParamsMagic[8] = {'G', 'M', 'A', 'T', 'P', 'A', 'R', 'M'};

struct Checkpoint {
    int version = kCheckpointVersion;
    Model model;
    std::string rng_state;
    GrowthHistory history;
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t& pos, const std::string& path) {
    if (pos + 8 > in.size()) throw FormatError(path + ": truncated at offset " + std::to_string(pos));
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
    pos += 8;
    return v;
}

inline void put_matrix(std::string& out, const Matrix& m) {
    put_u64(out, m.rows());
    put_u64(out, m.cols());
    for (double v : m.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

inline Matrix get_matrix(const std::string& in, std::size_t& pos, const std::string& path) {
    const auto r = get_u64(in, pos, path), c = get_u64(in, pos, path);
    if (r > (1u << 28) || c > (1u << 28)) throw FormatError(path + ": implausible array shape at offset " + std::to_string(pos - 16));
    Matrix m(r, c);
    for (auto& v : m.values()) v = std::bit_cast<double>(get_u64(in, pos, path));
    return m;
}

inline nlohmann::ordered_json number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline double number_or_nan(const nlohmann::ordered_json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline nlohmann::ordered_json shape(const Matrix& m) { return {m.rows(), m.cols()}; }

} // namespace detail

inline nlohmann::ordered_json history_json(const GrowthHistory& h) {
    auto arr = nlohmann::ordered_json::array();
    for (const auto& r : h.records) {
        nlohmann::ordered_json j;
        j["iteration"] = r.iteration;
        j["prototypes"] = r.prototypes;
        j["strengths"] = r.strengths;
        j["max_strength"] = r.max_strength;
        j["chosen"] = r.chosen;
        j["losses"] = {{"recon", r.losses.recon}, {"kl", r.losses.kl}, {"r1", r.losses.r1}, {"r2", r.losses.r2},
                       {"ce", r.losses.ce},       {"ae", r.losses.ae}, {"total", r.losses.total}};
        j["nmi"] = detail::number_or_null(r.nmi);
        j["epochs"] = r.epochs;
        arr.push_back(std::move(j));
    }
    return arr;
}

inline GrowthHistory history_from_json(const nlohmann::ordered_json& arr) {
    GrowthHistory h;
    for (const auto& j : arr) {
        GrowthRecord r;
        r.iteration = j.at("iteration").get<std::size_t>();
        r.prototypes = j.at("prototypes").get<std::size_t>();
        r.strengths = j.at("strengths").get<std::vector<double>>();
        r.max_strength = j.at("max_strength").get<double>();
        r.chosen = j.at("chosen").get<long>();
        const auto& l = j.at("losses");
        r.losses = {l.at("recon").get<double>(), l.at("kl").get<double>(), l.at("r1").get<double>(),
                    l.at("r2").get<double>(),    l.at("ce").get<double>(), l.at("ae").get<double>(),
                    l.at("total").get<double>()};
        r.nmi = detail::number_or_nan(j.at("nmi"));
        r.epochs = j.at("epochs").get<std::size_t>();
        h.records.push_back(std::move(r));
    }
    return h;
}

/// Parameter blob: magic, version, array count, then (rows, cols, values) per array.
/// Order: codec parameters, means, log-scales, one centroid row per class.
inline std::string params_blob(const Model& m) {
    std::string out(kParamsMagic, kParamsMagic + 8);
    std::vector<const Matrix*> arrays = m.parameters();
    for (const auto& [label, c] : m.centroids.classes) arrays.push_back(&c.mean);
    detail::put_u64(out, static_cast<std::uint64_t>(kCheckpointVersion));
    detail::put_u64(out, arrays.size());
    for (const auto* a : arrays) detail::put_matrix(out, *a);
    return out;
}

inline nlohmann::ordered_json manifest(const Checkpoint& c) {
    nlohmann::ordered_json j;
    j["format"] = "gmat-checkpoint";
    j["version"] = c.version;
    j["params"] = "params.bin";
    const Model& m = c.model;
    if (m.codec) {
        j["codec"] = {{"input_dim", m.codec->input_dim}, {"latent_dim", m.codec->latent_dim}, {"hidden", m.codec->hidden}};
    } else {
        j["codec"] = nullptr;
    }
    j["prototypes"] = {{"count", m.prototypes.count()}, {"dim", m.prototypes.dim()}};
    auto classes = nlohmann::ordered_json::array();
    for (const auto& [label, cc] : m.centroids.classes) classes.push_back({{"label", label}, {"count", cc.count}, {"stale", cc.stale}});
    j["centroids"] = {{"decay", m.centroids.decay}, {"classes", classes}};
    auto shapes = nlohmann::ordered_json::array();
    for (const auto* a : m.parameters()) shapes.push_back(detail::shape(*a));
    j["shapes"] = shapes;
    j["rng_state"] = c.rng_state;
    j["config"] = c.config;
    j["history"] = history_json(c.history);
    return j;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Writes `checkpoint.json` and `params.bin` into `dir`.
inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());
    write_file(dir / "params.bin", params_blob(c.model));
    write_file(dir / "checkpoint.json", manifest(c).dump(2) + "\n");
}

/// Loads from the path of a `checkpoint.json`; the blob is resolved next to it.
inline Checkpoint load_checkpoint(const std::filesystem::path& json_path) {
    const std::string text = read_text(json_path);
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
    try {
        if (j.at("format") != "gmat-checkpoint") throw FormatError(json_path.string() + ": not a checkpoint manifest");
        Checkpoint c;
        c.version = j.at("version").get<int>();
        if (c.version != kCheckpointVersion)
            throw FormatError(json_path.string() + ": checkpoint version " + std::to_string(c.version) + ", expected " +
                              std::to_string(kCheckpointVersion));
        const auto blob_path = json_path.parent_path() / j.at("params").get<std::string>();
        const std::string blob = read_text(blob_path);
        if (blob.size() < 8 || std::memcmp(blob.data(), kParamsMagic, 8) != 0)
            throw FormatError(blob_path.string() + ": bad magic at offset 0");
        std::size_t pos = 8;
        const auto blob_version = detail::get_u64(blob, pos, blob_path.string());
        if (blob_version != static_cast<std::uint64_t>(kCheckpointVersion))
            throw FormatError(blob_path.string() + ": version " + std::to_string(blob_version) + " at offset 8");
        const auto count = detail::get_u64(blob, pos, blob_path.string());
        std::vector<Matrix> arrays;
        for (std::uint64_t i = 0; i < count; ++i) arrays.push_back(detail::get_matrix(blob, pos, blob_path.string()));
        if (pos != blob.size()) throw FormatError(blob_path.string() + ": trailing bytes at offset " + std::to_string(pos));

        Model& m = c.model;
        std::size_t next = 0;
        auto take = [&]() -> Matrix {
            if (next >= arrays.size()) throw FormatError(blob_path.string() + ": fewer arrays than the manifest describes");
            return std::move(arrays[next++]);
        };
        if (!j.at("codec").is_null()) {
            Codec codec;
            codec.input_dim = j["codec"].at("input_dim").get<std::size_t>();
            codec.latent_dim = j["codec"].at("latent_dim").get<std::size_t>();
            codec.hidden = j["codec"].at("hidden").get<std::vector<std::size_t>>();
            const std::size_t layers = codec.hidden.size() + 1;
            for (std::size_t l = 0; l < layers; ++l) {
                Matrix w = take(), b = take();
                codec.encoder.push_back({std::move(w), std::move(b)});
            }
            for (std::size_t l = 0; l < layers; ++l) {
                Matrix w = take(), b = take();
                codec.decoder.push_back({std::move(w), std::move(b)});
            }
            m.codec = std::move(codec);
        }
        m.prototypes.means = take();
        m.prototypes.log_scales = take();
        m.centroids.decay = j.at("centroids").at("decay").get<double>();
        for (const auto& cl : j["centroids"].at("classes")) {
            ClassCentroid cc{take(), cl.at("count").get<std::size_t>(), cl.at("stale").get<bool>()};
            m.centroids.classes.emplace(cl.at("label").get<int>(), std::move(cc));
        }
        if (next != arrays.size()) throw FormatError(blob_path.string() + ": more arrays than the manifest describes");
        const auto shapes = j.at("shapes");
        const auto params = m.parameters();
        if (shapes.size() != params.size()) throw FormatError(json_path.string() + ": shape list does not match parameters");
        for (std::size_t i = 0; i < params.size(); ++i)
            if (shapes[i] != detail::shape(*params[i]))
                throw FormatError(json_path.string() + ": array " + std::to_string(i) + " has shape " +
                                  params[i]->shape_string() + ", manifest says " + shapes[i].dump());
        if (m.codec) check_wiring(*m.codec, m.prototypes.dim());
        c.rng_state = j.at("rng_state").get<std::string>();
        c.config = j.at("config");
        c.history = history_from_json(j.at("history"));
        return c;
    } catch (const nlohmann::ordered_json::exception& e) {
        throw FormatError(json_path.string() + ": " + e.what());
    }
}

/// Binary greyscale image, values clamped to [0, 1] and scaled to 0..255.
inline void write_pgm(const std::filesystem::path& path, std::span<const double> pixels, std::size_t width, std::size_t height) {
    require(pixels.size() == width * height, "write_pgm: pixel count does not match " + std::to_string(width) + "x" +
                                                 std::to_string(height));
    std::string out = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
    for (double v : pixels) {
        const double c = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(c * 255.0))));
    }
    write_file(path, out);
}

} // namespace gmat
