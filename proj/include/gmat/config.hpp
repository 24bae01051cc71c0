#pragma once

// Experiment configuration: flat `key = value` text with optional [section] headers
// that prefix the keys below them. Unknown keys are errors.

#include <cmath>
#include <concepts>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gmat/errors.hpp"
#include "gmat/growth.hpp"
#include "gmat/prototypes.hpp"
#include "gmat/training.hpp"

namespace gmat {

/// Raw values by dotted key, plus the line each came from.
struct ConfigText {
    std::map<std::string, std::string> values;
    std::map<std::string, int> lines;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Drops a trailing comment that is not inside a quoted string.
inline std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

} // namespace detail

inline ConfigText parse_config_text(std::istream& in) {
    ConfigText out;
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = detail::trim(detail::strip_comment(line));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
        if (!section.empty()) key = section + "." + key;
        if (out.values.count(key)) throw ConfigError("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        out.values[key] = value;
        out.lines[key] = lineno;
    }
    return out;
}

struct DataSpec {
    std::string source = "blobs";  // blobs | moons | idx | csv
    std::size_t n = 2000;
    std::size_t k = 4;
    double cluster_std = 0.5;
    double box_lo = -10.0;
    double box_hi = 10.0;
    std::vector<double> centers;  // flattened k x 2; overrides k / box when set
    double noise = 0.05;
    std::uint64_t seed = 0;
    std::string images;
    std::string labels;
    std::string path;  // csv
    std::size_t subsample = 0;
    bool normalize = false;
    double holdout = 0.0;
};

struct ModelSpec {
    bool codec = false;
    std::vector<std::size_t> hidden;
    std::size_t latent = 2;
    std::size_t initial_prototypes = 1;
    std::string init = "data_mean";
    double init_scale = 1.0;
    double centroid_decay = 0.9;
};

struct ExperimentConfig {
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    DataSpec data;
    ModelSpec model;
    LossWeights loss;
    bool label_matching = false;
    TrainConfig train;
    GrowthConfig grow;
    double replay_ratio = 1.0;
    std::string task_scheme;  // empty | split-pairs | custom
    std::vector<std::vector<int>> task_groups;
    std::string checkpoint;  // eval: checkpoint.json path
    std::filesystem::path base_dir;  // relative paths resolve against the config file
};

namespace detail {

struct Reader {
    const ConfigText& text;
    std::set<std::string> used;

    bool has(const std::string& key) const { return text.values.count(key) > 0; }

    [[noreturn]] void fail(const std::string& key, const std::string& why) const {
        auto it = text.lines.find(key);
        const std::string where = it == text.lines.end() ? "" : " (line " + std::to_string(it->second) + ")";
        throw ConfigError("config key '" + key + "'" + where + ": " + why);
    }

    const std::string* raw(const std::string& key) {
        auto it = text.values.find(key);
        if (it == text.values.end()) return nullptr;
        used.insert(key);
        return &it->second;
    }

    void get(const std::string& key, double& out) {
        if (auto* v = raw(key)) {
            std::size_t pos = 0;
            try {
                out = std::stod(*v, &pos);
            } catch (...) {
                fail(key, "expected a number, got '" + *v + "'");
            }
            if (pos != v->size() || !std::isfinite(out)) fail(key, "expected a finite number, got '" + *v + "'");
        }
    }

    template <std::unsigned_integral T>
    void get(const std::string& key, T& out) {
        if (auto* v = raw(key)) {
            std::size_t pos = 0;
            if (v->empty() || (*v)[0] == '-') fail(key, "expected a non-negative integer, got '" + *v + "'");
            try {
                out = static_cast<T>(std::stoull(*v, &pos));
            } catch (...) {
                fail(key, "expected a non-negative integer, got '" + *v + "'");
            }
            if (pos != v->size()) fail(key, "expected a non-negative integer, got '" + *v + "'");
        }
    }

    void get(const std::string& key, bool& out) {
        if (auto* v = raw(key)) {
            if (*v == "true") out = true;
            else if (*v == "false") out = false;
            else fail(key, "expected true or false, got '" + *v + "'");
        }
    }

    void get(const std::string& key, std::string& out) {
        if (auto* v = raw(key)) {
            if (v->size() < 2 || v->front() != '"' || v->back() != '"') fail(key, "expected a quoted string");
            out = v->substr(1, v->size() - 2);
        }
    }

    // [a, b, ...] or nested [[a, b], [c]]
    std::vector<std::string> items(const std::string& key, const std::string& v) {
        if (v.size() < 2 || v.front() != '[' || v.back() != ']') fail(key, "expected an array");
        std::vector<std::string> out;
        std::string cur;
        int depth = 0;
        for (std::size_t i = 1; i + 1 < v.size(); ++i) {
            const char c = v[i];
            if (c == '[') ++depth;
            if (c == ']') --depth;
            if (c == ',' && depth == 0) {
                out.push_back(trim(cur));
                cur.clear();
            } else {
                cur += c;
            }
        }
        if (!trim(cur).empty()) out.push_back(trim(cur));
        return out;
    }

    void get(const std::string& key, std::vector<double>& out) {
        if (auto* v = raw(key)) {
            out.clear();
            for (const auto& item : items(key, *v)) {
                std::size_t pos = 0;
                double x = 0.0;
                try {
                    x = std::stod(item, &pos);
                } catch (...) {
                    fail(key, "array entry '" + item + "' is not a number");
                }
                if (pos != item.size()) fail(key, "array entry '" + item + "' is not a number");
                out.push_back(x);
            }
        }
    }

    void get(const std::string& key, std::vector<std::size_t>& out) {
        if (auto* v = raw(key)) {
            out.clear();
            for (const auto& item : items(key, *v)) {
                if (item.empty() || item.find_first_not_of("0123456789") != std::string::npos)
                    fail(key, "array entry '" + item + "' is not a non-negative integer");
                out.push_back(static_cast<std::size_t>(std::stoull(item)));
            }
        }
    }

    void get(const std::string& key, std::vector<std::vector<int>>& out) {
        if (auto* v = raw(key)) {
            out.clear();
            for (const auto& group : items(key, *v)) {
                std::vector<int> g;
                for (const auto& item : items(key, group)) {
                    if (item.empty() || item.find_first_not_of("-0123456789") != std::string::npos)
                        fail(key, "group entry '" + item + "' is not an integer");
                    g.push_back(std::stoi(item));
                }
                out.push_back(std::move(g));
            }
        }
    }
};

} // namespace detail

inline ExperimentConfig parse_config(const ConfigText& text) {
    ExperimentConfig c;
    detail::Reader r{text, {}};
    r.get("seed", c.seed);
    r.get("output_dir", c.output_dir);

    r.get("data.source", c.data.source);
    r.get("data.n", c.data.n);
    r.get("data.k", c.data.k);
    r.get("data.cluster_std", c.data.cluster_std);
    std::vector<double> box{c.data.box_lo, c.data.box_hi};
    r.get("data.center_box", box);
    r.get("data.centers", c.data.centers);
    r.get("data.noise", c.data.noise);
    c.data.seed = c.seed;
    r.get("data.seed", c.data.seed);
    r.get("data.images", c.data.images);
    r.get("data.labels", c.data.labels);
    r.get("data.path", c.data.path);
    r.get("data.subsample", c.data.subsample);
    r.get("data.normalize", c.data.normalize);
    r.get("data.holdout", c.data.holdout);

    r.get("model.codec", c.model.codec);
    r.get("model.hidden", c.model.hidden);
    r.get("model.latent", c.model.latent);
    r.get("model.initial_prototypes", c.model.initial_prototypes);
    r.get("model.init", c.model.init);
    r.get("model.init_scale", c.model.init_scale);

    r.get("loss.beta_kl", c.loss.beta_kl);
    r.get("loss.lambda_r1", c.loss.lambda_r1);
    r.get("loss.lambda_r2", c.loss.lambda_r2);
    r.get("loss.lambda_ce", c.loss.lambda_ce);
    r.get("loss.lambda_ae", c.loss.lambda_ae);
    r.get("loss.label_matching", c.label_matching);
    r.get("loss.centroid_decay", c.model.centroid_decay);

    r.get("train.lr", c.train.learning_rate);
    r.get("train.max_epochs", c.train.max_epochs);
    r.get("train.patience", c.train.patience);
    r.get("train.batch_size", c.train.batch_size);
    r.get("train.pretrain_epochs", c.train.pretrain_epochs);
    r.get("train.freeze_encoder", c.train.freeze_encoder);

    r.get("grow.enabled", c.grow.enabled);
    r.get("grow.epsilon", c.grow.epsilon);
    r.get("grow.delta", c.grow.delta);
    r.get("grow.eta", c.grow.eta);
    r.get("grow.max_iterations", c.grow.max_iterations);
    r.get("grow.indicator_batch", c.grow.indicator_batch);

    r.get("replay.ratio", c.replay_ratio);
    r.get("tasks.scheme", c.task_scheme);
    r.get("tasks.groups", c.task_groups);
    r.get("eval.checkpoint", c.checkpoint);

    for (const auto& [key, value] : text.values)
        if (!r.used.count(key)) r.fail(key, "unknown key");

    // ranges
    if (box.size() != 2 || !(box[0] < box[1])) r.fail("data.center_box", "expected [lo, hi] with lo < hi");
    c.data.box_lo = box[0];
    c.data.box_hi = box[1];
    c.train.label_matching = c.label_matching;
    const std::set<std::string> sources{"blobs", "moons", "idx", "csv"};
    if (!sources.count(c.data.source)) r.fail("data.source", "unknown generator '" + c.data.source + "' (valid: blobs, moons, idx, csv)");
    if (c.data.n < 2) r.fail("data.n", "must be at least 2");
    if (c.data.k < 1) r.fail("data.k", "must be at least 1");
    if (c.data.cluster_std < 0.0) r.fail("data.cluster_std", "must be >= 0");
    if (c.data.centers.size() % 2 != 0) r.fail("data.centers", "expected x, y pairs");
    if (c.data.noise < 0.0) r.fail("data.noise", "must be >= 0");
    if (c.data.holdout < 0.0 || c.data.holdout >= 1.0) r.fail("data.holdout", "must be in [0, 1)");
    if (c.model.latent < 1) r.fail("model.latent", "must be positive");
    if (c.model.initial_prototypes < 1) r.fail("model.initial_prototypes", "must be positive");
    for (auto h : c.model.hidden)
        if (h < 1) r.fail("model.hidden", "widths must be positive");
    if (c.model.init != "data_mean" && c.model.init != "zeros" && c.model.init != "random_normal")
        r.fail("model.init", "expected data_mean, zeros or random_normal");
    if (c.model.centroid_decay < 0.0 || c.model.centroid_decay >= 1.0) r.fail("loss.centroid_decay", "must be in [0, 1)");
    for (const char* key : {"loss.beta_kl", "loss.lambda_r1", "loss.lambda_r2", "loss.lambda_ce", "loss.lambda_ae"}) {
        double v = 0.0;
        r.get(key, v);
        if (v < 0.0) r.fail(key, "must be >= 0");
    }
    if (c.train.learning_rate <= 0.0) r.fail("train.lr", "must be positive");
    if (c.train.patience < 1) r.fail("train.patience", "must be positive");
    if (c.train.batch_size < 1) r.fail("train.batch_size", "must be positive");
    if (c.grow.epsilon <= 0.0) r.fail("grow.epsilon", "must be positive");
    if (c.grow.delta <= 0.0) r.fail("grow.delta", "must be positive");
    if (c.grow.eta <= 0.0) r.fail("grow.eta", "must be positive");
    if (c.grow.max_iterations < 1) r.fail("grow.max_iterations", "must be at least 1");
    if (c.grow.indicator_batch < 1) r.fail("grow.indicator_batch", "must be positive");
    if (c.replay_ratio < 0.0) r.fail("replay.ratio", "must be >= 0");
    if (!c.task_scheme.empty() && c.task_scheme != "split-pairs" && c.task_scheme != "custom")
        r.fail("tasks.scheme", "expected split-pairs or custom");
    if (c.task_scheme == "custom" && c.task_groups.empty()) r.fail("tasks.groups", "required for the custom scheme");
    return c;
}

/// Resolves a path from the config against the config file's directory.
inline std::string resolve_path(const ExperimentConfig& c, const std::string& p) {
    if (p.empty()) return p;
    std::filesystem::path path(p);
    if (path.is_absolute() || c.base_dir.empty()) return path.string();
    return (c.base_dir / path).string();
}

/// Reads, parses and validates; referenced input files must exist. A seed override
/// replaces `seed`, and with it the data seed unless `data.seed` is set.
inline ExperimentConfig load_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    auto text = parse_config_text(in);
    if (seed_override) text.values["seed"] = std::to_string(*seed_override);
    auto c = parse_config(text);
    c.base_dir = std::filesystem::path(path).parent_path();
    auto must_exist = [&](const std::string& key, const std::string& p) {
        if (p.empty()) throw ConfigError("config key '" + key + "': required for data.source = \"" + c.data.source + "\"");
        if (!std::filesystem::exists(resolve_path(c, p)))
            throw ConfigError("config key '" + key + "': file '" + resolve_path(c, p) + "' does not exist");
    };
    if (c.data.source == "idx") {
        must_exist("data.images", c.data.images);
        must_exist("data.labels", c.data.labels);
    }
    if (c.data.source == "csv") must_exist("data.path", c.data.path);
    return c;
}

inline ExperimentConfig config_from_string(const std::string& s) {
    std::istringstream in(s);
    return parse_config(parse_config_text(in));
}

} // namespace gmat
