#pragma once

// Generative replay: frozen snapshots of the prototypes and decoder produce synthetic
// inputs for earlier tasks.

#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "gmat/data.hpp"
#include "gmat/growth.hpp"
#include "gmat/model.hpp"
#include "gmat/training.hpp"

namespace gmat {

class ReplayGenerator {
public:
    ReplayGenerator(std::optional<Codec> codec, PrototypeSet prototypes, std::size_t task)
        : codec_(std::move(codec)), prototypes_(std::move(prototypes)), task_(task) {}

    const std::optional<Codec>& codec() const { return codec_; }
    const PrototypeSet& prototypes() const { return prototypes_; }
    std::size_t task() const { return task_; }
    std::size_t input_dim() const { return codec_ ? codec_->input_dim : prototypes_.dim(); }

    friend bool operator==(const ReplayGenerator&, const ReplayGenerator&) = default;

private:
    std::optional<Codec> codec_;
    PrototypeSet prototypes_;
    std::size_t task_;
};

inline ReplayGenerator snapshot_generator(const Model& model, std::size_t task = 0) {
    require(model.prototypes.count() >= 1, "snapshot_generator: model has no prototypes");
    return ReplayGenerator(model.codec, model.prototypes, task);
}

struct ReplayBatch {
    Matrix x;                 // n x input dim
    std::vector<int> source;  // originating prototype of each row
};

/// Prototype uniform over M, z ~ N(mu_j, diag(sigma_j^2)), x = decode(z).
inline ReplayBatch sample_replay(const ReplayGenerator& gen, std::size_t n, Rng& rng) {
    require(n >= 1, "sample_replay: n must be positive");
    const auto& p = gen.prototypes();
    const std::size_t d = p.dim();
    Matrix z(n, d);
    ReplayBatch out;
    out.source.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto j = static_cast<std::size_t>(rng.below(p.count()));
        out.source[i] = static_cast<int>(j);
        for (std::size_t k = 0; k < d; ++k) z(i, k) = p.means(j, k) + std::exp(p.log_scales(j, k)) * rng.normal();
    }
    out.x = gen.codec() ? decode(*gen.codec(), z) : std::move(z);
    return out;
}

/// Called after each task with the task index, the model, and that task's history.
using TaskObserver = std::function<void(std::size_t, const Model&, const GrowthHistory&)>;

/// Trains on each task in order. From the second task on, batches are augmented with
/// replay drawn from a snapshot taken at the task boundary.
inline std::vector<GrowthHistory> continual_fit(Model& model, const TaskStream& stream, double replay_ratio,
                                                const TrainConfig& tcfg, const GrowthConfig& gcfg,
                                                const LossWeights& weights, Rng& rng, const TaskObserver& observe = {}) {
    require(!stream.tasks.empty(), "continual_fit: empty task stream");
    require(replay_ratio >= 0.0 && std::isfinite(replay_ratio), "continual_fit: replay ratio must be >= 0");
    std::vector<GrowthHistory> out;
    for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
        TrainHooks hooks;
        std::optional<ReplayGenerator> gen;
        if (t > 0 && replay_ratio > 0.0) {
            gen.emplace(snapshot_generator(model, t - 1));
            hooks.replay_ratio = replay_ratio;
            hooks.replay = [&gen](std::size_t n, Rng& r) { return sample_replay(*gen, n, r).x; };
        }
        Rng task_rng = rng.split("task", t);
        try {
            out.push_back(grow_until_converged(model, stream.tasks[t], gcfg, tcfg, weights, task_rng, hooks));
        } catch (const NumericFailure& e) {
            throw NumericFailure("task " + std::to_string(t) + ": " + e.what());
        }
        if (observe) observe(t, model, out.back());
    }
    return out;
}

} // namespace gmat
