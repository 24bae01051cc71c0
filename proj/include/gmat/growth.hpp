#pragma once

// Prototype growth: function-preserving doubling, the splitting indicator, and the
// train / measure / split driver.
//
// Each prototype m is doubled into copies at mu_m +/- delta * s_m * u_m, where s_m is the
// RMS of the prototype's scales. D_m is the antisymmetric part of the copies' mean
// gradients. Which direction u_m to probe: D_m is linear in u_m for small delta, so the
// d axis probes give the copy-offset curvature K_m; the split direction is the
// eigenvector of K_m with the most negative eigenvalue. Prototypes without negative
// curvature along that direction get D_m = 0.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdlib>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Eigenvalues>

#include "gmat/autodiff.hpp"
#include "gmat/data.hpp"
#include "gmat/metrics.hpp"
#include "gmat/model.hpp"
#include "gmat/training.hpp"

namespace gmat {

/// 2M-prototype copy of a model. Copy 2m sits at mu_m + offset_m, copy 2m+1 at mu_m - offset_m.
struct MorphicModel {
    const Model* base = nullptr;
    Model doubled;
    std::vector<std::size_t> original;  // copy -> original prototype
    Matrix offsets;                     // M x d
    double delta = 0.0;
};

/// RMS of each prototype's scales; the unit of the copy offsets.
inline std::vector<double> offset_units(const PrototypeSet& p) {
    std::vector<double> s(p.count(), 0.0);
    for (std::size_t m = 0; m < p.count(); ++m) {
        for (std::size_t k = 0; k < p.dim(); ++k) s[m] += std::exp(2.0 * p.log_scales(m, k));
        s[m] = std::sqrt(s[m] / static_cast<double>(p.dim()));
    }
    return s;
}

/// Doubles every prototype along the given per-prototype directions (rows; unit or zero).
inline MorphicModel morphic_double(const Model& model, double delta, const Matrix& directions) {
    require(delta >= 0.0 && std::isfinite(delta), "morphic_double: delta must be finite and >= 0");
    const auto& p = model.prototypes;
    require(directions.rows() == p.count() && directions.cols() == p.dim(), "morphic_double: direction shape mismatch");
    const auto units = offset_units(p);
    MorphicModel mm;
    mm.base = &model;
    mm.delta = delta;
    mm.offsets = Matrix(p.count(), p.dim());
    mm.doubled.codec = model.codec;
    mm.doubled.centroids = model.centroids;
    mm.doubled.prototypes.means = Matrix(2 * p.count(), p.dim());
    mm.doubled.prototypes.log_scales = Matrix(2 * p.count(), p.dim());
    for (std::size_t m = 0; m < p.count(); ++m) {
        for (std::size_t k = 0; k < p.dim(); ++k) {
            const double off = delta * units[m] * directions(m, k);
            mm.offsets(m, k) = off;
            mm.doubled.prototypes.means(2 * m, k) = p.means(m, k) + off;
            mm.doubled.prototypes.means(2 * m + 1, k) = p.means(m, k) - off;
            mm.doubled.prototypes.log_scales(2 * m, k) = p.log_scales(m, k);
            mm.doubled.prototypes.log_scales(2 * m + 1, k) = p.log_scales(m, k);
        }
        mm.original.push_back(m);
        mm.original.push_back(m);
    }
    return mm;
}

/// Doubling along random unit directions.
inline MorphicModel morphic_double(const Model& model, double delta, Rng& rng) {
    const auto& p = model.prototypes;
    Matrix u(p.count(), p.dim());
    for (std::size_t m = 0; m < p.count(); ++m) {
        double norm = 0.0;
        while (norm < 1e-12) {
            norm = 0.0;
            for (std::size_t k = 0; k < p.dim(); ++k) {
                u(m, k) = rng.normal();
                norm += u(m, k) * u(m, k);
            }
        }
        norm = std::sqrt(norm);
        for (std::size_t k = 0; k < p.dim(); ++k) u(m, k) /= norm;
    }
    return morphic_double(model, delta, u);
}

struct IndicatorConfig {
    double delta = 1e-2;
    std::size_t batch_size = 256;
    std::size_t threads = 0;  // 0: GMAT_THREADS or 1
    std::uint64_t noise_seed = 0;
};

inline std::size_t thread_count(std::size_t requested) {
    if (requested > 0) return requested;
    if (const char* env = std::getenv("GMAT_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v > 0) return static_cast<std::size_t>(v);
    }
    return 1;
}

/// The loss the indicator differentiates: reconstruction plus KL alignment.
/// The regularisers and the label term do not depend smoothly on a copy offset.
inline LossWeights indicator_weights(const LossWeights& w) {
    LossWeights out;
    out.beta_kl = w.beta_kl;
    out.lambda_r1 = out.lambda_r2 = out.lambda_ce = out.lambda_ae = 0.0;
    return out;
}

namespace detail {

// Mean-gradient antisymmetric part, M x d, for precomputed latents z of inputs x.
inline Matrix antisymmetric_gradient(const MorphicModel& mm, const Matrix& x, const Matrix& z, const LossWeights& weights,
                                     const IndicatorConfig& cfg) {
    const std::size_t n = x.rows();
    require(n >= 1, "splitting_direction: empty dataset");
    const std::size_t m = mm.offsets.rows(), d = mm.offsets.cols();
    const auto plan = sequential_batches(n, cfg.batch_size);
    std::vector<Matrix> partial(plan.size());
    const Rng root(cfg.noise_seed);
    const LossWeights lw = indicator_weights(weights);

    auto run = [&](std::size_t b) {
        const auto& idx = plan[b];
        Matrix xb = x.select_rows(idx), zb = z.select_rows(idx);
        Rng noise_rng = root.split("indicator", b);
        Matrix base_noise = draw_noise(idx.size(), m, d, noise_rng);
        Matrix noise(idx.size(), 2 * m * d);  // both copies of a pair share their draw
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < m; ++j)
                for (std::size_t k = 0; k < d; ++k) {
                    noise(i, (2 * j) * d + k) = base_noise(i, j * d + k);
                    noise(i, (2 * j + 1) * d + k) = base_noise(i, j * d + k);
                }
        ad::Tape tape;
        auto pv = bind(tape, mm.doubled.prototypes, true);
        std::optional<CodecVars> cv;
        if (mm.doubled.codec) cv = bind(tape, *mm.doubled.codec, false);
        ad::Var input = tape.constant(xb);
        ad::Var latent = tape.constant(zb);
        ad::Var w = responsibilities(latent, pv);
        ad::Var rec = reconstruct(w, pv, &noise);
        ad::Var out = cv ? decode(*cv, rec) : rec;
        ad::Var loss = recon_loss(input, out);
        if (lw.beta_kl > 0.0) {
            auto stats = weighted_batch_stats(zb, w.value());
            loss = ad::add(loss, ad::scale(kl_alignment_loss(stats, pv), lw.beta_kl));
        }
        std::vector<ad::Var> leaves{pv.means};
        Matrix g = tape.grad(loss, leaves)[0];
        Matrix part(m, d);
        const double share = static_cast<double>(idx.size()) / static_cast<double>(n);
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t k = 0; k < d; ++k) part(j, k) = 0.5 * share * (g(2 * j, k) - g(2 * j + 1, k));
        partial[b] = std::move(part);
    };

    const std::size_t threads = std::min(thread_count(cfg.threads), plan.size());
    if (threads <= 1) {
        for (std::size_t b = 0; b < plan.size(); ++b) run(b);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(threads);
        for (std::size_t t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    for (std::size_t b = t; b < plan.size(); b += threads) run(b);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }
    Matrix total(m, d);
    for (const auto& part : partial)
        for (std::size_t i = 0; i < total.size(); ++i) total[i] += part[i];
    return total;
}

} // namespace detail

/// D_m = mean over the dataset of (grad_{mu_m+} L - grad_{mu_m-} L) / 2, summed over batches
/// in fixed order. Zero when delta = 0.
inline Matrix splitting_direction(const MorphicModel& mm, const Dataset& data, const LossWeights& weights,
                                  const IndicatorConfig& cfg = {}) {
    require(mm.base != nullptr, "splitting_direction: morphic model has no base");
    require(data.size() >= 1, "splitting_direction: empty dataset");
    return detail::antisymmetric_gradient(mm, data.x, latent(*mm.base, data.x), weights, cfg);
}

/// S = ||D||^2.
inline double splitting_strength(std::span<const double> d) {
    double s = 0.0;
    for (double v : d) s += v * v;
    return s;
}

struct SplitAnalysis {
    Matrix directions;               // M x d, D_m (zero where the split does not descend)
    std::vector<double> strengths;   // S_m
    std::vector<double> curvature;   // most negative eigenvalue of K_m
    Matrix eigvecs;                  // M x d, its eigenvector
};

/// Probes the copy-offset curvature of every prototype, then measures D_m along the
/// most negative curvature direction.
inline SplitAnalysis analyze_splits(const Model& model, const Dataset& data, const LossWeights& weights,
                                    const IndicatorConfig& cfg = {}) {
    require(data.size() >= 1, "analyze_splits: empty dataset");
    require(cfg.delta > 0.0, "analyze_splits: delta must be positive");
    const std::size_t m = model.prototypes.count(), d = model.prototypes.dim();
    const Matrix z = latent(model, data.x);
    const auto units = offset_units(model.prototypes);

    std::vector<Eigen::MatrixXd> k(m, Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)));
    for (std::size_t axis = 0; axis < d; ++axis) {
        Matrix u(m, d);
        for (std::size_t j = 0; j < m; ++j) u(j, axis) = 1.0;
        auto g = detail::antisymmetric_gradient(morphic_double(model, cfg.delta, u), data.x, z, weights, cfg);
        for (std::size_t j = 0; j < m; ++j)
            for (std::size_t r = 0; r < d; ++r)
                k[j](static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(axis)) = g(j, r) / (cfg.delta * units[j]);
    }

    SplitAnalysis a;
    a.eigvecs = Matrix(m, d);
    a.curvature.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        Eigen::MatrixXd sym = 0.5 * (k[j] + k[j].transpose());
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
        require(es.info() == Eigen::Success, "analyze_splits: eigen decomposition failed");
        a.curvature[j] = es.eigenvalues()(0);
        for (std::size_t r = 0; r < d; ++r) a.eigvecs(j, r) = es.eigenvectors()(static_cast<Eigen::Index>(r), 0);
    }
    a.directions = detail::antisymmetric_gradient(morphic_double(model, cfg.delta, a.eigvecs), data.x, z, weights, cfg);
    a.strengths.assign(m, 0.0);
    for (std::size_t j = 0; j < m; ++j) {
        double along = 0.0;
        for (std::size_t r = 0; r < d; ++r) along += a.directions(j, r) * a.eigvecs(j, r);
        if (a.curvature[j] < 0.0 && along < 0.0) {
            a.strengths[j] = splitting_strength(a.directions.row_span(j));
        } else {
            for (std::size_t r = 0; r < d; ++r) a.directions(j, r) = 0.0;
        }
    }
    return a;
}

/// Replaces prototype `index` by two prototypes at mu +/- eta * direction / ||direction||,
/// stored at `index` and `index + 1`. Both keep the original log-scales.
inline Model apply_split(const Model& model, std::size_t index, std::span<const double> direction, double eta) {
    const auto& p = model.prototypes;
    require(index < p.count(), "apply_split: prototype index out of range");
    require(direction.size() == p.dim(), "apply_split: direction has wrong length");
    require(eta > 0.0 && std::isfinite(eta), "apply_split: eta must be positive");
    const double norm = std::sqrt(splitting_strength(direction));
    require(norm > 0.0 && std::isfinite(norm), "apply_split: zero split direction");
    const std::size_t d = p.dim();
    Model out = model;
    out.prototypes.means = Matrix(p.count() + 1, d);
    out.prototypes.log_scales = Matrix(p.count() + 1, d);
    for (std::size_t src = 0, dst = 0; src < p.count(); ++src, ++dst) {
        for (std::size_t k = 0; k < d; ++k) {
            out.prototypes.means(dst, k) = p.means(src, k);
            out.prototypes.log_scales(dst, k) = p.log_scales(src, k);
        }
        if (src != index) continue;
        ++dst;
        for (std::size_t k = 0; k < d; ++k) {
            const double off = eta * direction[k] / norm;
            out.prototypes.means(dst - 1, k) = p.means(src, k) + off;
            out.prototypes.means(dst, k) = p.means(src, k) - off;
            out.prototypes.log_scales(dst, k) = p.log_scales(src, k);
        }
    }
    return out;
}

struct GrowthConfig {
    double epsilon = 1e-5;
    double delta = 1e-2;
    double eta = 0.05;
    std::size_t max_iterations = 30;
    std::size_t indicator_batch = 256;
    bool enabled = true;

    void validate() const {
        require(epsilon > 0.0, "grow: epsilon must be positive");
        require(delta > 0.0 && std::isfinite(delta), "grow: delta must be positive");
        require(eta > 0.0 && std::isfinite(eta), "grow: eta must be positive");
        require(max_iterations >= 1, "grow: max_iterations must be at least 1");
    }
};

struct GrowthRecord {
    std::size_t iteration = 0;
    std::size_t prototypes = 0;
    std::vector<double> strengths;
    double max_strength = 0.0;
    long chosen = -1;  // split prototype, -1 when none
    GmatLossBundle losses;
    double nmi = std::numeric_limits<double>::quiet_NaN();
    std::size_t epochs = 0;
};

struct GrowthHistory {
    std::vector<GrowthRecord> records;

    std::size_t size() const { return records.size(); }
    const GrowthRecord& back() const { return records.back(); }
};

/// Called after each record is appended, with the model the record describes.
using GrowthObserver = std::function<void(const GrowthRecord&, const Model&)>;

/// The data plus floor(ratio * N) replay samples, so the indicator sees the same mixture
/// that training does.
inline Dataset with_replay(const Dataset& data, const TrainHooks& hooks, Rng rng) {
    if (!hooks.replay || hooks.replay_ratio <= 0.0) return data;
    const auto extra = static_cast<std::size_t>(std::floor(hooks.replay_ratio * static_cast<double>(data.size())));
    if (extra == 0) return data;
    Matrix r = hooks.replay(extra, rng);
    Dataset out;
    out.x = Matrix(data.size() + extra, data.dim());
    std::copy(data.x.values().begin(), data.x.values().end(), out.x.values().begin());
    std::copy(r.values().begin(), r.values().end(), out.x.values().begin() + static_cast<std::ptrdiff_t>(data.x.size()));
    out.name = data.name;
    return out;
}

inline std::size_t argmax_strength(const std::vector<double>& s) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < s.size(); ++j)
        if (s[j] > s[best]) best = j;
    return best;
}

/// Train, measure, split the strongest prototype while its strength exceeds epsilon.
/// The last record always describes the returned model.
inline GrowthHistory grow_until_converged(Model& model, const Dataset& data, const GrowthConfig& gcfg,
                                          const TrainConfig& tcfg, const LossWeights& weights, Rng& rng,
                                          const TrainHooks& hooks = {}, const GrowthObserver& observe = {}) {
    gcfg.validate();
    tcfg.validate();
    require(data.size() >= 1, "grow: empty dataset");
    GrowthHistory history;
    const std::size_t iterations = gcfg.enabled ? gcfg.max_iterations : 1;
    for (std::size_t t = 0; t < iterations; ++t) {
        GrowthRecord rec;
        rec.iteration = t;
        Rng train_rng = rng.split("train", t);
        try {
            rec.epochs = train_to_convergence(model, data, tcfg, weights, train_rng, hooks).epochs;
        } catch (const NumericFailure& e) {
            throw NumericFailure("growth iteration " + std::to_string(t) + ": " + e.what());
        }
        rec.prototypes = model.prototypes.count();
        rec.losses = evaluate_loss(model, data, weights, false);
        if (data.labels) rec.nmi = nmi(*data.labels, assign_clusters(model, data.x));

        std::optional<SplitAnalysis> analysis;
        if (gcfg.enabled) {
            IndicatorConfig icfg;
            icfg.delta = gcfg.delta;
            icfg.batch_size = gcfg.indicator_batch;
            icfg.noise_seed = rng.split("indicator", t).next_u64();
            analysis = analyze_splits(model, with_replay(data, hooks, rng.split("replay", t)), weights, icfg);
            rec.strengths = analysis->strengths;
            rec.max_strength = *std::max_element(rec.strengths.begin(), rec.strengths.end());
        }
        const bool split = analysis && rec.max_strength > gcfg.epsilon && t + 1 < iterations;
        if (split) rec.chosen = static_cast<long>(argmax_strength(rec.strengths));
        history.records.push_back(rec);
        if (observe) observe(history.records.back(), model);
        if (!split) break;
        const auto j = static_cast<std::size_t>(rec.chosen);
        model = apply_split(model, j, analysis->directions.row_span(j), gcfg.eta);
    }
    return history;
}

} // namespace gmat
