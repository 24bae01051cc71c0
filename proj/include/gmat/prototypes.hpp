#pragma once

// The Gaussian mixture attention layer: diagonal-Gaussian prototypes, softmin
// responsibilities over Mahalanobis distances, responsibility-weighted
// reconstruction and the four loss terms that train it.

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gmat/autodiff.hpp"
#include "gmat/errors.hpp"
#include "gmat/matrix.hpp"
#include "gmat/rng.hpp"

namespace gmat {

/// M diagonal Gaussians in a d-dimensional space, parameterised by mean and log-scale.
struct PrototypeSet {
    Matrix means;       // M x d
    Matrix log_scales;  // M x d, sigma = exp(log_scales)

    std::size_t count() const { return means.rows(); }
    std::size_t dim() const { return means.cols(); }

    Matrix scales() const {
        Matrix s = log_scales;
        for (auto& v : s.values()) v = std::exp(v);
        return s;
    }

    friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;
};

enum class InitStrategy { zeros, data_mean, random_normal };

/// `data` is required for data_mean; random_normal centres its draws on the data mean
/// when data is given and on the origin otherwise.
inline PrototypeSet init_prototypes(std::size_t count, std::size_t dim, InitStrategy strategy, Rng& rng,
                                    const Matrix* data = nullptr, double scale = 1.0) {
    require(count >= 1, "init_prototypes: need at least one prototype");
    require(dim >= 1, "init_prototypes: dimension must be positive");
    PrototypeSet p{Matrix(count, dim), Matrix(count, dim)};
    std::vector<double> centre(dim, 0.0);
    if (data != nullptr) {
        require(data->cols() == dim, "init_prototypes: data width does not match dimension");
        require(data->rows() > 0, "init_prototypes: empty data");
        for (std::size_t r = 0; r < data->rows(); ++r)
            for (std::size_t k = 0; k < dim; ++k) centre[k] += (*data)(r, k);
        for (auto& c : centre) c /= static_cast<double>(data->rows());
    }
    switch (strategy) {
    case InitStrategy::zeros:
        break;
    case InitStrategy::data_mean:
        require(data != nullptr, "init_prototypes: data-mean strategy needs data");
        for (std::size_t j = 0; j < count; ++j)
            for (std::size_t k = 0; k < dim; ++k) p.means(j, k) = centre[k];
        break;
    case InitStrategy::random_normal:
        for (std::size_t j = 0; j < count; ++j)
            for (std::size_t k = 0; k < dim; ++k) p.means(j, k) = centre[k] + scale * rng.normal();
        break;
    }
    return p;
}

/// Diagonal Mahalanobis distance of one point to prototype `j`.
inline double mahalanobis(std::span<const double> x, std::size_t j, const PrototypeSet& protos) {
    require(j < protos.count(), "mahalanobis: prototype index out of range");
    require(x.size() == protos.dim(), "mahalanobis: point dimension mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < x.size(); ++k) {
        const double z = (x[k] - protos.means(j, k)) * std::exp(-protos.log_scales(j, k));
        s += z * z;
    }
    return std::sqrt(s);
}

/// Per-sample softmin weights over prototypes; N x M, rows sum to one.
struct ResponsibilityMatrix {
    Matrix values;

    std::size_t samples() const { return values.rows(); }
    std::size_t prototypes() const { return values.cols(); }
};

/// Prototype parameters bound to a tape.
struct PrototypeVars {
    ad::Var means;
    ad::Var log_scales;
};

inline PrototypeVars bind(ad::Tape& tape, const PrototypeSet& p, bool trainable) {
    if (trainable) return {tape.leaf(p.means), tape.leaf(p.log_scales)};
    return {tape.constant(p.means), tape.constant(p.log_scales)};
}

inline ad::Var distances(const ad::Var& x, const PrototypeVars& p) {
    return ad::sqrt(ad::sq_mahalanobis(x, p.means, p.log_scales));
}

inline ad::Var responsibilities(const ad::Var& x, const PrototypeVars& p) {
    return ad::softmin_rows(distances(x, p));
}

inline ResponsibilityMatrix responsibilities(const Matrix& x, const PrototypeSet& protos) {
    require(x.rows() >= 1, "responsibilities: empty batch");
    ad::Tape tape;
    auto pv = bind(tape, protos, false);
    return {responsibilities(tape.constant(x), pv).value()};
}

/// Softmin of an explicit distance matrix (used where distances are already known).
inline ResponsibilityMatrix softmin(const Matrix& dist) {
    ad::Tape tape;
    return {ad::softmin_rows(tape.constant(dist)).value()};
}

/// Standard normal noise for sampled reconstruction, one draw per (sample, prototype, dim),
/// laid out N x (M*d).
inline Matrix draw_noise(std::size_t n, std::size_t m, std::size_t d, Rng& rng) {
    Matrix e(n, m * d);
    for (auto& v : e.values()) v = rng.normal();
    return e;
}

/// Z = W * mu, plus sum_j w_ij sigma_j * eps_ij when `noise` is given.
inline ad::Var reconstruct(const ad::Var& w, const PrototypeVars& p, const Matrix* noise) {
    ad::Var z = ad::matmul(w, p.means);
    if (noise == nullptr) return z;
    ad::Var eps = w.tape()->constant(*noise);
    return ad::add(z, ad::mix_noise(w, ad::exp(p.log_scales), eps));
}

enum class ReconstructMode { deterministic, sample };

inline Matrix reconstruct(const PrototypeSet& protos, const ResponsibilityMatrix& w, ReconstructMode mode,
                          Rng* rng = nullptr) {
    require(w.prototypes() == protos.count(), "reconstruct: responsibility width != prototype count");
    ad::Tape tape;
    auto pv = bind(tape, protos, false);
    std::optional<Matrix> noise;
    if (mode == ReconstructMode::sample) {
        require(rng != nullptr, "reconstruct: sample mode needs a random stream");
        noise = draw_noise(w.samples(), protos.count(), protos.dim(), *rng);
    }
    return reconstruct(tape.constant(w.values), pv, noise ? &*noise : nullptr).value();
}

/// (1/N) sum_i ||x_i - z_i||^2.
inline ad::Var recon_loss(const ad::Var& x, const ad::Var& z) {
    require(x.value().same_shape(z.value()), "recon_loss: shape mismatch " + x.value().shape_string() +
                                                 " vs " + z.value().shape_string());
    return ad::scale(ad::sum(ad::square(ad::sub(x, z))), 1.0 / static_cast<double>(x.rows()));
}

/// Responsibility-weighted per-prototype mean and variance of a batch.
struct BatchStats {
    Matrix mean;                // M x d
    Matrix var;                 // M x d, variance about the weighted mean
    std::vector<double> mass;   // column sums of W
    std::vector<bool> starved;  // mass below threshold: KL term skipped

    std::size_t active() const {
        std::size_t n = 0;
        for (bool s : starved) n += s ? 0 : 1;
        return n;
    }
};

inline constexpr double kStarvedMass = 1e-12;
inline constexpr double kVarianceFloor = 1e-6;

inline BatchStats weighted_batch_stats(const Matrix& x, const Matrix& w) {
    require(x.rows() == w.rows(), "weighted_batch_stats: batch and responsibilities differ in rows");
    const std::size_t n = x.rows(), m = w.cols(), d = x.cols();
    BatchStats s{Matrix(m, d), Matrix(m, d), std::vector<double>(m, 0.0), std::vector<bool>(m, false)};
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) s.mass[j] += w(i, j);
    for (std::size_t j = 0; j < m; ++j) {
        if (s.mass[j] < kStarvedMass) {
            s.starved[j] = true;
            continue;
        }
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) s.mean(j, k) += w(i, j) * x(i, k);
        for (std::size_t k = 0; k < d; ++k) s.mean(j, k) /= s.mass[j];
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = x(i, k) - s.mean(j, k);
                s.var(j, k) += w(i, j) * diff * diff;
            }
        for (std::size_t k = 0; k < d; ++k) s.var(j, k) /= s.mass[j];
    }
    return s;
}

/// Sum over non-starved prototypes of KL(N(mean_hat, var_hat) || N(mu, sigma^2)), diagonal.
/// The batch statistics are constants: only the prototypes receive gradient.
inline ad::Var kl_alignment_loss(const BatchStats& stats, const PrototypeVars& p) {
    ad::Tape& tape = *p.means.tape();
    const std::size_t m = stats.mean.rows(), d = stats.mean.cols();
    require(p.means.rows() == m && p.means.cols() == d, "kl_alignment_loss: stats do not match prototypes");
    Matrix var_p(m, d), log_sd_p(m, d), mask(m, 1);
    for (std::size_t j = 0; j < m; ++j) {
        mask(j, 0) = stats.starved[j] ? 0.0 : 1.0;
        for (std::size_t k = 0; k < d; ++k) {
            var_p(j, k) = std::max(stats.var(j, k), kVarianceFloor);
            log_sd_p(j, k) = 0.5 * std::log(var_p(j, k));
        }
    }
    ad::Var mean_p = tape.constant(stats.mean);
    ad::Var vp = tape.constant(std::move(var_p));
    ad::Var lsp = tape.constant(std::move(log_sd_p));
    ad::Var inv_var_q = ad::exp(ad::scale(p.log_scales, -2.0));
    ad::Var spread = ad::add(vp, ad::square(ad::sub(mean_p, p.means)));
    ad::Var per_dim = ad::add_scalar(
        ad::add(ad::sub(p.log_scales, lsp), ad::scale(ad::mul(spread, inv_var_q), 0.5)), -0.5);
    return ad::sum(ad::mul(per_dim, tape.constant(std::move(mask))));
}

inline double kl_gaussian(double mean_p, double var_p, double mean_q, double var_q) {
    return 0.5 * std::log(var_q / var_p) + (var_p + (mean_p - mean_q) * (mean_p - mean_q)) / (2.0 * var_q) - 0.5;
}

inline constexpr double kLogFloor = 1e-12;

/// r1 = -mean_i log max_j w_ij, r2 = -mean_j log max_i w_ij, with stop-gradient argmax
/// and logs clamped at 1e-12.
inline std::pair<ad::Var, ad::Var> interpretability_losses(const ad::Var& w) {
    ad::Var r1 = ad::neg(ad::mean(ad::log(ad::clamp_min(ad::max_rows(w), kLogFloor))));
    ad::Var r2 = ad::neg(ad::mean(ad::log(ad::clamp_min(ad::max_cols(w), kLogFloor))));
    return {r1, r2};
}

inline std::pair<double, double> interpretability_losses(const ResponsibilityMatrix& w) {
    ad::Tape tape;
    auto [r1, r2] = interpretability_losses(tape.constant(w.values));
    return {r1.item(), r2.item()};
}

/// Weights of the combined objective. `lambda_ae` scales an optional plain
/// autoencoding term that keeps a codec's decoder informative.
struct LossWeights {
    double beta_kl = 1.0;
    double lambda_r1 = 0.1;
    double lambda_r2 = 0.1;
    double lambda_ce = 1.0;
    double lambda_ae = 0.0;

    void validate() const {
        for (double v : {beta_kl, lambda_r1, lambda_r2, lambda_ce, lambda_ae})
            require(v >= 0.0 && std::isfinite(v), "loss weights must be finite and non-negative");
    }
};

/// Unweighted loss components plus the weighted total.
struct GmatLossBundle {
    double recon = 0.0;
    double kl = 0.0;
    double r1 = 0.0;
    double r2 = 0.0;
    double ce = 0.0;
    double ae = 0.0;
    double total = 0.0;
};

/// Loss terms on a tape; absent terms are left invalid.
struct LossTerms {
    ad::Var recon;
    ad::Var kl;
    ad::Var r1;
    ad::Var r2;
    ad::Var ce;
    ad::Var ae;
};

/// total = recon + beta_kl kl + lambda_r1 r1 + lambda_r2 r2 + lambda_ce ce + lambda_ae ae.
/// Terms with zero weight are not added to the graph.
inline std::pair<ad::Var, GmatLossBundle> total_loss(const LossTerms& terms, const LossWeights& weights) {
    weights.validate();
    require(terms.recon.valid(), "total_loss: reconstruction term is required");
    GmatLossBundle b;
    ad::Var total = terms.recon;
    b.recon = terms.recon.item();
    auto fold = [&](const ad::Var& term, double weight, double& slot) {
        if (!term.valid()) return;
        slot = term.item();
        if (weight != 0.0) total = ad::add(total, ad::scale(term, weight));
    };
    fold(terms.kl, weights.beta_kl, b.kl);
    fold(terms.r1, weights.lambda_r1, b.r1);
    fold(terms.r2, weights.lambda_r2, b.r2);
    fold(terms.ce, weights.lambda_ce, b.ce);
    fold(terms.ae, weights.lambda_ae, b.ae);
    b.total = total.item();
    return {total, b};
}

} // namespace gmat
