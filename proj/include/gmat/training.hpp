#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "gmat/autodiff.hpp"
#include "gmat/data.hpp"
#include "gmat/model.hpp"
#include "gmat/rng.hpp"

namespace gmat {

/// Adaptive-moment first-order optimiser over a fixed list of arrays.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads) {
        require(params.size() == grads.size(), "Adam: parameter/gradient count mismatch");
        if (m_.empty()) {
            for (auto* p : params) {
                m_.emplace_back(p->rows(), p->cols());
                v_.emplace_back(p->rows(), p->cols());
            }
        }
        require(m_.size() == params.size(), "Adam: parameter list changed between steps");
        ++t_;
        const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (std::size_t p = 0; p < params.size(); ++p) {
            Matrix& w = *params[p];
            const Matrix& g = grads[p];
            require(w.same_shape(g) && w.same_shape(m_[p]), "Adam: shape changed between steps");
            for (std::size_t i = 0; i < w.size(); ++i) {
                m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * g[i];
                v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * g[i] * g[i];
                w[i] -= lr_ * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + eps_);
            }
        }
    }

    std::size_t steps() const { return t_; }

private:
    double lr_, beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t max_epochs = 500;
    std::size_t patience = 50;
    std::size_t batch_size = 128;
    double min_relative_improvement = 1e-5;
    bool label_matching = false;
    std::size_t pretrain_epochs = 0;  // codec warm-up epochs before prototypes are initialised
    bool freeze_encoder = false;      // keep encoder weights fixed after the warm-up

    void validate() const {
        require(learning_rate > 0.0 && std::isfinite(learning_rate), "train: learning rate must be positive");
        require(batch_size >= 1, "train: batch size must be positive");
        require(patience >= 1, "train: patience must be positive");
    }
};

/// Draws `n` synthetic input-space rows to append to each training batch.
using ReplaySampler = std::function<Matrix(std::size_t n, Rng& rng)>;

struct TrainHooks {
    ReplaySampler replay;
    double replay_ratio = 0.0;
    /// Epoch index and the row-weighted mean of each loss component over the epoch.
    std::function<void(std::size_t, const GmatLossBundle&)> on_epoch;
};

struct TrainResult {
    std::size_t epochs = 0;
    double best_loss = std::numeric_limits<double>::infinity();
};

namespace detail {

struct Batch {
    Matrix x;
    std::vector<int> labels;  // -1 marks unlabelled rows
};

inline Batch make_batch(const Dataset& d, const std::vector<std::size_t>& idx, const TrainHooks& hooks, Rng& replay_rng) {
    Batch b;
    b.x = d.x.select_rows(idx);
    b.labels.assign(idx.size(), -1);
    if (d.labels)
        for (std::size_t i = 0; i < idx.size(); ++i) b.labels[i] = (*d.labels)[idx[i]];
    if (hooks.replay && hooks.replay_ratio > 0.0) {
        const auto extra = static_cast<std::size_t>(std::floor(hooks.replay_ratio * static_cast<double>(idx.size())));
        if (extra > 0) {
            Matrix r = hooks.replay(extra, replay_rng);
            require(r.cols() == b.x.cols() && r.rows() == extra, "replay sampler returned a wrong shape");
            Matrix joined(b.x.rows() + extra, b.x.cols());
            std::copy(b.x.values().begin(), b.x.values().end(), joined.values().begin());
            std::copy(r.values().begin(), r.values().end(), joined.values().begin() + static_cast<std::ptrdiff_t>(b.x.size()));
            b.x = std::move(joined);
            b.labels.insert(b.labels.end(), extra, -1);
        }
    }
    return b;
}

} // namespace detail

/// Mini-batch Adam until the epoch-mean total loss fails to improve by more than
/// `min_relative_improvement` (relative) for `patience` epochs, or `max_epochs` is reached.
/// The best-loss parameters are restored. Returns the number of epochs run.
inline TrainResult train_to_convergence(Model& model, const Dataset& data, const TrainConfig& cfg,
                                        const LossWeights& weights, Rng& rng, const TrainHooks& hooks = {}) {
    cfg.validate();
    weights.validate();
    require(data.size() >= 1, "train: empty dataset");
    TrainResult result;
    if (cfg.max_epochs == 0) return result;

    Adam opt(cfg.learning_rate);
    Model best = model;
    std::size_t since_best = 0;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        Rng batch_rng = rng.split("batching", epoch);
        Rng sample_rng = rng.split("sampling", epoch);
        Rng replay_rng = rng.split("replay", epoch);
        double loss_sum = 0.0;
        GmatLossBundle mean;
        std::size_t rows = 0;
        try {
            for (const auto& idx : batches(data.size(), cfg.batch_size, batch_rng)) {
                auto batch = detail::make_batch(data, idx, hooks, replay_rng);
                if (cfg.label_matching && data.labeled() && model.codec)
                    update_centroids(model.centroids, encode(*model.codec, batch.x), batch.labels);
                else if (cfg.label_matching && data.labeled())
                    update_centroids(model.centroids, batch.x, batch.labels);

                ad::Tape tape;
                auto vars = bind(tape, model, true);
                Matrix noise = draw_noise(batch.x.rows(), model.prototypes.count(), model.prototypes.dim(), sample_rng);
                ForwardOptions fo;
                fo.noise = &noise;
                fo.labels = batch.labels;
                fo.label_matching = cfg.label_matching;
                auto f = forward(tape, vars, model, batch.x, weights, fo);
                auto grads = tape.grad(f.total, vars.all);
                if (cfg.freeze_encoder && model.codec)
                    for (std::size_t i = 0; i < 2 * model.codec->encoder.size(); ++i) grads[i].fill(0.0);
                opt.step(model.parameters(), grads);
                const auto r = static_cast<double>(batch.x.rows());
                loss_sum += f.bundle.total * r;
                mean.recon += f.bundle.recon * r;
                mean.kl += f.bundle.kl * r;
                mean.r1 += f.bundle.r1 * r;
                mean.r2 += f.bundle.r2 * r;
                mean.ce += f.bundle.ce * r;
                mean.ae += f.bundle.ae * r;
                rows += batch.x.rows();
            }
        } catch (const NumericFailure& e) {
            throw NumericFailure("epoch " + std::to_string(epoch) + ": " + e.what());
        }
        const double epoch_loss = loss_sum / static_cast<double>(rows);
        if (!std::isfinite(epoch_loss)) throw NumericFailure("epoch " + std::to_string(epoch) + ": non-finite loss");
        if (hooks.on_epoch) {
            const auto n = static_cast<double>(rows);
            for (double* v : {&mean.recon, &mean.kl, &mean.r1, &mean.r2, &mean.ce, &mean.ae}) *v /= n;
            mean.total = epoch_loss;
            hooks.on_epoch(epoch, mean);
        }
        result.epochs = epoch + 1;
        if (epoch_loss < result.best_loss - cfg.min_relative_improvement * std::abs(result.best_loss) ||
            !std::isfinite(result.best_loss)) {
            result.best_loss = epoch_loss;
            best = model;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model = std::move(best);
    return result;
}

/// Trains the codec alone: ||x - D(E(x))||^2, plus lambda_ce times the label matching
/// term when `cfg.label_matching` is set and the data is labelled. Prototypes are untouched.
inline std::size_t pretrain_codec(Model& model, const Dataset& data, const TrainConfig& cfg, const LossWeights& weights,
                                  Rng& rng) {
    if (!model.codec || cfg.pretrain_epochs == 0) return 0;
    const bool match = cfg.label_matching && data.labeled() && weights.lambda_ce > 0.0;
    Adam opt(cfg.learning_rate);
    for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
        Rng batch_rng = rng.split("batching", epoch);
        for (const auto& idx : batches(data.size(), cfg.batch_size, batch_rng)) {
            Matrix xb = data.x.select_rows(idx);
            std::vector<int> labels;
            if (match) {
                for (auto i : idx) labels.push_back((*data.labels)[i]);
                update_centroids(model.centroids, encode(*model.codec, xb), labels);
            }
            ad::Tape tape;
            auto cv = bind(tape, *model.codec, true);
            ad::Var input = tape.constant(xb);
            ad::Var z = encode(cv, input);
            ad::Var loss = recon_loss(input, decode(cv, z));
            if (match && model.centroids.size() >= 2)
                loss = ad::add(loss, ad::scale(label_match_loss(z, model.centroids, labels), weights.lambda_ce));
            std::vector<ad::Var> leaves;
            std::vector<Matrix*> params;
            for (std::size_t i = 0; i < cv.encoder.size(); ++i) {
                leaves.push_back(cv.encoder[i].weight);
                leaves.push_back(cv.encoder[i].bias);
                params.push_back(&model.codec->encoder[i].weight);
                params.push_back(&model.codec->encoder[i].bias);
            }
            for (std::size_t i = 0; i < cv.decoder.size(); ++i) {
                leaves.push_back(cv.decoder[i].weight);
                leaves.push_back(cv.decoder[i].bias);
                params.push_back(&model.codec->decoder[i].weight);
                params.push_back(&model.codec->decoder[i].bias);
            }
            try {
                opt.step(params, tape.grad(loss, leaves));
            } catch (const NumericFailure& e) {
                throw NumericFailure("pretraining epoch " + std::to_string(epoch) + ": " + e.what());
            }
        }
    }
    return cfg.pretrain_epochs;
}

} // namespace gmat
