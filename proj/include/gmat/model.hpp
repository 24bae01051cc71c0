#pragma once

// Encoder -> mixture layer -> decoder, with the full training objective.
// Without a codec the mixture layer works directly in input space.

#include <cstddef>
#include <optional>
#include <span>
#include <tuple>
#include <vector>

#include "gmat/autodiff.hpp"
#include "gmat/codec.hpp"
#include "gmat/data.hpp"
#include "gmat/prototypes.hpp"

namespace gmat {

struct Model {
    std::optional<Codec> codec;
    PrototypeSet prototypes;
    ClassCentroids centroids;

    std::size_t input_dim() const { return codec ? codec->input_dim : prototypes.dim(); }
    std::size_t latent_dim() const { return prototypes.dim(); }

    /// Trainable arrays in a fixed order: encoder (W, b)..., decoder (W, b)..., means, log-scales.
    std::vector<Matrix*> parameters() {
        std::vector<Matrix*> out;
        if (codec) {
            for (auto* stack : {&codec->encoder, &codec->decoder})
                for (auto& l : *stack) {
                    out.push_back(&l.weight);
                    out.push_back(&l.bias);
                }
        }
        out.push_back(&prototypes.means);
        out.push_back(&prototypes.log_scales);
        return out;
    }

    std::vector<const Matrix*> parameters() const {
        auto mut = const_cast<Model*>(this)->parameters();
        return {mut.begin(), mut.end()};
    }

    friend bool operator==(const Model&, const Model&) = default;
};

inline Model make_model(std::optional<Codec> codec, PrototypeSet prototypes) {
    if (codec) check_wiring(*codec, prototypes.dim());
    Model m;
    m.codec = std::move(codec);
    m.prototypes = std::move(prototypes);
    return m;
}

struct ModelVars {
    std::optional<CodecVars> codec;
    PrototypeVars prototypes;
    std::vector<ad::Var> all;  // same order as Model::parameters()
};

inline ModelVars bind(ad::Tape& tape, const Model& m, bool trainable) {
    ModelVars v;
    if (m.codec) {
        v.codec = bind(tape, *m.codec, trainable);
        for (auto* stack : {&v.codec->encoder, &v.codec->decoder})
            for (auto& l : *stack) {
                v.all.push_back(l.weight);
                v.all.push_back(l.bias);
            }
    }
    v.prototypes = bind(tape, m.prototypes, trainable);
    v.all.push_back(v.prototypes.means);
    v.all.push_back(v.prototypes.log_scales);
    return v;
}

/// One forward pass through the model with every loss term attached.
struct ForwardPass {
    ad::Var latent;
    ad::Var responsibilities;
    ad::Var reconstruction;  // in latent space
    ad::Var output;          // in input space
    LossTerms terms;
    ad::Var total;
    GmatLossBundle bundle;
    BatchStats stats;
};

struct ForwardOptions {
    const Matrix* noise = nullptr;  // N x (M*d); null means deterministic reconstruction
    std::span<const int> labels;    // empty, or one per row with -1 for unlabelled
    bool label_matching = false;
    const BatchStats* frozen_stats = nullptr;  // replaces the batch statistics (gradient checks)
};

inline ForwardPass forward(ad::Tape& tape, const ModelVars& vars, const Model& model, const Matrix& x,
                           const LossWeights& weights, const ForwardOptions& opt = {}) {
    require(x.cols() == model.input_dim(), "forward: input width " + std::to_string(x.cols()) +
                                               " != model input " + std::to_string(model.input_dim()));
    require(x.rows() >= 1, "forward: empty batch");
    ForwardPass f;
    ad::Var input = tape.constant(x);
    f.latent = vars.codec ? encode(*vars.codec, input) : input;
    f.responsibilities = responsibilities(f.latent, vars.prototypes);
    f.reconstruction = reconstruct(f.responsibilities, vars.prototypes, opt.noise);
    f.output = vars.codec ? decode(*vars.codec, f.reconstruction) : f.reconstruction;
    f.terms.recon = recon_loss(input, f.output);

    f.stats = opt.frozen_stats ? *opt.frozen_stats : weighted_batch_stats(f.latent.value(), f.responsibilities.value());
    f.terms.kl = kl_alignment_loss(f.stats, vars.prototypes);
    std::tie(f.terms.r1, f.terms.r2) = interpretability_losses(f.responsibilities);

    if (opt.label_matching && !opt.labels.empty() && model.centroids.size() >= 2) {
        bool any = false;
        for (int l : opt.labels) any = any || l >= 0;
        if (any) f.terms.ce = label_match_loss(f.latent, model.centroids, opt.labels);
    }
    if (vars.codec && weights.lambda_ae > 0.0)
        f.terms.ae = recon_loss(input, decode(*vars.codec, f.latent));

    std::tie(f.total, f.bundle) = total_loss(f.terms, weights);
    return f;
}

// ---- evaluation ------------------------------------------------------------------------

inline Matrix latent(const Model& m, const Matrix& x) { return m.codec ? encode(*m.codec, x) : x; }

inline ResponsibilityMatrix responsibilities(const Model& m, const Matrix& x) {
    return responsibilities(latent(m, x), m.prototypes);
}

/// Row-wise argmax; ties go to the lowest column.
inline std::vector<int> argmax_rows(const Matrix& w) {
    std::vector<int> out(w.rows());
    for (std::size_t i = 0; i < w.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < w.cols(); ++j)
            if (w(i, j) > w(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

/// Cluster of each sample: the prototype with the largest responsibility.
inline std::vector<int> assign_clusters(const Model& m, const Matrix& x) {
    return argmax_rows(responsibilities(m, x).values);
}

/// Deterministic-mode losses over the whole dataset as one batch.
inline GmatLossBundle evaluate_loss(const Model& m, const Dataset& d, const LossWeights& weights, bool label_matching = false) {
    ad::Tape tape;
    auto vars = bind(tape, m, false);
    ForwardOptions opt;
    if (d.labels) opt.labels = *d.labels;
    opt.label_matching = label_matching;
    return forward(tape, vars, m, d.x, weights, opt).bundle;
}

/// Decoded prototype means (input space); the means themselves without a codec.
inline Matrix decoded_means(const Model& m) {
    return m.codec ? decode(*m.codec, m.prototypes.means) : m.prototypes.means;
}

} // namespace gmat
