#pragma once

// Fully connected encoder/decoder around the mixture layer, and the
// centroid-based label matching head.

#include <cmath>
#include <cstddef>
#include <iterator>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmat/autodiff.hpp"
#include "gmat/errors.hpp"
#include "gmat/matrix.hpp"
#include "gmat/rng.hpp"

namespace gmat {

/// y = x W + b.
struct DenseLayer {
    Matrix weight;  // in x out
    Matrix bias;    // 1 x out

    std::size_t in() const { return weight.rows(); }
    std::size_t out() const { return weight.cols(); }

    friend bool operator==(const DenseLayer&, const DenseLayer&) = default;
};

/// Rectifier on hidden layers, identity on the last layer of each stack.
struct Codec {
    std::size_t input_dim = 0;
    std::size_t latent_dim = 0;
    std::vector<std::size_t> hidden;  // encoder widths; the decoder mirrors them
    std::vector<DenseLayer> encoder;
    std::vector<DenseLayer> decoder;

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto* stack : {&encoder, &decoder})
            for (const auto& l : *stack) n += l.weight.size() + l.bias.size();
        return n;
    }

    friend bool operator==(const Codec&, const Codec&) = default;
};

namespace detail {

inline DenseLayer init_dense(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer l{Matrix(in, out), Matrix(1, out)};
    for (auto& v : l.weight.values()) v = rng.uniform(-bound, bound);
    for (auto& v : l.bias.values()) v = rng.uniform(-bound, bound);
    return l;
}

} // namespace detail

/// Weights and biases drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Codec build_codec(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t latent_dim, Rng& rng) {
    require(input_dim >= 1 && latent_dim >= 1, "build_codec: dimensions must be positive");
    for (auto h : hidden) require(h >= 1, "build_codec: hidden widths must be positive");
    Codec c;
    c.input_dim = input_dim;
    c.latent_dim = latent_dim;
    c.hidden = hidden;
    std::vector<std::size_t> widths{input_dim};
    widths.insert(widths.end(), hidden.begin(), hidden.end());
    widths.push_back(latent_dim);
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) c.encoder.push_back(detail::init_dense(widths[i], widths[i + 1], rng));
    for (std::size_t i = widths.size() - 1; i > 0; --i) c.decoder.push_back(detail::init_dense(widths[i], widths[i - 1], rng));
    return c;
}

/// Fails unless the codec latent width equals the prototype dimension.
inline void check_wiring(const Codec& c, std::size_t prototype_dim) {
    require(c.latent_dim == prototype_dim, "codec latent width " + std::to_string(c.latent_dim) +
                                               " != prototype dimension " + std::to_string(prototype_dim));
}

struct LayerVars {
    ad::Var weight;
    ad::Var bias;
};

struct CodecVars {
    std::vector<LayerVars> encoder;
    std::vector<LayerVars> decoder;
};

inline CodecVars bind(ad::Tape& tape, const Codec& c, bool trainable) {
    auto put = [&](const Matrix& m) { return trainable ? tape.leaf(m) : tape.constant(m); };
    CodecVars v;
    for (const auto& l : c.encoder) v.encoder.push_back({put(l.weight), put(l.bias)});
    for (const auto& l : c.decoder) v.decoder.push_back({put(l.weight), put(l.bias)});
    return v;
}

inline ad::Var run_stack(const std::vector<LayerVars>& stack, ad::Var x) {
    require(!stack.empty(), "codec: empty layer stack");
    for (std::size_t i = 0; i < stack.size(); ++i) {
        require(x.cols() == stack[i].weight.rows(), "codec: input width " + std::to_string(x.cols()) +
                                                        " != layer width " + std::to_string(stack[i].weight.rows()));
        x = ad::add(ad::matmul(x, stack[i].weight), stack[i].bias);
        if (i + 1 < stack.size()) x = ad::relu(x);
    }
    return x;
}

inline ad::Var encode(const CodecVars& c, const ad::Var& x) { return run_stack(c.encoder, x); }
inline ad::Var decode(const CodecVars& c, const ad::Var& z) { return run_stack(c.decoder, z); }

inline Matrix encode(const Codec& c, const Matrix& x) {
    ad::Tape tape;
    return encode(bind(tape, c, false), tape.constant(x)).value();
}

inline Matrix decode(const Codec& c, const Matrix& z) {
    ad::Tape tape;
    return decode(bind(tape, c, false), tape.constant(z)).value();
}

// ---- label matching --------------------------------------------------------------------

struct ClassCentroid {
    Matrix mean;            // 1 x d
    std::size_t count = 0;  // samples seen
    bool stale = false;     // not refreshed by the latest update

    friend bool operator==(const ClassCentroid&, const ClassCentroid&) = default;
};

/// Persistent per-class latent averages, ordered by class label.
struct ClassCentroids {
    std::map<int, ClassCentroid> classes;
    double decay = 0.9;

    bool empty() const { return classes.empty(); }
    std::size_t size() const { return classes.size(); }

    Matrix matrix() const {
        require(!classes.empty(), "ClassCentroids: no classes");
        const std::size_t d = classes.begin()->second.mean.cols();
        Matrix m(classes.size(), d);
        std::size_t r = 0;
        for (const auto& [label, c] : classes) {
            for (std::size_t k = 0; k < d; ++k) m(r, k) = c.mean(0, k);
            ++r;
        }
        return m;
    }

    std::vector<int> labels() const {
        std::vector<int> out;
        for (const auto& [label, c] : classes) out.push_back(label);
        return out;
    }

    std::size_t index_of(int label) const {
        auto it = classes.find(label);
        require(it != classes.end(), "ClassCentroids: unknown class " + std::to_string(label));
        return static_cast<std::size_t>(std::distance(classes.begin(), it));
    }

    friend bool operator==(const ClassCentroids&, const ClassCentroids&) = default;
};

/// Per-class batch means folded into the persistent centroids by EMA:
/// c <- decay * c + (1 - decay) * batch_mean. New classes take the batch mean.
/// Negative labels mark unlabelled rows and are skipped.
inline void update_centroids(ClassCentroids& centroids, const Matrix& latent, std::span<const int> labels) {
    require(labels.size() == latent.rows(), "update_centroids: labels not parallel to batch");
    std::map<int, std::pair<Matrix, std::size_t>> batch;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        auto& [sum, n] = batch.try_emplace(labels[i], Matrix(1, latent.cols()), 0).first->second;
        for (std::size_t k = 0; k < latent.cols(); ++k) sum(0, k) += latent(i, k);
        ++n;
    }
    for (auto& [label, c] : centroids.classes) c.stale = !batch.count(label);
    for (auto& [label, entry] : batch) {
        auto& [sum, n] = entry;
        for (auto& v : sum.values()) v /= static_cast<double>(n);
        auto it = centroids.classes.find(label);
        if (it == centroids.classes.end()) {
            centroids.classes.emplace(label, ClassCentroid{sum, n, false});
            continue;
        }
        ClassCentroid& c = it->second;
        for (std::size_t k = 0; k < sum.cols(); ++k)
            c.mean(0, k) = centroids.decay * c.mean(0, k) + (1.0 - centroids.decay) * sum(0, k);
        c.count += n;
        c.stale = false;
    }
}

/// Mean cross-entropy of softmin class probabilities over squared latent distances to the
/// (constant) centroids. Rows with negative labels are excluded.
inline ad::Var label_match_loss(const ad::Var& latent, const ClassCentroids& centroids, std::span<const int> labels) {
    require(centroids.size() >= 2, "label_match_loss: needs at least two known classes");
    require(labels.size() == latent.rows(), "label_match_loss: labels not parallel to batch");
    std::vector<std::size_t> rows, target;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0) continue;
        rows.push_back(i);
        target.push_back(centroids.index_of(labels[i]));
    }
    require(!rows.empty(), "label_match_loss: no labelled rows");
    ad::Tape& tape = *latent.tape();
    Matrix c = centroids.matrix();
    ad::Var cv = tape.constant(c);
    ad::Var zero_scale = tape.constant(Matrix(c.rows(), c.cols()));
    ad::Var h = rows.size() == labels.size() ? latent : ad::gather_rows(latent, rows);
    ad::Var d2 = ad::sq_mahalanobis(h, cv, zero_scale);
    // -log softmin_y(d2) = d2_y + logsumexp(-d2)
    ad::Var nll = ad::add(ad::pick(d2, std::move(target)), ad::logsumexp_rows(ad::neg(d2)));
    return ad::mean(nll);
}

/// Label of the nearest centroid in latent space; ties go to the lowest label.
inline int nearest_class(std::span<const double> z, const ClassCentroids& centroids) {
    require(!centroids.empty(), "predict_class: no centroids");
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (const auto& [label, c] : centroids.classes) {
        require(c.mean.cols() == z.size(), "predict_class: latent width mismatch");
        double d = 0.0;
        for (std::size_t k = 0; k < z.size(); ++k) d += (z[k] - c.mean(0, k)) * (z[k] - c.mean(0, k));
        if (d < best_d) {
            best_d = d;
            best = label;
        }
    }
    return best;
}

inline int predict_class(const Codec& codec, const ClassCentroids& centroids, std::span<const double> x) {
    require(!centroids.empty(), "predict_class: no centroids");
    Matrix z = encode(codec, Matrix::row(x));
    return nearest_class(z.row_span(0), centroids);
}

} // namespace gmat
