#pragma once

// The command-line experiments as library calls: each takes a validated config and
// an output directory and writes its artifacts there.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "gmat/checkpoint.hpp"
#include "gmat/config.hpp"
#include "gmat/data.hpp"
#include "gmat/growth.hpp"
#include "gmat/metrics.hpp"
#include "gmat/replay.hpp"

namespace gmat {

struct Split {
    Dataset train;
    std::optional<Dataset> test;
};

inline Dataset load_dataset(const ExperimentConfig& c) {
    const auto& s = c.data;
    Dataset d;
    if (s.source == "blobs") {
        if (!s.centers.empty()) {
            Matrix centers(s.centers.size() / 2, 2, s.centers);
            d = gen_blobs_at(centers, s.n, s.cluster_std, s.seed);
        } else {
            d = gen_blobs(s.k, s.n, s.cluster_std, {s.box_lo, s.box_hi}, s.seed);
        }
    } else if (s.source == "moons") {
        d = gen_moons(s.n, s.noise, s.seed);
    } else if (s.source == "idx") {
        d = load_idx(resolve_path(c, s.images), resolve_path(c, s.labels));
    } else if (s.source == "csv") {
        d = read_csv(resolve_path(c, s.path));
    } else {
        throw ConfigError("data.source: unknown generator '" + s.source + "' (valid: blobs, moons, idx, csv)");
    }
    if (s.subsample > 0) {
        if (s.subsample > d.size())
            throw ConfigError("data.subsample: " + std::to_string(s.subsample) + " exceeds dataset size " + std::to_string(d.size()));
        if (s.subsample < d.size()) d = d.labels ? stratified_subsample(d, s.subsample, s.seed) : d.subset([&] {
            std::vector<std::size_t> idx(s.subsample);
            for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
            return idx;
        }());
    }
    if (s.normalize) d = standardized(std::move(d));
    d.validate();
    return d;
}

inline Split load_split(const ExperimentConfig& c) {
    Dataset d = load_dataset(c);
    if (c.data.holdout <= 0.0) return {std::move(d), std::nullopt};
    auto [train, test] = holdout_split(d, c.data.holdout, c.data.seed);
    return {std::move(train), std::move(test)};
}

inline InitStrategy init_strategy(const std::string& name) {
    if (name == "zeros") return InitStrategy::zeros;
    if (name == "random_normal") return InitStrategy::random_normal;
    return InitStrategy::data_mean;
}

inline Model init_model(const ExperimentConfig& c, const Dataset& train, Rng& rng) {
    Rng init = rng.split("init");
    std::size_t dim = train.dim();
    Model m;
    m.centroids.decay = c.model.centroid_decay;
    if (c.model.codec) {
        m.codec = build_codec(train.dim(), c.model.hidden, c.model.latent, init);
        dim = c.model.latent;
        Rng pre = rng.split("pretrain");
        pretrain_codec(m, train, c.train, c.loss, pre);
    }
    Matrix z = latent(m, train.x);
    m.prototypes = init_prototypes(c.model.initial_prototypes, dim, init_strategy(c.model.init), init, &z, c.model.init_scale);
    return m;
}

/// Cluster assignments, NMI and mapped accuracy of a model on a dataset.
struct Evaluation {
    std::vector<int> clusters;
    double nmi = std::numeric_limits<double>::quiet_NaN();
    double accuracy = std::numeric_limits<double>::quiet_NaN();
    double class_accuracy = std::numeric_limits<double>::quiet_NaN();  // nearest label centroid
};

inline Evaluation evaluate(const Model& m, const Dataset& d) {
    require(d.dim() == m.input_dim(), "dataset width " + std::to_string(d.dim()) + " != model input width " +
                                          std::to_string(m.input_dim()));
    Evaluation e;
    e.clusters = assign_clusters(m, d.x);
    if (d.labels) {
        e.nmi = nmi(*d.labels, e.clusters);
        e.accuracy = mapped_accuracy(*d.labels, e.clusters);
        if (m.centroids.size() >= 2) {
            const Matrix z = latent(m, d.x);
            std::size_t hits = 0;
            for (std::size_t i = 0; i < d.size(); ++i) hits += nearest_class(z.row_span(i), m.centroids) == (*d.labels)[i];
            e.class_accuracy = static_cast<double>(hits) / static_cast<double>(d.size());
        }
    }
    return e;
}

inline std::string fmt(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v + 0.0);  // no negative zero
    return buf;
}

inline std::string fmt_short(double v) {
    if (!std::isfinite(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline const char* kHistoryHeader = "iteration,M,max_strength,chosen,recon,kl,r1,r2,ce,ae,total,nmi,epochs,strengths";

inline std::string history_row(const GrowthRecord& r) {
    std::string strengths;
    for (std::size_t i = 0; i < r.strengths.size(); ++i) strengths += (i ? ";" : "") + fmt(r.strengths[i]);
    return std::to_string(r.iteration) + "," + std::to_string(r.prototypes) + "," + fmt(r.max_strength) + "," +
           std::to_string(r.chosen) + "," + fmt(r.losses.recon) + "," + fmt(r.losses.kl) + "," + fmt(r.losses.r1) + "," +
           fmt(r.losses.r2) + "," + fmt(r.losses.ce) + "," + fmt(r.losses.ae) + "," + fmt(r.losses.total) + "," +
           fmt(r.nmi) + "," + std::to_string(r.epochs) + "," + strengths;
}

inline nlohmann::ordered_json config_json(const ExperimentConfig& c) {
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["data"] = {{"source", c.data.source}, {"n", c.data.n},       {"k", c.data.k},
                 {"cluster_std", c.data.cluster_std}, {"noise", c.data.noise}, {"seed", c.data.seed},
                 {"subsample", c.data.subsample}, {"normalize", c.data.normalize}, {"holdout", c.data.holdout}};
    j["model"] = {{"codec", c.model.codec}, {"hidden", c.model.hidden}, {"latent", c.model.latent},
                  {"initial_prototypes", c.model.initial_prototypes}, {"init", c.model.init}};
    j["loss"] = {{"beta_kl", c.loss.beta_kl}, {"lambda_r1", c.loss.lambda_r1}, {"lambda_r2", c.loss.lambda_r2},
                 {"lambda_ce", c.loss.lambda_ce}, {"lambda_ae", c.loss.lambda_ae},
                 {"label_matching", c.label_matching}};
    j["train"] = {{"lr", c.train.learning_rate}, {"max_epochs", c.train.max_epochs}, {"patience", c.train.patience},
                  {"batch_size", c.train.batch_size}, {"pretrain_epochs", c.train.pretrain_epochs},
                  {"freeze_encoder", c.train.freeze_encoder}};
    j["grow"] = {{"enabled", c.grow.enabled}, {"epsilon", c.grow.epsilon}, {"delta", c.grow.delta},
                 {"eta", c.grow.eta}, {"max_iterations", c.grow.max_iterations}};
    j["replay"] = {{"ratio", c.replay_ratio}};
    return j;
}

/// Decoded prototype means as `proto_<i>.pgm`, in the data's original pixel scale.
inline std::size_t write_prototype_images(const Model& m, const Dataset& d, const std::filesystem::path& dir) {
    if (!d.image_shape) return 0;
    const auto [h, w] = *d.image_shape;
    const Matrix images = d.normalization.invert(decoded_means(m));
    for (std::size_t j = 0; j < images.rows(); ++j)
        write_pgm(dir / ("proto_" + std::to_string(j) + ".pgm"), images.row_span(j), w, h);
    return images.rows();
}

inline void create_dir(const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
}

/// Growth on one dataset: history.csv (flushed per iteration), checkpoint, prototype images.
inline void cmd_grow(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log = std::cout) {
    create_dir(out);
    Split split = load_split(c);
    Rng rng(c.seed);
    Model model = init_model(c, split.train, rng);

    std::ofstream hist(out / "history.csv", std::ios::trunc);
    if (!hist) throw IoError("cannot write '" + (out / "history.csv").string() + "'");
    hist << kHistoryHeader << "\n";
    auto history = grow_until_converged(model, split.train, c.grow, c.train, c.loss, rng, {},
                                        [&](const GrowthRecord& r, const Model&) {
                                            hist << history_row(r) << "\n";
                                            hist.flush();
                                            log << "iteration " << r.iteration << ": M=" << r.prototypes
                                                << " max_strength=" << fmt_short(r.max_strength)
                                                << " nmi=" << fmt_short(r.nmi) << " epochs=" << r.epochs << std::endl;
                                        });
    if (!hist) throw IoError("write failed for history.csv");

    Checkpoint ck;
    ck.model = model;
    ck.rng_state = rng.state();
    ck.history = history;
    ck.config = config_json(c);
    save_checkpoint(ck, out);
    write_prototype_images(model, split.train, out);

    const auto train_eval = evaluate(model, split.train);
    log << "train nmi=" << fmt_short(train_eval.nmi) << " acc=" << fmt_short(train_eval.accuracy)
        << " M=" << model.prototypes.count() << "\n";
    if (split.test) {
        const auto test_eval = evaluate(model, *split.test);
        log << "holdout nmi=" << fmt_short(test_eval.nmi) << " acc=" << fmt_short(test_eval.accuracy)
            << " class_acc=" << fmt_short(test_eval.class_accuracy) << "\n";
    }
}

inline TaskStream task_stream(const ExperimentConfig& c, const Dataset& d) {
    if (c.task_scheme == "split-pairs") return split_tasks_pairs(d);
    if (c.task_scheme == "custom") return split_tasks(d, c.task_groups, "custom");
    throw ConfigError("config key 'tasks.scheme': required for continual runs (split-pairs or custom)");
}

/// Sequential tasks with replay: tasks.csv holds, after each task, NMI and mapped
/// accuracy on every task seen so far.
inline void cmd_continual(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log = std::cout) {
    create_dir(out);
    Dataset d = load_dataset(c);
    if (!d.labels) throw ConfigError("continual runs need a labelled dataset");
    const TaskStream stream = task_stream(c, d);
    Rng rng(c.seed);
    Model model = init_model(c, stream.tasks.front(), rng);

    std::ofstream tasks(out / "tasks.csv", std::ios::trunc);
    if (!tasks) throw IoError("cannot write '" + (out / "tasks.csv").string() + "'");
    tasks << "after_task,eval_task,M,nmi,acc\n";
    std::ofstream hist(out / "history.csv", std::ios::trunc);
    hist << "task," << kHistoryHeader << "\n";
    GrowthHistory all;
    auto histories = continual_fit(model, stream, c.replay_ratio, c.train, c.grow, c.loss, rng,
                                   [&](std::size_t t, const Model& m, const GrowthHistory& h) {
                                       for (const auto& r : h.records) {
                                           hist << t << "," << history_row(r) << "\n";
                                           all.records.push_back(r);
                                       }
                                       hist.flush();
                                       for (std::size_t q = 0; q <= t; ++q) {
                                           const auto e = evaluate(m, stream.tasks[q]);
                                           tasks << t << "," << q << "," << m.prototypes.count() << "," << fmt(e.nmi)
                                                 << "," << fmt(e.accuracy) << "\n";
                                           log << "after task " << t << ": task " << q << " nmi=" << fmt_short(e.nmi)
                                               << " acc=" << fmt_short(e.accuracy) << "\n";
                                       }
                                       tasks.flush();
                                   });
    if (!tasks || !hist) throw IoError("write failed in '" + out.string() + "'");
    Checkpoint ck;
    ck.model = model;
    ck.rng_state = rng.state();
    ck.history = all;
    ck.config = config_json(c);
    save_checkpoint(ck, out);
}

/// Prints `nmi=<v> acc=<v> M=<v>` (metrics omitted without labels) and writes assignments.csv.
inline void cmd_eval(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log = std::cout) {
    if (c.checkpoint.empty()) throw ConfigError("config key 'eval.checkpoint': required for eval");
    const auto ck = load_checkpoint(resolve_path(c, c.checkpoint));
    Split split = load_split(c);
    if (split.train.dim() != ck.model.input_dim())
        throw ConfigError("dataset width " + std::to_string(split.train.dim()) + " does not match checkpoint input width " +
                          std::to_string(ck.model.input_dim()));
    create_dir(out);
    const auto e = evaluate(ck.model, split.train);
    std::ofstream a(out / "assignments.csv", std::ios::trunc);
    if (!a) throw IoError("cannot write '" + (out / "assignments.csv").string() + "'");
    a << (split.train.labels ? "index,cluster,label\n" : "index,cluster\n");
    for (std::size_t i = 0; i < e.clusters.size(); ++i) {
        a << i << "," << e.clusters[i];
        if (split.train.labels) a << "," << (*split.train.labels)[i];
        a << "\n";
    }
    if (!a) throw IoError("write failed for assignments.csv");
    if (split.train.labels) log << "nmi=" << fmt(e.nmi) << " acc=" << fmt(e.accuracy) << " ";
    log << "M=" << ck.model.prototypes.count() << "\n";
    if (split.test) {
        const auto t = evaluate(ck.model, *split.test);
        if (split.test->labels) log << "holdout nmi=" << fmt(t.nmi) << " acc=" << fmt(t.accuracy) << " class_acc=" << fmt(t.class_accuracy) << "\n";
    }
}

/// Writes the configured dataset as CSV (`data.csv` in the output directory).
inline void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out, std::ostream& log = std::cout) {
    create_dir(out);
    const Dataset d = load_dataset(c);
    write_csv(d, (out / "data.csv").string());
    log << "wrote " << d.size() << " samples to " << (out / "data.csv").string() << "\n";
}

} // namespace gmat
