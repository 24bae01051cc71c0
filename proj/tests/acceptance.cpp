// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
// Optional arguments select criteria by number, e.g. `gmat_acceptance 1 2 7`.

#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "gmat/experiment.hpp"

using namespace gmat;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string describe(const char* f, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, f, a, b, c, d);
    return buf;
}

fs::path config_path(const std::string& name) { return fs::path(GMAT_SOURCE_DIR) / "configs" / name; }

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("gmat_acceptance_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale) {
    Matrix m(r, c);
    for (auto& v : m.values()) v = scale * rng.normal();
    return m;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

Outcome morphism_exactness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(1000 + s);
        const std::size_t m = 1 + rng.below(8), d = s % 2 == 0 ? 2 : 8;
        Model model;
        if (s % 4 >= 2) model.codec = build_codec(5, {6}, d, rng);
        model.prototypes = {random_matrix(m, d, rng, 2.0), random_matrix(m, d, rng, 0.3)};
        const auto mm = morphic_double(model, 0.0, rng);
        const Matrix x = random_matrix(100, model.input_dim(), rng, 2.0);

        const auto w = responsibilities(model, x);
        const auto w2 = responsibilities(mm.doubled, x);
        const Matrix rec = reconstruct(model.prototypes, w, ReconstructMode::deterministic);
        const Matrix rec2 = reconstruct(mm.doubled.prototypes, w2, ReconstructMode::deterministic);
        worst = std::max(worst, max_abs_diff(rec, rec2));
        if (model.codec) worst = std::max(worst, max_abs_diff(decode(*model.codec, rec), decode(*model.codec, rec2)));
        // merged copies give back the original responsibilities
        Matrix merged(x.rows(), m);
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < 2 * m; ++j) merged(i, mm.original[j]) += w2.values(i, j);
        worst = std::max(worst, max_abs_diff(merged, w.values));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-9 && secs < 5.0, describe("max output change %.2e, %.2f s", worst, secs)};
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    for (std::uint64_t s = 0; s < 20; ++s) {
        Rng rng(2000 + s);
        const std::size_t m = s % 2 == 0 ? 1 : 3, d = 2, n = 8;
        const Matrix x = random_matrix(n, d, rng, 2.0);
        const Matrix noise = draw_noise(n, m, d, rng);
        const PrototypeSet p{random_matrix(m, d, rng, 2.0), random_matrix(m, d, rng, 0.3)};
        // batch statistics are constants of the alignment term
        const BatchStats stats = weighted_batch_stats(x, responsibilities(make_model(std::nullopt, p), x).values);
        ad::LossBuilder loss = [&](ad::Tape& tape, std::span<const ad::Var> v) {
            Model model;
            model.prototypes = {v[0].value(), v[1].value()};
            ModelVars vars;
            vars.prototypes = {v[0], v[1]};
            vars.all = {v[0], v[1]};
            ForwardOptions opt;
            opt.noise = &noise;
            opt.frozen_stats = &stats;
            return forward(tape, vars, model, x, LossWeights{}, opt).total;
        };
        worst = std::max(worst, ad::finite_difference_check(loss, {p.means, p.log_scales}, 1e-5));
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-4 && secs < 30.0, describe("max relative error %.2e, %.2f s", worst, secs)};
}

// Blob growth is shared by the recovery and decay criteria.
struct BlobRun {
    Model model;
    GrowthHistory history;
    Dataset data;
    double seconds = 0.0;
};

const BlobRun& blob_run() {
    static const BlobRun run = [] {
        BlobRun r;
        const auto t0 = Clock::now();
        const auto c = load_config(config_path("blobs.toml").string());
        r.data = load_dataset(c);
        Rng rng(c.seed);
        r.model = init_model(c, r.data, rng);
        r.history = grow_until_converged(r.model, r.data, c.grow, c.train, c.loss, rng);
        r.seconds = seconds_since(t0);
        return r;
    }();
    return run;
}

Outcome blob_recovery() {
    const auto& r = blob_run();
    const auto c = load_config(config_path("blobs.toml").string());
    const Matrix centers = blob_centers(c.data.k, c.data.cluster_std, {c.data.box_lo, c.data.box_hi}, c.data.seed);
    double min_sep = 1e300;
    for (std::size_t a = 0; a < centers.rows(); ++a)
        for (std::size_t b = a + 1; b < centers.rows(); ++b)
            min_sep = std::min(min_sep, std::hypot(centers(a, 0) - centers(b, 0), centers(a, 1) - centers(b, 1)));
    const std::size_t m = r.model.prototypes.count();
    const double score = nmi(*r.data.labels, assign_clusters(r.model, r.data.x));
    double best = 1e300;
    if (m == centers.rows()) {
        std::vector<std::size_t> perm(m);
        std::iota(perm.begin(), perm.end(), 0);
        do {
            double worst = 0.0;
            for (std::size_t j = 0; j < m; ++j)
                worst = std::max(worst, std::hypot(r.model.prototypes.means(j, 0) - centers(perm[j], 0),
                                                   r.model.prototypes.means(j, 1) - centers(perm[j], 1)));
            best = std::min(best, worst);
        } while (std::next_permutation(perm.begin(), perm.end()));
    }
    const bool pass = min_sep >= 8.0 * c.data.cluster_std && m == 4 && score >= 0.95 && best <= 0.5 && r.seconds < 300.0;
    return {pass, describe("M=%.0f, nmi %.4f, worst mean-to-centre %.3f, %.1f s", static_cast<double>(m), score, best, r.seconds)};
}

Outcome indicator_decay() {
    const auto& h = blob_run().history;
    bool pass = h.size() >= 2;
    std::ostringstream seq;
    for (std::size_t i = 0; i < h.size(); ++i) {
        seq << (i ? " " : "") << describe("%.2e", h.records[i].max_strength);
        if (i == 0) continue;
        pass = pass && h.records[i].max_strength <= 1.1 * h.records[i - 1].max_strength;
        pass = pass && h.records[i].nmi >= h.records[i - 1].nmi - 0.02;
    }
    std::ostringstream nmis;
    for (std::size_t i = 0; i < h.size(); ++i) nmis << (i ? " " : "") << describe("%.3f", h.records[i].nmi);
    return {pass, "strengths [" + seq.str() + "], nmi [" + nmis.str() + "]"};
}

Outcome half_moons() {
    const auto t0 = Clock::now();
    const auto c = load_config(config_path("moons.toml").string());
    Split split = load_split(c);
    Rng rng(c.seed);
    Model model = init_model(c, split.train, rng);
    grow_until_converged(model, split.train, c.grow, c.train, c.loss, rng);
    const auto e = evaluate(model, *split.test);
    const double secs = seconds_since(t0);
    const std::size_t m = model.prototypes.count();
    return {m >= 2 && e.accuracy >= 0.95 && secs < 180.0,
            describe("M=%.0f, held-out mapped accuracy %.4f (label centroids %.4f), %.1f s", static_cast<double>(m), e.accuracy,
                e.class_accuracy, secs)};
}

double first_task_nmi_after_stream(double ratio) {
    auto c = load_config(config_path("continual_blobs.toml").string());
    Dataset d = load_dataset(c);
    const TaskStream stream = task_stream(c, d);
    Rng rng(c.seed);
    Model model = init_model(c, stream.tasks.front(), rng);
    continual_fit(model, stream, ratio, c.train, c.grow, c.loss, rng);
    return nmi(*stream.tasks[0].labels, assign_clusters(model, stream.tasks[0].x));
}

Outcome replay_retention() {
    const auto t0 = Clock::now();
    const double with = first_task_nmi_after_stream(1.0);
    const double without = first_task_nmi_after_stream(0.0);
    const double secs = seconds_since(t0);
    return {with >= 0.9 && without <= 0.6 && with - without >= 0.3 && secs < 600.0,
            describe("task-1 nmi with replay %.4f, without %.4f, %.1f s", with, without, secs)};
}

Outcome nmi_oracle() {
    Rng rng(7);
    double worst = 0.0;
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 1 + rng.below(50);
        const auto ky = 1 + rng.below(6), kc = 1 + rng.below(6);
        std::vector<int> y(n), c(n);
        for (auto& v : y) v = static_cast<int>(rng.below(ky));
        for (auto& v : c) v = static_cast<int>(rng.below(kc));
        std::map<int, double> py, pc;
        std::map<std::pair<int, int>, double> joint;
        for (std::size_t i = 0; i < n; ++i) {
            py[y[i]] += 1.0 / static_cast<double>(n);
            pc[c[i]] += 1.0 / static_cast<double>(n);
            joint[{y[i], c[i]}] += 1.0 / static_cast<double>(n);
        }
        double hy = 0.0, hc = 0.0, mi = 0.0;
        for (auto [k, p] : py) hy -= p * std::log(p);
        for (auto [k, p] : pc) hc -= p * std::log(p);
        for (auto [k, p] : joint) mi += p * std::log(p / (py[k.first] * pc[k.second]));
        const double oracle = hy + hc == 0.0 ? 1.0 : 2.0 * mi / (hy + hc);
        worst = std::max(worst, std::abs(nmi(y, c) - oracle));
    }
    const std::vector<int> y{0, 1, 1, 2, 2, 2}, constant(6, 4);
    const bool exact = nmi(y, y) == 1.0 && nmi(y, constant) == 0.0;
    return {worst <= 1e-10 && exact, describe("max deviation %.2e, identity and constant exact: ", worst) + (exact ? "yes" : "no")};
}

Outcome desk_mnist() {
    const auto t0 = Clock::now();
    const auto c = load_config(config_path("mnist.toml").string());
    const auto out = scratch("mnist");
    std::ostringstream log;
    cmd_grow(c, out, log);
    const auto ck = load_checkpoint(out / "checkpoint.json");
    const auto e = evaluate(ck.model, load_split(c).train);
    std::size_t images = 0;
    for (const auto& f : fs::directory_iterator(out)) images += f.path().extension() == ".pgm" ? 1 : 0;
    const double secs = seconds_since(t0);
    const std::size_t m = ck.model.prototypes.count();
    return {e.nmi >= 0.4 && m >= 8 && images == m && secs < 1800.0,
            describe("M=%.0f, nmi %.4f, %.0f prototype images, %.0f s", static_cast<double>(m), e.nmi,
                static_cast<double>(images), secs)};
}

Outcome determinism() {
    const auto dir = scratch("determinism");
    const std::string cfg = config_path("blobs.toml").string();
    bool ran = true;
    for (const char* run : {"a", "b"}) {
        const std::string cmd = std::string(GMAT_CLI) + " grow --config " + cfg + " --out " + (dir / run).string() + " > " +
                                (dir / (std::string(run) + ".log")).string() + " 2>&1";
        ran = ran && std::system(cmd.c_str()) == 0;
    }
    bool same = ran;
    std::string differs;
    for (const char* f : {"history.csv", "checkpoint.json", "params.bin"}) {
        const auto a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
        if (a.empty() || a != b) {
            same = false;
            differs += std::string(" ") + f;
        }
    }
    return {same, ran ? (same ? "history.csv, checkpoint.json and params.bin byte-identical" : "differ:" + differs)
                      : "cli run failed"};
}

double mean_row_max_after_training(double lambda_r) {
    auto c = load_config(config_path("blobs.toml").string());
    c.model.initial_prototypes = 4;
    c.model.init = "random_normal";
    c.model.init_scale = 5.0;
    c.loss.lambda_r1 = lambda_r;
    c.loss.lambda_r2 = lambda_r;
    c.train.max_epochs = 100;
    c.train.patience = 100;
    const Dataset d = load_dataset(c);
    Rng rng(c.seed);
    Model model = init_model(c, d, rng);
    train_to_convergence(model, d, c.train, c.loss, rng);
    const auto w = responsibilities(model, d.x);
    double total = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        double best = 0.0;
        for (std::size_t j = 0; j < w.values.cols(); ++j) best = std::max(best, w.values(i, j));
        total += best;
    }
    return total / static_cast<double>(d.size());
}

Outcome certainty_terms() {
    const double with = mean_row_max_after_training(0.1);
    const double without = mean_row_max_after_training(0.0);
    return {with > without, describe("mean row max %.6f with lambda_r = 0.1, %.6f without", with, without)};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
        {"morphism exactness", morphism_exactness},
        {"gradient correctness", gradient_correctness},
        {"blob recovery", blob_recovery},
        {"indicator decay", indicator_decay},
        {"half-moons with labels", half_moons},
        {"replay retention", replay_retention},
        {"nmi oracle equivalence", nmi_oracle},
        {"desk-scale mnist", desk_mnist},
        {"determinism", determinism},
        {"certainty terms", certainty_terms},
    };
    std::set<std::size_t> chosen;
    for (int i = 1; i < argc; ++i) chosen.insert(static_cast<std::size_t>(std::atoi(argv[i])));
    int failures = 0;
    for (std::size_t k = 0; k < criteria.size(); ++k) {
        if (!chosen.empty() && !chosen.count(k + 1)) continue;
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("%s criterion %zu %s: %s\n", o.pass ? "PASS" : "FAIL", k + 1, criteria[k].first, o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
