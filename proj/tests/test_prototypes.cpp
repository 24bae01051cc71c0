#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "support.hpp"

using namespace gmat;
using gmat::test::random_matrix;

namespace {

PrototypeSet unit_prototypes(Matrix means) {
    Matrix ls(means.rows(), means.cols());
    return {std::move(means), std::move(ls)};
}

ad::Var kl_of(ad::Tape& tape, double mean_p, double var_p, double mean_q, double sd_q) {
    BatchStats s{Matrix{{mean_p}}, Matrix{{var_p}}, {1.0}, {false}};
    PrototypeVars p{tape.leaf(Matrix{{mean_q}}), tape.leaf(Matrix{{std::log(sd_q)}})};
    return kl_alignment_loss(s, p);
}

} // namespace

TEST(Prototypes, ZerosInit) {
    Rng rng(1);
    auto p = init_prototypes(1, 2, InitStrategy::zeros, rng);
    EXPECT_EQ(p.means, (Matrix{{0.0, 0.0}}));
    EXPECT_EQ(p.scales(), (Matrix{{1.0, 1.0}}));
}

TEST(Prototypes, DataMeanInit) {
    Dataset d = test::four_blobs();
    Rng rng(1);
    auto p = init_prototypes(3, 2, InitStrategy::data_mean, rng, &d.x);
    for (std::size_t k = 0; k < 2; ++k) {
        double mean = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) mean += d.x(i, k);
        mean /= static_cast<double>(d.size());
        for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(p.means(j, k), mean, 1e-9);
    }
}

TEST(Prototypes, InitDeterministicAndValidated) {
    Rng a(5), b(5);
    EXPECT_EQ(init_prototypes(4, 3, InitStrategy::random_normal, a), init_prototypes(4, 3, InitStrategy::random_normal, b));
    Rng rng(1);
    EXPECT_THROW(init_prototypes(0, 2, InitStrategy::zeros, rng), ContractError);
    EXPECT_THROW(init_prototypes(2, 0, InitStrategy::zeros, rng), ContractError);
}

TEST(Prototypes, Mahalanobis) {
    auto p = unit_prototypes(Matrix{{1.0, 1.0}});
    std::vector<double> at{1.0, 1.0}, off{4.0, 5.0};
    EXPECT_EQ(mahalanobis(at, 0, p), 0.0);
    EXPECT_NEAR(mahalanobis(off, 0, p), 5.0, 1e-12);
    // sigma^2 = 4
    p.log_scales.fill(std::log(2.0));
    std::vector<double> two{3.0, 3.0};
    EXPECT_NEAR(mahalanobis(two, 0, p), std::sqrt(2.0), 1e-12);
}

TEST(Prototypes, SoftminExamples) {
    auto eq = softmin(Matrix{{2.0, 2.0, 2.0}});
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(eq.values(0, j), 1.0 / 3.0, 1e-15);
    auto w = softmin(Matrix{{0.0, std::numbers::ln2}});
    EXPECT_NEAR(w.values(0, 0), 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(w.values(0, 1), 1.0 / 3.0, 1e-12);
    auto shifted = softmin(Matrix{{100.0, 100.0 + std::numbers::ln2}});
    EXPECT_NEAR(shifted.values(0, 0), w.values(0, 0), 1e-12);
    EXPECT_NEAR(shifted.values(0, 1), w.values(0, 1), 1e-12);
}

TEST(Prototypes, ResponsibilitiesRowStochastic) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        auto p = test::random_prototypes(1 + rng.below(6), 3, rng);
        Matrix x = random_matrix(20, 3, rng, 5.0);
        auto w = responsibilities(x, p);
        for (std::size_t i = 0; i < w.samples(); ++i) {
            double s = 0.0;
            for (std::size_t j = 0; j < w.prototypes(); ++j) {
                EXPECT_GE(w.values(i, j), 0.0);
                EXPECT_LE(w.values(i, j), 1.0);
                s += w.values(i, j);
            }
            EXPECT_NEAR(s, 1.0, 1e-9);
        }
    }
}

TEST(Prototypes, ReconstructDeterministic) {
    auto p = unit_prototypes(Matrix{{0.0, 0.0}, {2.0, 2.0}});
    EXPECT_EQ(reconstruct(p, {Matrix{{0.5, 0.5}}}, ReconstructMode::deterministic), (Matrix{{1.0, 1.0}}));
    EXPECT_EQ(reconstruct(p, {Matrix{{0.0, 1.0}}}, ReconstructMode::deterministic), (Matrix{{2.0, 2.0}}));
}

TEST(Prototypes, ReconstructSampleWithZeroScaleIsDeterministic) {
    Rng rng(3);
    auto p = unit_prototypes(random_matrix(3, 2, rng));
    p.log_scales.fill(-std::numeric_limits<double>::infinity());
    Matrix x = random_matrix(6, 2, rng);
    auto w = responsibilities(x, unit_prototypes(p.means));
    EXPECT_EQ(reconstruct(p, w, ReconstructMode::sample, &rng), reconstruct(p, w, ReconstructMode::deterministic));
    EXPECT_THROW(reconstruct(p, w, ReconstructMode::sample), ContractError);
}

TEST(Prototypes, ReconstructionInConvexHull) {
    Rng rng(4);
    auto p = test::random_prototypes(3, 1, rng);
    auto w = responsibilities(random_matrix(50, 1, rng, 3.0), p);
    Matrix z = reconstruct(p, w, ReconstructMode::deterministic);
    double lo = p.means[0], hi = p.means[0];
    for (double v : p.means.values()) lo = std::min(lo, v), hi = std::max(hi, v);
    for (double v : z.values()) {
        EXPECT_GE(v, lo - 1e-12);
        EXPECT_LE(v, hi + 1e-12);
    }
}

TEST(Prototypes, ReconLoss) {
    ad::Tape tape;
    ad::Var x = tape.constant(Matrix{{0.0, 0.0}});
    EXPECT_EQ(recon_loss(x, tape.constant(Matrix{{1.0, 1.0}})).item(), 2.0);
    EXPECT_EQ(recon_loss(x, x).item(), 0.0);
    EXPECT_EQ(recon_loss(x, tape.constant(Matrix{{2.0, 2.0}})).item(), 8.0);
    EXPECT_THROW(recon_loss(x, tape.constant(Matrix{{1.0}})), ContractError);
}

TEST(Prototypes, WeightedBatchStats) {
    auto s = weighted_batch_stats(Matrix{{0.0}, {2.0}}, Matrix{{0.25}, {0.75}});
    EXPECT_NEAR(s.mean(0, 0), 1.5, 1e-15);
    EXPECT_NEAR(s.var(0, 0), 0.75, 1e-15);

    Rng rng(5);
    Matrix x = random_matrix(7, 2, rng);
    auto u = weighted_batch_stats(x, Matrix(7, 1, 1.0 / 7.0));
    for (std::size_t k = 0; k < 2; ++k) {
        double m = 0.0, v = 0.0;
        for (std::size_t i = 0; i < 7; ++i) m += x(i, k) / 7.0;
        for (std::size_t i = 0; i < 7; ++i) v += (x(i, k) - m) * (x(i, k) - m) / 7.0;
        EXPECT_NEAR(u.mean(0, k), m, 1e-12);
        EXPECT_NEAR(u.var(0, k), v, 1e-12);
    }

    auto point = weighted_batch_stats(x, Matrix{{0.0, 0.0}, {0.0, 0.0}, {1.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}});
    EXPECT_EQ(point.mean(0, 0), x(2, 0));
    EXPECT_EQ(point.var(0, 1), 0.0);
    EXPECT_TRUE(point.starved[1]);
    EXPECT_EQ(point.active(), 1u);
}

TEST(Prototypes, KlClosedForms) {
    ad::Tape tape;
    EXPECT_NEAR(kl_of(tape, 0.0, 1.0, 1.0, 1.0).item(), 0.5, 1e-15);
    EXPECT_NEAR(kl_of(tape, 0.0, 1.0, 0.0, 2.0).item(), std::log(2.0) + 0.125 - 0.5, 1e-15);
    EXPECT_NEAR(kl_of(tape, 0.3, 1.7, 0.3, std::sqrt(1.7)).item(), 0.0, 1e-15);
    EXPECT_NEAR(kl_gaussian(0.0, 1.0, 0.0, 4.0), std::log(2.0) + 0.125 - 0.5, 1e-15);
}

TEST(Prototypes, KlSkipsStarvedAndFloorsVariance) {
    ad::Tape tape;
    BatchStats s{Matrix{{0.0}, {5.0}}, Matrix{{0.0}, {1.0}}, {1.0, 0.0}, {false, true}};
    PrototypeVars p{tape.leaf(Matrix{{0.0}, {0.0}}), tape.leaf(Matrix{{0.0}, {0.0}})};
    // only the first prototype counts; its variance is floored at 1e-6
    const double expect = kl_gaussian(0.0, kVarianceFloor, 0.0, 1.0);
    EXPECT_NEAR(kl_alignment_loss(s, p).item(), expect, 1e-12);
}

TEST(Prototypes, KlHasNoGradientIntoStatistics) {
    // the statistics are plain numbers, so the only leaves are the prototype parameters
    Rng rng(6);
    ad::Tape tape;
    ad::Var x = tape.leaf(random_matrix(5, 2, rng));
    auto p = bind(tape, test::random_prototypes(2, 2, rng), true);
    ad::Var w = responsibilities(x, p);
    auto stats = weighted_batch_stats(x.value(), w.value());
    auto g = tape.grad(kl_alignment_loss(stats, p), std::vector<ad::Var>{x});
    for (double v : g[0].values()) EXPECT_EQ(v, 0.0);
}

TEST(Prototypes, InterpretabilityLosses) {
    auto [a1, a2] = interpretability_losses(ResponsibilityMatrix{Matrix{{0.8, 0.2}}});
    EXPECT_NEAR(a1, -std::log(0.8), 1e-12);
    EXPECT_NEAR(a2, -(std::log(0.8) + std::log(0.2)) / 2.0, 1e-12);
    EXPECT_NEAR(a1, 0.2231, 1e-4);
    EXPECT_NEAR(a2, 0.9163, 1e-4);

    auto [u1, u2] = interpretability_losses(ResponsibilityMatrix{Matrix(4, 3, 1.0 / 3.0)});
    EXPECT_NEAR(u1, std::log(3.0), 1e-12);
    EXPECT_NEAR(u2, std::log(3.0), 1e-12);

    auto [c1, c2] = interpretability_losses(ResponsibilityMatrix{Matrix{{1.0, 0.0}, {0.0, 1.0}, {1.0, 0.0}}});
    EXPECT_EQ(c1, 0.0);
    EXPECT_EQ(c2, 0.0);

    // a column of exact zeros is clamped rather than infinite
    auto [z1, z2] = interpretability_losses(ResponsibilityMatrix{Matrix{{1.0, 0.0}}});
    EXPECT_EQ(z1, 0.0);
    EXPECT_NEAR(z2, -std::log(kLogFloor) / 2.0, 1e-9);
}

TEST(Prototypes, TotalLossWeighting) {
    Rng rng(7);
    ad::Tape tape;
    Matrix x = random_matrix(8, 2, rng);
    auto protos = test::random_prototypes(3, 2, rng);
    Model m;
    m.prototypes = protos;
    auto vars = bind(tape, m, true);
    Matrix noise = draw_noise(8, 3, 2, rng);
    ForwardOptions opt;
    opt.noise = &noise;
    const LossWeights defaults;
    auto f = forward(tape, vars, m, x, defaults, opt);
    const auto& b = f.bundle;
    EXPECT_NEAR(b.total, b.recon + 1.0 * b.kl + 0.1 * b.r1 + 0.1 * b.r2, 1e-12);
    for (double v : {b.recon, b.kl, b.r1, b.r2, b.total}) {
        EXPECT_GE(v, 0.0);
        EXPECT_TRUE(std::isfinite(v));
    }

    ad::Tape t2;
    auto v2 = bind(t2, m, true);
    auto zero = forward(t2, v2, m, x, LossWeights{0.0, 0.0, 0.0, 0.0, 0.0}, opt);
    EXPECT_EQ(zero.bundle.total, zero.bundle.recon);

    ad::Tape t3;
    LossTerms terms;
    terms.recon = t3.constant(Matrix::scalar(0.0));
    terms.kl = t3.constant(Matrix::scalar(0.0));
    EXPECT_EQ(total_loss(terms, {}).second.total, 0.0);
    EXPECT_THROW(total_loss(terms, LossWeights{-1.0}), ContractError);
}
