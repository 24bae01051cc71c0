#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>

#include "support.hpp"

using namespace gmat;

namespace {

// Independent recomputation from raw pair counts.
double brute_nmi(const std::vector<int>& y, const std::vector<int>& c) {
    const double n = static_cast<double>(y.size());
    std::map<int, double> py, pc;
    std::map<std::pair<int, int>, double> pyc;
    for (std::size_t i = 0; i < y.size(); ++i) {
        py[y[i]] += 1.0;
        pc[c[i]] += 1.0;
        pyc[{y[i], c[i]}] += 1.0;
    }
    double hy = 0.0, hc = 0.0, mi = 0.0;
    for (auto [k, v] : py) hy -= v / n * std::log(v / n);
    for (auto [k, v] : pc) hc -= v / n * std::log(v / n);
    for (auto [k, v] : pyc) mi += v / n * std::log((v / n) / ((py[k.first] / n) * (pc[k.second] / n)));
    if (hy + hc == 0.0) return 1.0;
    return 2.0 * mi / (hy + hc);
}

// Best accuracy over every injective map between clusters and classes.
double brute_accuracy(const std::vector<int>& y, const std::vector<int>& c) {
    std::vector<int> classes, clusters;
    for (int v : std::set<int>(y.begin(), y.end())) classes.push_back(v);
    for (int v : std::set<int>(c.begin(), c.end())) clusters.push_back(v);
    std::map<std::pair<int, int>, std::size_t> hits;
    for (std::size_t i = 0; i < y.size(); ++i) ++hits[{c[i], y[i]}];
    std::size_t best = 0;
    std::vector<bool> used(classes.size(), false);
    std::function<void(std::size_t, std::size_t)> go = [&](std::size_t j, std::size_t acc) {
        if (j == clusters.size()) {
            best = std::max(best, acc);
            return;
        }
        go(j + 1, acc);  // cluster left unmapped
        for (std::size_t k = 0; k < classes.size(); ++k) {
            if (used[k]) continue;
            used[k] = true;
            auto it = hits.find({clusters[j], classes[k]});
            go(j + 1, acc + (it == hits.end() ? 0 : it->second));
            used[k] = false;
        }
    };
    go(0, 0);
    return static_cast<double>(best) / static_cast<double>(y.size());
}

std::vector<int> random_labels(std::size_t n, int k, Rng& rng) {
    std::vector<int> v(n);
    for (auto& x : v) x = static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
    return v;
}

} // namespace

TEST(Metrics, NmiExamples) {
    std::vector<int> y{0, 0, 1, 1}, c{0, 0, 1, 2};
    const double hc = -(0.5 * std::log(0.5) + 0.25 * std::log(0.25) + 0.25 * std::log(0.25));
    EXPECT_NEAR(nmi(y, c), 2.0 * std::log(2.0) / (std::log(2.0) + hc), 1e-12);
    EXPECT_NEAR(nmi(y, c), 0.8, 1e-4);
    EXPECT_EQ(nmi(y, y), 1.0);
    EXPECT_EQ(nmi(y, std::vector<int>{3, 3, 3, 3}), 0.0);
    EXPECT_EQ(nmi(std::vector<int>{1, 1}, std::vector<int>{4, 4}), 1.0);
    EXPECT_THROW(nmi(y, std::vector<int>{0}), ContractError);
}

TEST(Metrics, NmiMatchesBruteForce) {
    Rng rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(50);
        auto y = random_labels(n, 1 + static_cast<int>(rng.below(6)), rng);
        auto c = random_labels(n, 1 + static_cast<int>(rng.below(6)), rng);
        EXPECT_NEAR(nmi(y, c), brute_nmi(y, c), 1e-10) << "trial " << trial;
    }
}

TEST(Metrics, NmiSymmetricAndRelabelInvariant) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        auto y = random_labels(40, 4, rng);
        auto c = random_labels(40, 5, rng);
        EXPECT_NEAR(nmi(y, c), nmi(c, y), 1e-14);
        std::vector<int> relabel(c.size());
        for (std::size_t i = 0; i < c.size(); ++i) relabel[i] = 10 - 3 * c[i];
        EXPECT_NEAR(nmi(y, relabel), nmi(y, c), 1e-15);
        const double v = nmi(y, c);
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Metrics, MappedAccuracyExamples) {
    std::vector<int> y{0, 0, 1, 1}, c{0, 0, 1, 2};
    EXPECT_EQ(mapped_accuracy(y, c), 0.75);
    EXPECT_EQ(mapped_accuracy(y, y), 1.0);
    EXPECT_EQ(mapped_accuracy(y, std::vector<int>{5, 5, 2, 2}), 1.0);
    EXPECT_THROW(mapped_accuracy(y, std::vector<int>{0, 1}), ContractError);
}

TEST(Metrics, MappedAccuracyMatchesExhaustiveSearch) {
    Rng rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 1 + rng.below(40);
        auto y = random_labels(n, 1 + static_cast<int>(rng.below(5)), rng);
        auto c = random_labels(n, 1 + static_cast<int>(rng.below(6)), rng);
        const double acc = mapped_accuracy(y, c);
        EXPECT_NEAR(acc, brute_accuracy(y, c), 1e-12) << "trial " << trial;
        std::map<int, std::size_t> counts;
        for (int v : y) ++counts[v];
        std::size_t majority = 0;
        for (auto [k, v] : counts) majority = std::max(majority, v);
        // a single cluster maps to the majority class
        EXPECT_NEAR(mapped_accuracy(y, std::vector<int>(n, 0)), static_cast<double>(majority) / static_cast<double>(n), 1e-15);
    }
}

TEST(Metrics, ContingencyMarginals) {
    std::vector<int> y{2, 2, 7, 7, 7}, c{1, 0, 0, 0, 1};
    auto t = contingency(y, c);
    EXPECT_EQ(t.classes, (std::vector<int>{2, 7}));
    EXPECT_EQ(t.clusters, (std::vector<int>{0, 1}));
    EXPECT_EQ(t.counts[0][0], 1u);
    EXPECT_EQ(t.counts[1][0], 2u);
    std::size_t sum = 0;
    for (const auto& row : t.counts)
        for (auto v : row) sum += v;
    EXPECT_EQ(sum, t.total);
}

TEST(Metrics, AssignClusters) {
    Model m = make_model(std::nullopt, PrototypeSet{Matrix{{0.0, 0.0}, {10.0, 0.0}, {0.0, 10.0}}, Matrix(3, 2)});
    EXPECT_EQ(assign_clusters(m, Matrix{{10.0, 0.0}, {0.0, 10.0}, {0.1, 0.0}}), (std::vector<int>{1, 2, 0}));
    // exact tie between prototypes 0 and 1
    EXPECT_EQ(assign_clusters(m, Matrix{{5.0, -3.0}}), std::vector<int>{0});
    EXPECT_EQ(argmax_rows(Matrix{{0.2, 0.4, 0.4}}), std::vector<int>{1});
}
