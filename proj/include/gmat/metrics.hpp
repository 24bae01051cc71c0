#pragma once

// Clustering scores against reference labels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <vector>

#include "gmat/errors.hpp"

namespace gmat {

/// Counts n_ij of (true class i, cluster j), with classes and clusters relabelled densely
/// in ascending order of their original ids.
struct ContingencyTable {
    std::vector<int> classes;
    std::vector<int> clusters;
    std::vector<std::vector<std::size_t>> counts;  // classes x clusters
    std::size_t total = 0;
};

inline ContingencyTable contingency(std::span<const int> truth, std::span<const int> pred) {
    require(truth.size() == pred.size(), "contingency: label vectors differ in length");
    require(!truth.empty(), "contingency: empty labelling");
    std::map<int, std::size_t> ci, cj;
    for (int y : truth) ci.emplace(y, 0);
    for (int c : pred) cj.emplace(c, 0);
    ContingencyTable t;
    for (auto& [k, v] : ci) {
        v = t.classes.size();
        t.classes.push_back(k);
    }
    for (auto& [k, v] : cj) {
        v = t.clusters.size();
        t.clusters.push_back(k);
    }
    t.counts.assign(t.classes.size(), std::vector<std::size_t>(t.clusters.size(), 0));
    for (std::size_t i = 0; i < truth.size(); ++i) ++t.counts[ci[truth[i]]][cj[pred[i]]];
    t.total = truth.size();
    return t;
}

/// Mutual information over the arithmetic mean of the two entropies, natural log, 0 log 0 = 0.
/// Two constant labellings score 1.
inline double nmi(std::span<const int> truth, std::span<const int> pred) {
    const auto t = contingency(truth, pred);
    const double n = static_cast<double>(t.total);
    std::vector<double> row(t.classes.size(), 0.0), col(t.clusters.size(), 0.0);
    for (std::size_t i = 0; i < row.size(); ++i)
        for (std::size_t j = 0; j < col.size(); ++j) {
            row[i] += static_cast<double>(t.counts[i][j]);
            col[j] += static_cast<double>(t.counts[i][j]);
        }
    auto entropy = [n](const std::vector<double>& p) {
        double h = 0.0;
        for (double c : p)
            if (c > 0.0) h -= (c / n) * std::log(c / n);
        return h;
    };
    const double hy = entropy(row), hc = entropy(col);
    if (hy + hc == 0.0) return 1.0;
    double mi = 0.0;
    for (std::size_t i = 0; i < row.size(); ++i)
        for (std::size_t j = 0; j < col.size(); ++j) {
            const double c = static_cast<double>(t.counts[i][j]);
            if (c > 0.0) mi += (c / n) * std::log(c * n / (row[i] * col[j]));
        }
    return std::clamp(mi / (0.5 * (hy + hc)), 0.0, 1.0);
}

/// Minimum-cost assignment of rows to distinct columns (rows <= cols), O(n^2 m).
/// Returns the column of each row.
inline std::vector<std::size_t> min_cost_assignment(const std::vector<std::vector<double>>& cost) {
    const std::size_t n = cost.size();
    if (n == 0) return {};
    const std::size_t m = cost[0].size();
    require(n <= m, "min_cost_assignment: more rows than columns");
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
    for (std::size_t i = 1; i <= n; ++i) {
        p[0] = i;
        std::size_t j0 = 0;
        std::vector<double> minv(m + 1, inf);
        std::vector<bool> used(m + 1, false);
        do {
            used[j0] = true;
            const std::size_t i0 = p[j0];
            double delta = inf;
            std::size_t j1 = 0;
            for (std::size_t j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (std::size_t j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const std::size_t j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<std::size_t> out(n, 0);
    for (std::size_t j = 1; j <= m; ++j)
        if (p[j] != 0) out[p[j] - 1] = j - 1;
    return out;
}

/// Fraction of samples whose cluster maps to their class under the best one-to-one
/// cluster-to-class mapping. Clusters left without a class count as errors.
inline double mapped_accuracy(std::span<const int> truth, std::span<const int> pred) {
    const auto t = contingency(truth, pred);
    const std::size_t k = t.classes.size(), c = t.clusters.size();
    const bool transpose = c > k;  // assignment wants rows <= cols
    const std::size_t rows = transpose ? k : c, cols = transpose ? c : k;
    std::vector<std::vector<double>> cost(rows, std::vector<double>(cols, 0.0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double v = -static_cast<double>(t.counts[i][j]);
            if (transpose) cost[i][j] = v;
            else cost[j][i] = v;
        }
    const auto assign = min_cost_assignment(cost);
    double hits = 0.0;
    for (std::size_t r = 0; r < rows; ++r) hits -= cost[r][assign[r]];
    return hits / static_cast<double>(t.total);
}

} // namespace gmat
