#pragma once

#include <cstdint>
#include <vector>

#include "gmat/gmat.hpp"

namespace gmat::test {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
    Matrix m(r, c);
    for (auto& v : m.values()) v = scale * rng.normal();
    return m;
}

inline Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size(), c = rows.begin()->size();
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
        std::size_t j = 0;
        for (double v : row) m(i, j++) = v;
        ++i;
    }
    return m;
}

inline PrototypeSet random_prototypes(std::size_t m, std::size_t d, Rng& rng) {
    return {random_matrix(m, d, rng, 2.0), random_matrix(m, d, rng, 0.3)};
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
    return worst;
}

/// Four well separated blobs, the fixture shared by growth and acceptance tests.
inline Dataset four_blobs(std::uint64_t seed = 42) { return gen_blobs(4, 2000, 0.5, {-10.0, 10.0}, seed); }

} // namespace gmat::test
