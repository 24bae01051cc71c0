#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace gmat {

/// Seeded random stream with named substreams.
///
/// Draws are built directly on the bits of std::mt19937_64, whose output
/// sequence is fixed by the standard, so results do not depend on the
/// standard library's distribution implementations.
///
/// Substreams used by the library (derived from the stream handed to it):
///   "init"      prototype and codec initialisation
///   "pretrain"  codec warm-up shuffles
///   "train"     per-iteration training stream
///   "batching"  per-epoch shuffles
///   "sampling"  reparameterised prototype draws during training
///   "noise"     half-moons jitter
///   "indicator" common random numbers for splitting-indicator passes
///   "replay"    generative replay draws
///   "task"      per-task streams in continual runs
///   "points", "centers", "order", "angles"  data generators
///   "subsample", "holdout"  dataset splits
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(mix(seed)) {}

    std::uint64_t seed() const { return seed_; }

    /// Independent child stream; a pure function of (seed, name), not of
    /// how many draws the parent has made.
    Rng split(std::string_view name) const { return Rng(mix(seed_ ^ fnv1a(name))); }

    Rng split(std::string_view name, std::uint64_t index) const {
        return Rng(mix(mix(seed_ ^ fnv1a(name)) + index));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n) {
        // Lemire-free simple rejection keeps the draw count deterministic per value.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % n;
    }

    /// Standard normal via Box-Muller (both halves used).
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double angle = 2.0 * std::numbers::pi * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    std::string state() const {
        std::ostringstream os;
        os << seed_ << ' ' << has_spare_ << ' ';
        os.precision(17);
        os << std::hexfloat << spare_ << std::defaultfloat << ' ' << engine_;
        return os.str();
    }

    static Rng from_state(const std::string& text) {
        std::istringstream is(text);
        Rng r;
        std::string spare;
        is >> r.seed_ >> r.has_spare_ >> spare >> r.engine_;
        r.spare_ = std::strtod(spare.c_str(), nullptr);
        return r;
    }

    friend bool operator==(const Rng& a, const Rng& b) {
        return a.seed_ == b.seed_ && a.engine_ == b.engine_ && a.has_spare_ == b.has_spare_ &&
               (!a.has_spare_ || a.spare_ == b.spare_);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        // splitmix64 finaliser
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ULL;
        }
        return h;
    }

    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace gmat
