// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

namespace ada {

/// Deterministic pseudo-random stream.
///
/// Algorithm: xoshiro256++ seeded through splitmix64, both fixed here so that a
/// given seed reproduces the identical value stream on every platform and run.
/// std::mt19937 plus the standard distributions would not give that guarantee
/// (distribution output is implementation-defined), so the float/int/normal
/// draws are implemented by hand on top of the raw 64-bit stream.
class Rng {
public:
    explicit Rng(std::uint64_t seed);

    /// Raw xoshiro256++ output.
    std::uint64_t next_u64();

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    double uniform();

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi);

    /// Standard normal via Box-Muller (one spare cached between calls).
    double normal();

    /// Uniform integer in [0, n). n must be > 0. Rejection sampling, unbiased.
    std::uint64_t uniform_int(std::uint64_t n);

    /// Derive an independent, reproducible sub-stream keyed by a label.
    /// Forking is a pure function of (root seed, label): it does not consume
    /// from or depend on the parent's position in its stream.
    Rng fork(std::string_view label) const;

    /// In-place Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    std::uint64_t root_seed() const { return root_seed_; }

private:
    std::array<std::uint64_t, 4> state_;
    std::uint64_t root_seed_;
    bool has_spare_normal_ = false;
    double spare_normal_ = 0.0;
};

/// FNV-1a 64-bit hash; used for sub-stream labels and data fingerprints.
std::uint64_t fnv1a64(std::span<const unsigned char> bytes);
std::uint64_t fnv1a64(std::string_view text);

}  // namespace ada
