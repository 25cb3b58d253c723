#ifndef TRAJECT_RNG_HPP
#define TRAJECT_RNG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <string_view>
#include <vector>

/**
 * @file rng.hpp
 * @brief Splittable counter-based random number generation.
 *
 * Every stochastic stage derives an independent child stream keyed by
 * (master seed, purpose tag, iteration index). Work items can therefore be
 * scheduled across any number of threads while producing identical draws,
 * and no state is shared between stages. Distribution sampling is
 * implemented directly (rejection for bounded ints, polar method for
 * gaussians) so results do not depend on the standard library vendor.
 */

namespace traject {

class SplitRng {
public:
    explicit SplitRng(std::uint64_t seed) : key_(mix(seed ^ kDomain)), state_(key_) {}

    /// Child stream for an independent purpose. Children with distinct
    /// (tag, index) pairs are statistically independent of each other and of
    /// the parent, and do not advance the parent's state.
    SplitRng derive(std::string_view tag, std::uint64_t index = 0) const {
        std::uint64_t h = kFnvOffset;
        for (char c : tag) {
            h = (h ^ static_cast<unsigned char>(c)) * kFnvPrime;
        }
        std::uint64_t child = mix(key_ ^ mix(h));
        child = mix(child + 0x9E3779B97F4A7C15ull * (index + 1));
        return SplitRng(child, child);
    }

    std::uint64_t next_u64() {
        // SplitMix64: additive Weyl sequence with a strong finalizer.
        state_ += 0x9E3779B97F4A7C15ull;
        return mix_steps(state_);
    }

    /// Uniform double in [0, 1) with 53 random bits.
    double next_double() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, bound), bias-free via rejection.
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) {
            return 0;
        }
        const std::uint64_t rem = (std::numeric_limits<std::uint64_t>::max() % bound + 1) % bound;
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - rem;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x > limit);
        return x % bound;
    }

    /// Standard normal via the polar (Marsaglia) method.
    double next_gaussian() {
        if (have_cached_) {
            have_cached_ = false;
            return cached_;
        }
        double u, v, s;
        do {
            u = 2.0 * next_double() - 1.0;
            v = 2.0 * next_double() - 1.0;
            s = u * u + v * v;
        } while (s >= 1.0 || s == 0.0);
        double f = std::sqrt(-2.0 * std::log(s) / s);
        cached_ = v * f;
        have_cached_ = true;
        return u * f;
    }

    /// Fisher-Yates shuffle.
    template <typename T>
    void shuffle(std::vector<T>& items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    /// `count` distinct values from [0, n), in random order.
    std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count) {
        std::vector<std::size_t> pool(n);
        for (std::size_t i = 0; i < n; ++i) {
            pool[i] = i;
        }
        if (count > n) {
            count = n;
        }
        // Partial Fisher-Yates: after i swaps the prefix is the sample.
        for (std::size_t i = 0; i < count; ++i) {
            std::size_t j = i + static_cast<std::size_t>(next_below(n - i));
            std::swap(pool[i], pool[j]);
        }
        pool.resize(count);
        return pool;
    }

private:
    SplitRng(std::uint64_t key, std::uint64_t state) : key_(key), state_(state) {}

    static constexpr std::uint64_t kDomain = 0x7472616A65637400ull;
    static constexpr std::uint64_t kFnvOffset = 0xCBF29CE484222325ull;
    static constexpr std::uint64_t kFnvPrime = 0x100000001B3ull;

    static std::uint64_t mix_steps(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    static std::uint64_t mix(std::uint64_t z) {
        return mix_steps(z + 0x9E3779B97F4A7C15ull);
    }

    std::uint64_t key_;
    std::uint64_t state_;
    bool have_cached_ = false;
    double cached_ = 0.0;
};

} // namespace traject

#endif
