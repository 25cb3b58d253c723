#ifndef TRAJECT_COMMON_HPP
#define TRAJECT_COMMON_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#ifdef _OPENMP
#include <omp.h>
#endif

/**
 * @file common.hpp
 * @brief Shared aliases, error types and thread configuration.
 */

namespace traject {

/// Dense row-major matrix of doubles. Embeddings are stored row-per-patch,
/// so row-major keeps neighbor scans cache-friendly.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Accumulates non-fatal diagnostics (degenerate scales, undersupplied
/// strata, dropped duplicates). Callers may pass nullptr to discard.
using Warnings = std::vector<std::string>;

inline void warn(Warnings* w, std::string msg) {
    if (w) {
        w->push_back(std::move(msg));
    }
}

/// Malformed or inconsistent user input (files, flags, shapes). Maps to
/// process exit code 2.
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

/// A computation that could not proceed on valid input (disconnected graph,
/// non-convergence, degenerate data). Maps to process exit code 1.
class AnalysisError : public std::runtime_error {
public:
    explicit AnalysisError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace threads {

namespace detail {

inline int& stored_count() {
    static int count = 0; // 0 = not yet resolved
    return count;
}

inline int resolve_default() {
    if (const char* env = std::getenv("TRAJECT_THREADS")) {
        char* end = nullptr;
        long v = std::strtol(env, &end, 10);
        if (end != env && v > 0) {
            return static_cast<int>(std::min<long>(v, 1024));
        }
    }
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

} // namespace detail

/// Number of worker threads the library may use. Defaults to the
/// TRAJECT_THREADS environment variable, falling back to the OpenMP default.
inline int count() {
    int& c = detail::stored_count();
    if (c == 0) {
        c = detail::resolve_default();
    }
    return c;
}

/// Overrides the thread cap for this process (0 restores the default
/// resolution). All results are bit-identical across thread counts.
inline void set_count(int n) {
    detail::stored_count() = (n > 0 ? n : 0);
    if (n <= 0) {
        (void)count();
    }
}

} // namespace threads

/// Quantile of a sample by linear interpolation between order statistics.
/// `sorted` must be ascending and non-empty; q in [0, 1].
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) {
        throw AnalysisError("quantile of empty sample");
    }
    if (sorted.size() == 1) {
        return sorted.front();
    }
    q = std::clamp(q, 0.0, 1.0);
    double h = q * static_cast<double>(sorted.size() - 1);
    auto lo = static_cast<std::size_t>(h);
    if (lo + 1 >= sorted.size()) {
        return sorted.back();
    }
    double frac = h - static_cast<double>(lo);
    return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

inline double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) {
        throw AnalysisError("mean of empty sample");
    }
    double s = 0.0;
    for (double x : xs) {
        s += x;
    }
    return s / static_cast<double>(xs.size());
}

} // namespace traject

#endif
