#ifndef TRAJECT_METRICS_HPP
#define TRAJECT_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <numeric>
#include <string>
#include <unordered_map>
#include <vector>

#include "common.hpp"
#include "rng.hpp"

/**
 * @file metrics.hpp
 * @brief Rank correlation and manifold diagnostics.
 *
 * Provides the ordinal agreement statistics (Kendall tau-b, Spearman rho),
 * neighborhood-preservation trustworthiness, and the two-nearest-neighbor
 * intrinsic dimension estimator.
 */

namespace traject {
namespace metrics {

namespace detail {

// Counts strict inversions (i < j with v[i] > v[j]) by bottom-up merge sort.
inline std::uint64_t count_inversions(std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<double> buf(n);
    std::uint64_t inversions = 0;
    for (std::size_t width = 1; width < n; width *= 2) {
        for (std::size_t lo = 0; lo + width < n; lo += 2 * width) {
            const std::size_t mid = lo + width;
            const std::size_t hi = std::min(lo + 2 * width, n);
            std::size_t a = lo, b = mid, out = lo;
            while (a < mid && b < hi) {
                if (v[b] < v[a]) {
                    // Everything left in [a, mid) exceeds v[b].
                    inversions += static_cast<std::uint64_t>(mid - a);
                    buf[out++] = v[b++];
                } else {
                    buf[out++] = v[a++];
                }
            }
            while (a < mid) buf[out++] = v[a++];
            while (b < hi) buf[out++] = v[b++];
            std::copy(buf.begin() + static_cast<std::ptrdiff_t>(lo),
                      buf.begin() + static_cast<std::ptrdiff_t>(hi),
                      v.begin() + static_cast<std::ptrdiff_t>(lo));
        }
    }
    return inversions;
}

// Sum over equal-value runs of g*(g-1)/2, i.e. the number of tied pairs.
inline std::uint64_t tied_pairs_sorted(const std::vector<double>& sorted) {
    std::uint64_t total = 0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i + 1;
        while (j < sorted.size() && sorted[j] == sorted[i]) ++j;
        const std::uint64_t g = j - i;
        total += g * (g - 1) / 2;
        i = j;
    }
    return total;
}

struct PairCounts {
    std::uint64_t n0 = 0;      // all pairs
    std::uint64_t x_ties = 0;  // pairs tied in x (including both-tied)
    std::uint64_t y_ties = 0;  // pairs tied in y (including both-tied)
    std::int64_t con_minus_dis = 0;
};

inline double finish_tau(const PairCounts& c) {
    const std::uint64_t denx = c.n0 - c.x_ties;
    const std::uint64_t deny = c.n0 - c.y_ties;
    if (denx == 0 || deny == 0) {
        throw AnalysisError("kendall tau-b undefined: one input is entirely tied");
    }
    return static_cast<double>(c.con_minus_dis) /
           std::sqrt(static_cast<double>(denx) * static_cast<double>(deny));
}

} // namespace detail

/**
 * Kendall tau-b between two sequences, with the tie-corrected denominator
 * sqrt((n0 - Tx) * (n0 - Ty)). O(n log n) via sort plus inversion counting.
 *
 * Throws AnalysisError when either sequence is entirely tied (tau undefined)
 * and InputError on length mismatch or n < 2.
 */
inline double kendall_tau_b(const std::vector<double>& x, const std::vector<double>& y) {
    const std::size_t n = x.size();
    if (n != y.size()) {
        throw InputError("kendall tau-b: length mismatch (" + std::to_string(n) + " vs " +
                         std::to_string(y.size()) + ")");
    }
    if (n < 2) {
        throw InputError("kendall tau-b: need at least 2 observations");
    }

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (x[a] != x[b]) return x[a] < x[b];
        return y[a] < y[b];
    });

    detail::PairCounts c;
    c.n0 = static_cast<std::uint64_t>(n) * (n - 1) / 2;

    // Tie runs in x, and joint (x, y) runs, along the sorted order.
    std::uint64_t xy_ties = 0;
    {
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i + 1;
            while (j < n && x[order[j]] == x[order[i]]) ++j;
            const std::uint64_t g = j - i;
            c.x_ties += g * (g - 1) / 2;
            std::size_t a = i;
            while (a < j) {
                std::size_t b = a + 1;
                while (b < j && y[order[b]] == y[order[a]]) ++b;
                const std::uint64_t h = b - a;
                xy_ties += h * (h - 1) / 2;
                a = b;
            }
            i = j;
        }
    }

    std::vector<double> ys(n);
    for (std::size_t i = 0; i < n; ++i) {
        ys[i] = y[order[i]];
    }
    const std::uint64_t discordant = detail::count_inversions(ys);
    // ys is now sorted; reuse it for the y tie count.
    c.y_ties = detail::tied_pairs_sorted(ys);

    c.con_minus_dis = static_cast<std::int64_t>(c.n0) - static_cast<std::int64_t>(c.x_ties) -
                      static_cast<std::int64_t>(c.y_ties) + static_cast<std::int64_t>(xy_ties) -
                      2 * static_cast<std::int64_t>(discordant);
    return detail::finish_tau(c);
}

inline double kendall_tau_b(const std::vector<double>& x, const std::vector<int>& y) {
    std::vector<double> yd(y.begin(), y.end());
    return kendall_tau_b(x, yd);
}

/// Midranks (1-based, ties averaged), the rank transform used by Spearman.
inline std::vector<double> midranks(const std::vector<double>& v) {
    const std::size_t n = v.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i + 1;
        while (j < n && v[order[j]] == v[order[i]]) ++j;
        // Average of 1-based positions i+1 .. j.
        const double r = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t a = i; a < j; ++a) {
            ranks[order[a]] = r;
        }
        i = j;
    }
    return ranks;
}

/**
 * Spearman rank correlation: Pearson correlation of midranks.
 * Throws AnalysisError when either input is constant.
 */
inline double spearman_rho(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw InputError("spearman rho: length mismatch");
    }
    if (a.size() < 2) {
        throw InputError("spearman rho: need at least 2 observations");
    }
    std::vector<double> ra = midranks(a);
    std::vector<double> rb = midranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        const double da = ra[i] - ma;
        const double db = rb[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa == 0.0 || sbb == 0.0) {
        throw AnalysisError("spearman rho undefined: constant input");
    }
    return sab / std::sqrt(saa * sbb);
}

inline double spearman_rho(const std::vector<double>& a, const std::vector<int>& b) {
    std::vector<double> bd(b.begin(), b.end());
    return spearman_rho(a, bd);
}

namespace detail {

// Rows scaled to unit L2 norm; reports the first zero-norm row.
inline Matrix unit_rows(const Matrix& x, const char* context) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double norm = x.row(i).norm();
        if (!(norm > 0.0)) {
            throw InputError(std::string(context) + ": zero-norm embedding row " +
                             std::to_string(i));
        }
        out.row(i) = x.row(i) / norm;
    }
    return out;
}

} // namespace detail

/**
 * Trustworthiness of an embedding: 1 minus the normalized penalty incurred
 * by points that are among the `k` nearest in the embedded space but not in
 * the original space. Original-space distances are cosine, embedded-space
 * distances Euclidean. Distance ties break toward the lower index.
 */
inline double trustworthiness(const Matrix& original, const Matrix& embedded, int k) {
    const Eigen::Index n = original.rows();
    if (embedded.rows() != n) {
        throw InputError("trustworthiness: row count mismatch");
    }
    if (k < 1) {
        throw InputError("trustworthiness: k must be >= 1");
    }
    if (2 * static_cast<std::int64_t>(k) >= n) {
        throw InputError("trustworthiness: k = " + std::to_string(k) +
                         " too large for n = " + std::to_string(n) + " (need k < n/2)");
    }

    const Matrix xn = detail::unit_rows(original, "trustworthiness");
    const std::size_t un = static_cast<std::size_t>(n);
    std::vector<std::int64_t> penalty(un, 0);

    const int nthreads = threads::count();
#pragma omp parallel num_threads(nthreads)
    {
        std::vector<double> orig_dist(un);
        std::vector<double> emb_dist(un);
        std::vector<std::int32_t> order(un);
        std::vector<std::int32_t> orig_rank(un);
        std::vector<std::int32_t> emb_near(static_cast<std::size_t>(k));

#pragma omp for schedule(static)
        for (Eigen::Index i = 0; i < n; ++i) {
            for (Eigen::Index j = 0; j < n; ++j) {
                orig_dist[static_cast<std::size_t>(j)] = 1.0 - xn.row(i).dot(xn.row(j));
                emb_dist[static_cast<std::size_t>(j)] =
                    (embedded.row(i) - embedded.row(j)).squaredNorm();
            }

            // Rank of every j != i in the original space (1 = nearest).
            std::int32_t m = 0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (j != i) order[static_cast<std::size_t>(m++)] = static_cast<std::int32_t>(j);
            }
            std::sort(order.begin(), order.begin() + m, [&](std::int32_t a, std::int32_t b) {
                const double da = orig_dist[static_cast<std::size_t>(a)];
                const double db = orig_dist[static_cast<std::size_t>(b)];
                if (da != db) return da < db;
                return a < b;
            });
            for (std::int32_t r = 0; r < m; ++r) {
                orig_rank[static_cast<std::size_t>(order[static_cast<std::size_t>(r)])] = r + 1;
            }

            // k nearest in the embedded space.
            m = 0;
            for (Eigen::Index j = 0; j < n; ++j) {
                if (j != i) order[static_cast<std::size_t>(m++)] = static_cast<std::int32_t>(j);
            }
            std::partial_sort(order.begin(), order.begin() + k, order.begin() + m,
                              [&](std::int32_t a, std::int32_t b) {
                                  const double da = emb_dist[static_cast<std::size_t>(a)];
                                  const double db = emb_dist[static_cast<std::size_t>(b)];
                                  if (da != db) return da < db;
                                  return a < b;
                              });

            std::int64_t p = 0;
            for (int r = 0; r < k; ++r) {
                const std::int32_t j = order[static_cast<std::size_t>(r)];
                const std::int32_t rank = orig_rank[static_cast<std::size_t>(j)];
                if (rank > k) {
                    p += rank - k;
                }
            }
            penalty[static_cast<std::size_t>(i)] = p;
        }
    }

    std::int64_t total = 0;
    for (std::int64_t p : penalty) {
        total += p;
    }
    const double norm = static_cast<double>(n) * static_cast<double>(k) *
                        (2.0 * static_cast<double>(n) - 3.0 * static_cast<double>(k) - 1.0);
    return 1.0 - 2.0 / norm * static_cast<double>(total);
}

/// Result of the two-nearest-neighbor intrinsic dimension fit.
struct IdEstimate {
    double dim = 0.0;
    std::size_t n_used = 0;          // points entering the regression
    double discard_fraction = 0.10;  // top ratio quantile removed before the fit
};

/**
 * Two-nearest-neighbor intrinsic dimension. For each point the ratio
 * mu = r2/r1 of its two nearest Euclidean neighbor distances follows a
 * Pareto law with shape equal to the intrinsic dimension; the estimate is a
 * least-squares fit through the origin of log mu against -log(1 - F(mu)),
 * after discarding the top 10% of ratios.
 *
 * At most `subsample` rows are used (seeded uniform choice without
 * replacement); exact duplicate rows are dropped first. Throws AnalysisError
 * when fewer than 10 usable points remain.
 */
inline IdEstimate twonn_id(const Matrix& x, std::size_t subsample, std::uint64_t seed,
                           Warnings* warnings = nullptr) {
    const std::size_t n = static_cast<std::size_t>(x.rows());
    if (n < 3) {
        throw InputError("twonn_id: need at least 3 rows");
    }

    std::vector<std::size_t> chosen;
    if (subsample >= n) {
        chosen.resize(n);
        std::iota(chosen.begin(), chosen.end(), std::size_t{0});
    } else {
        SplitRng rng = SplitRng(seed).derive("twonn_subsample");
        chosen = rng.sample_without_replacement(n, subsample);
        std::sort(chosen.begin(), chosen.end());
    }

    // Exact duplicates distort the ratio law (r1 = 0); keep first occurrences.
    std::unordered_map<std::string, std::size_t> seen;
    seen.reserve(chosen.size() * 2);
    std::vector<std::size_t> unique;
    unique.reserve(chosen.size());
    const auto cols = static_cast<std::size_t>(x.cols());
    std::string key(cols * sizeof(double), '\0');
    for (std::size_t idx : chosen) {
        for (std::size_t c = 0; c < cols; ++c) {
            double v = x(static_cast<Eigen::Index>(idx), static_cast<Eigen::Index>(c));
            if (v == 0.0) v = 0.0; // collapse -0.0 and +0.0
            std::memcpy(key.data() + c * sizeof(double), &v, sizeof(double));
        }
        if (seen.emplace(key, idx).second) {
            unique.push_back(idx);
        }
    }
    if (unique.size() < chosen.size()) {
        warn(warnings, "twonn_id: dropped " + std::to_string(chosen.size() - unique.size()) +
                           " duplicate rows before estimating");
    }

    const std::size_t m = unique.size();
    if (m < 10) {
        throw AnalysisError("twonn_id: only " + std::to_string(m) +
                            " usable points after removing duplicates (need >= 10)");
    }

    Matrix sub(static_cast<Eigen::Index>(m), x.cols());
    for (std::size_t i = 0; i < m; ++i) {
        sub.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(unique[i]));
    }
    Vector sq = sub.rowwise().squaredNorm();

    std::vector<double> mu;
    mu.resize(m, 0.0);
    std::vector<char> usable(m, 1);

    const int nthreads = threads::count();
    const Eigen::Index block = 256;
#pragma omp parallel for schedule(static) num_threads(nthreads)
    for (Eigen::Index b0 = 0; b0 < static_cast<Eigen::Index>(m); b0 += block) {
        const Eigen::Index b1 = std::min<Eigen::Index>(b0 + block, static_cast<Eigen::Index>(m));
        Matrix gram = sub.middleRows(b0, b1 - b0) * sub.transpose();
        for (Eigen::Index i = b0; i < b1; ++i) {
            double r1 = std::numeric_limits<double>::infinity();
            double r2 = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(m); ++j) {
                if (j == i) continue;
                double d2 = sq[i] + sq[j] - 2.0 * gram(i - b0, j);
                if (d2 < 0.0) d2 = 0.0;
                if (d2 < r1) {
                    r2 = r1;
                    r1 = d2;
                } else if (d2 < r2) {
                    r2 = d2;
                }
            }
            if (r1 <= 0.0) {
                usable[static_cast<std::size_t>(i)] = 0; // residual duplicate
            } else {
                mu[static_cast<std::size_t>(i)] = std::sqrt(r2 / r1);
            }
        }
    }

    std::vector<double> ratios;
    ratios.reserve(m);
    std::size_t skipped = 0;
    for (std::size_t i = 0; i < m; ++i) {
        if (usable[i]) {
            ratios.push_back(mu[i]);
        } else {
            ++skipped;
        }
    }
    if (skipped > 0) {
        warn(warnings, "twonn_id: skipped " + std::to_string(skipped) +
                           " points with zero first-neighbor distance");
    }
    if (ratios.size() < 10) {
        throw AnalysisError("twonn_id: only " + std::to_string(ratios.size()) +
                            " usable points (need >= 10)");
    }

    std::sort(ratios.begin(), ratios.end());
    const std::size_t total = ratios.size();
    const double discard_fraction = 0.10;
    const std::size_t kept = total - static_cast<std::size_t>(
                                         std::floor(discard_fraction * static_cast<double>(total)));

    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < kept; ++i) {
        const double xv = std::log(ratios[i]);
        const double f = static_cast<double>(i + 1) / static_cast<double>(total);
        const double yv = -std::log1p(-f);
        sxx += xv * xv;
        sxy += xv * yv;
    }
    if (sxx == 0.0) {
        throw AnalysisError("twonn_id: degenerate neighbor ratios (all mu == 1)");
    }

    IdEstimate est;
    est.dim = sxy / sxx;
    est.n_used = kept;
    est.discard_fraction = discard_fraction;
    return est;
}

/// Percent reduction from a raw-space to a manifold intrinsic dimension.
inline double id_reduction(double raw_id, double manifold_id) {
    if (!(raw_id > 0.0)) {
        throw InputError("id_reduction: raw dimension must be positive");
    }
    return 100.0 * (1.0 - manifold_id / raw_id);
}

} // namespace metrics
} // namespace traject

#endif
