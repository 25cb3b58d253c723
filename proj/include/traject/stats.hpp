#ifndef TRAJECT_STATS_HPP
#define TRAJECT_STATS_HPP

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"
#include "metrics.hpp"
#include "rng.hpp"
#include "sampling.hpp"

/**
 * @file stats.hpp
 * @brief Null, permutation and bootstrap statistics for trajectory fidelity.
 */

namespace traject {
namespace stats {

struct NullDistribution {
    std::vector<double> taus; // one per replicate, in replicate order
    double mean = 0.0;
    double p2_5 = 0.0;
    double p97_5 = 0.0;
};

/**
 * Label-shuffle null: tau-b between the fixed pseudotime and uniformly
 * permuted class ranks, `reps` times. Replicate r draws from the stream
 * (seed, "null_shuffle", r), so results are independent of thread count.
 */
inline NullDistribution label_shuffle_null(const std::vector<double>& t,
                                           const std::vector<int>& class_ranks, std::size_t reps,
                                           std::uint64_t seed) {
    if (t.size() != class_ranks.size()) {
        throw InputError("label_shuffle_null: length mismatch");
    }
    if (reps < 1) {
        throw InputError("label_shuffle_null: reps must be >= 1");
    }

    const SplitRng root(seed);
    NullDistribution null;
    null.taus.resize(reps);

    const int nthreads = threads::count();
#pragma omp parallel num_threads(nthreads)
    {
        std::vector<int> shuffled;
#pragma omp for schedule(static)
        for (std::int64_t r = 0; r < static_cast<std::int64_t>(reps); ++r) {
            SplitRng rng = root.derive("null_shuffle", static_cast<std::uint64_t>(r));
            shuffled = class_ranks;
            rng.shuffle(shuffled);
            null.taus[static_cast<std::size_t>(r)] = metrics::kendall_tau_b(t, shuffled);
        }
    }

    null.mean = mean_of(null.taus);
    std::vector<double> sorted = null.taus;
    std::sort(sorted.begin(), sorted.end());
    null.p2_5 = quantile_sorted(sorted, 0.025);
    null.p97_5 = quantile_sorted(sorted, 0.975);
    return null;
}

struct OrderingEntry {
    std::string ordering; // classes from earliest to latest, joined by '>'
    double tau = 0.0;
};

struct PermutationReport {
    std::vector<OrderingEntry> orderings; // all C! relabelings, lexicographic
    double true_tau = 0.0;
    std::size_t true_rank = 0; // 1 = strict maximum
    double null_median = 0.0;
};

/**
 * Exhaustive ordering permutation test: tau-b of the fixed pseudotime
 * against every permutation of the class ranks (C! relabelings, C <= 8).
 * Pseudotime is not recomputed per ordering; only the rank assignment
 * changes. The identity permutation reproduces the true tau exactly, and
 * reversing an ordering negates its tau exactly.
 */
inline PermutationReport ordering_permutation_test(const std::vector<double>& t,
                                                   const std::vector<int>& class_ranks,
                                                   const std::vector<std::string>& class_names) {
    const std::size_t c = class_names.size();
    if (c < 2) {
        throw InputError("ordering_permutation_test: need at least 2 classes");
    }
    if (c > 8) {
        throw InputError("ordering_permutation_test: exhaustive enumeration is capped at 8 "
                         "classes (got " +
                         std::to_string(c) + ")");
    }
    if (t.size() != class_ranks.size()) {
        throw InputError("ordering_permutation_test: length mismatch");
    }

    std::vector<int> perm(c);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<std::vector<int>> perms;
    do {
        perms.push_back(perm);
    } while (std::next_permutation(perm.begin(), perm.end()));

    PermutationReport report;
    report.orderings.resize(perms.size());

    const int nthreads = threads::count();
#pragma omp parallel num_threads(nthreads)
    {
        std::vector<int> relabeled(class_ranks.size());
#pragma omp for schedule(static)
        for (std::int64_t p = 0; p < static_cast<std::int64_t>(perms.size()); ++p) {
            const std::vector<int>& pi = perms[static_cast<std::size_t>(p)];
            for (std::size_t i = 0; i < class_ranks.size(); ++i) {
                relabeled[i] = pi[static_cast<std::size_t>(class_ranks[i])];
            }
            OrderingEntry& entry = report.orderings[static_cast<std::size_t>(p)];
            entry.tau = metrics::kendall_tau_b(t, relabeled);
            // Class at rank position r, earliest first.
            std::vector<std::size_t> by_rank(c);
            for (std::size_t cls = 0; cls < c; ++cls) {
                by_rank[static_cast<std::size_t>(pi[cls])] = cls;
            }
            for (std::size_t r = 0; r < c; ++r) {
                entry.ordering += (r ? ">" : "") + class_names[by_rank[r]];
            }
        }
    }

    report.true_tau = report.orderings.front().tau; // identity comes first
    std::size_t greater = 0;
    std::vector<double> taus(report.orderings.size());
    for (std::size_t i = 0; i < report.orderings.size(); ++i) {
        taus[i] = report.orderings[i].tau;
        if (i > 0 && taus[i] > report.true_tau) {
            ++greater;
        }
    }
    report.true_rank = 1 + greater;
    std::sort(taus.begin(), taus.end());
    const std::size_t m = taus.size();
    report.null_median =
        (m % 2 == 1) ? taus[m / 2] : 0.5 * (taus[m / 2 - 1] + taus[m / 2]);
    return report;
}

struct BootstrapReport {
    double point_estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::vector<double> taus; // successful iterations, in iteration order
    std::size_t iterations = 0;
    std::size_t failures = 0;
};

/**
 * Stratified bootstrap of a cohort statistic. Iteration i resamples the
 * base sample within each class (sampling::stratified_bootstrap keyed by
 * (seed, i)) and re-evaluates `tau_of_sample` from scratch on the replicate.
 * The point estimate is the statistic of the unresampled base sample and the
 * interval is the percentile 95% CI across successful iterations.
 *
 * Iterations that fail with an analysis error are recorded and excluded; if
 * more than 20% fail, the whole bootstrap fails.
 */
template <typename F>
inline BootstrapReport bootstrap_ci(F&& tau_of_sample, const sampling::IndexSample& base,
                                    const std::vector<int>& class_ranks, std::size_t n_classes,
                                    std::size_t iterations, std::uint64_t seed,
                                    Warnings* warnings = nullptr) {
    if (iterations < 1) {
        throw InputError("bootstrap_ci: iterations must be >= 1");
    }

    BootstrapReport report;
    report.iterations = iterations;
    report.point_estimate = tau_of_sample(base);

    std::vector<double> taus(iterations, 0.0);
    std::vector<char> ok(iterations, 0);
    std::vector<std::string> errors(iterations);

    const int nthreads = threads::count();
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(iterations); ++i) {
        try {
            const sampling::IndexSample replicate = sampling::stratified_bootstrap(
                base, class_ranks, n_classes, seed, static_cast<std::uint64_t>(i));
            taus[static_cast<std::size_t>(i)] = tau_of_sample(replicate);
            ok[static_cast<std::size_t>(i)] = 1;
        } catch (const std::exception& e) {
            errors[static_cast<std::size_t>(i)] = e.what();
        }
    }

    for (std::size_t i = 0; i < iterations; ++i) {
        if (ok[i]) {
            report.taus.push_back(taus[i]);
        } else {
            ++report.failures;
        }
    }
    if (report.failures > 0) {
        std::string first;
        for (std::size_t i = 0; i < iterations; ++i) {
            if (!ok[i]) {
                first = errors[i];
                break;
            }
        }
        warn(warnings, "bootstrap_ci: " + std::to_string(report.failures) + " of " +
                           std::to_string(iterations) + " iterations failed (first: " + first +
                           ")");
    }
    if (5 * report.failures > iterations) {
        throw AnalysisError("bootstrap_ci: " + std::to_string(report.failures) + " of " +
                            std::to_string(iterations) +
                            " iterations failed (more than 20%); the cohort is too unstable "
                            "to bootstrap");
    }

    std::vector<double> sorted = report.taus;
    std::sort(sorted.begin(), sorted.end());
    report.ci_low = quantile_sorted(sorted, 0.025);
    report.ci_high = quantile_sorted(sorted, 0.975);
    return report;
}

} // namespace stats
} // namespace traject

#endif
