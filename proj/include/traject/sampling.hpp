#ifndef TRAJECT_SAMPLING_HPP
#define TRAJECT_SAMPLING_HPP

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "ingest.hpp"
#include "rng.hpp"

/**
 * @file sampling.hpp
 * @brief Slide-aware cohort sampling and stratified bootstrap resampling.
 *
 * Cohorts are standardized by drawing up to `per_class_n` patches per class
 * while capping the contribution of any single slide, so that no slide
 * dominates a class. Bootstrap replicates resample with replacement within
 * each class, holding class sizes fixed.
 */

namespace traject {
namespace sampling {

struct SamplePlan {
    std::size_t per_class_n = 1000;
    std::size_t per_slide_cap = 50;
    std::uint64_t seed = 0;
};

/// Row indices into an EmbeddingSet, with the per-class breakdown.
struct IndexSample {
    std::vector<std::size_t> indices;      // ascending; bootstrap may repeat values
    std::vector<std::size_t> class_counts; // per progression class
};

/**
 * Per class: slides are visited in a seed-shuffled order and up to
 * `per_slide_cap` patches (shuffled within the slide) are taken from each
 * until `per_class_n` patches are collected. A class whose capped supply is
 * smaller than `per_class_n` keeps everything available, with a warning.
 *
 * Each class consumes an independent derived stream, so per-class draws do
 * not depend on how other classes are processed.
 */
inline IndexSample slide_aware_sample(const ingest::EmbeddingSet& set, const SamplePlan& plan,
                                      Warnings* warnings = nullptr) {
    if (plan.per_class_n == 0) {
        throw InputError("slide_aware_sample: per_class_n must be >= 1");
    }
    if (plan.per_slide_cap == 0) {
        throw InputError("slide_aware_sample: per_slide_cap must be >= 1");
    }

    const SplitRng root(plan.seed);
    IndexSample out;
    out.class_counts.resize(set.n_classes(), 0);

    for (std::size_t c = 0; c < set.n_classes(); ++c) {
        SplitRng rng = root.derive("slide_sample", c);

        std::vector<std::size_t> slide_order(set.class_slides[c].size());
        for (std::size_t s = 0; s < slide_order.size(); ++s) {
            slide_order[s] = s;
        }
        rng.shuffle(slide_order);

        std::size_t taken = 0;
        for (std::size_t s : slide_order) {
            if (taken == plan.per_class_n) {
                break;
            }
            std::vector<std::size_t> members = set.class_slides[c][s].members;
            rng.shuffle(members);
            const std::size_t want =
                std::min({plan.per_slide_cap, members.size(), plan.per_class_n - taken});
            for (std::size_t i = 0; i < want; ++i) {
                out.indices.push_back(members[i]);
            }
            taken += want;
        }

        if (taken < plan.per_class_n) {
            warn(warnings, "slide_aware_sample: class '" + set.spec.classes[c] + "' supplied " +
                               std::to_string(taken) + " of " + std::to_string(plan.per_class_n) +
                               " requested patches under the per-slide cap");
        }
        out.class_counts[c] = taken;
    }

    std::sort(out.indices.begin(), out.indices.end());
    return out;
}

/**
 * One bootstrap replicate of `base`: within each class, indices are drawn
 * with replacement from that class's sampled indices, preserving the class
 * size exactly. Draws are keyed by (seed, iteration, class), so replicates
 * are reproducible regardless of evaluation order or thread count.
 */
inline IndexSample stratified_bootstrap(const IndexSample& base,
                                        const std::vector<int>& class_ranks,
                                        std::size_t n_classes, std::uint64_t seed,
                                        std::uint64_t iteration) {
    if (base.indices.empty()) {
        throw InputError("stratified_bootstrap: empty base sample");
    }

    std::vector<std::vector<std::size_t>> strata(n_classes);
    for (std::size_t idx : base.indices) {
        const int r = class_ranks.at(idx);
        strata[static_cast<std::size_t>(r)].push_back(idx);
    }

    const SplitRng root = SplitRng(seed).derive("bootstrap", iteration);
    IndexSample out;
    out.class_counts.resize(n_classes, 0);
    out.indices.reserve(base.indices.size());
    for (std::size_t c = 0; c < n_classes; ++c) {
        const std::vector<std::size_t>& pool = strata[c];
        if (pool.empty()) {
            continue;
        }
        SplitRng rng = root.derive("class", c);
        for (std::size_t i = 0; i < pool.size(); ++i) {
            out.indices.push_back(pool[static_cast<std::size_t>(rng.next_below(pool.size()))]);
        }
        out.class_counts[c] = pool.size();
    }

    std::sort(out.indices.begin(), out.indices.end());
    return out;
}

} // namespace sampling
} // namespace traject

#endif
