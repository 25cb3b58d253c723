#ifndef TRAJECT_SYNTH_HPP
#define TRAJECT_SYNTH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "common.hpp"
#include "ingest.hpp"
#include "metrics.hpp"
#include "rng.hpp"

/**
 * @file synth.hpp
 * @brief Synthetic progression oracle: embeddings with a known latent order.
 *
 * Each point carries a latent progression coordinate s ~ U[0,1]. Embeddings
 * lie on a smooth injective curve gamma(s) in R^d plus isotropic Gaussian
 * noise, class labels bin s into equal-width stages, and slide ids tile
 * contiguous latent blocks within each class. Because the true ordering is
 * known, the generator provides the attainable tau ceiling: the tau-b
 * between the latent coordinate and the binned labels, which no pseudotime
 * can exceed in expectation.
 *
 * The curve is a fixed-radius offset plus a linear drift along one random
 * direction and `curve_modes` sinusoidal harmonics with 1/m amplitude decay
 * along random directions orthogonal to the drift. The monotone drift
 * component makes gamma injective for every draw of the harmonics.
 */

namespace traject {
namespace synth {

struct SyntheticConfig {
    std::size_t classes = 4;
    std::size_t per_class = 1000;
    std::size_t dim = 512;
    int curve_modes = 8;
    double noise_sigma = 0.0;   // expected noise norm (scaled by 1/sqrt(dim) per axis)
    std::size_t slides_per_class = 25;
    std::uint64_t seed = 0;
};

struct SyntheticSet {
    Matrix embeddings;
    std::vector<ingest::PatchRecord> records;
    ingest::ProgressionSpec spec;
    std::vector<int> class_ranks;
    std::vector<double> latent; // s per row, grouped by class and ascending within it
    double tau_ceiling = 0.0;
};

/// tau-b between the latent coordinate and the ordinal labels: the ceiling
/// any pseudotime can reach against the same labels.
inline double attainable_tau_ceiling(const std::vector<double>& latent,
                                     const std::vector<int>& class_ranks) {
    return metrics::kendall_tau_b(latent, class_ranks);
}

inline SyntheticSet generate(const SyntheticConfig& cfg) {
    if (cfg.classes < 2) {
        throw InputError("synth: need at least 2 classes");
    }
    if (cfg.per_class < 1) {
        throw InputError("synth: per_class must be >= 1");
    }
    if (cfg.dim < 2) {
        throw InputError("synth: dim must be >= 2");
    }
    if (cfg.curve_modes < 1) {
        throw InputError("synth: curve_modes must be >= 1");
    }
    if (cfg.noise_sigma < 0.0) {
        throw InputError("synth: noise_sigma must be >= 0");
    }
    if (cfg.slides_per_class < 1) {
        throw InputError("synth: slides_per_class must be >= 1");
    }

    const std::size_t n = cfg.classes * cfg.per_class;
    const auto d = static_cast<Eigen::Index>(cfg.dim);
    const SplitRng root(cfg.seed);

    // Curve geometry. The offset keeps the curve away from the origin so
    // cosine distances vary smoothly along it.
    constexpr double kOffsetRadius = 2.0;
    constexpr double kDriftLength = 2.0;
    constexpr double kWiggleAmp = 1.0;

    SplitRng curve_rng = root.derive("curve");
    auto gaussian_vec = [&](SplitRng& r) {
        Vector v(d);
        for (Eigen::Index i = 0; i < d; ++i) {
            v[i] = r.next_gaussian();
        }
        return v;
    };

    Vector offset_dir = gaussian_vec(curve_rng).normalized();
    Vector drift_dir = gaussian_vec(curve_rng);
    drift_dir -= offset_dir * offset_dir.dot(drift_dir);
    drift_dir.normalize();

    const auto modes = static_cast<std::size_t>(cfg.curve_modes);
    Matrix mode_dirs(static_cast<Eigen::Index>(modes), d);
    std::vector<double> phases(modes);
    for (std::size_t m = 0; m < modes; ++m) {
        Vector u = gaussian_vec(curve_rng);
        u -= drift_dir * drift_dir.dot(u); // keep the drift projection monotone
        u.normalize();
        mode_dirs.row(static_cast<Eigen::Index>(m)) = u;
        phases[m] = 2.0 * 3.14159265358979323846 * curve_rng.next_double();
    }

    auto curve_point = [&](double s, Eigen::Ref<Eigen::RowVectorXd> out) {
        out = kOffsetRadius * offset_dir.transpose() + (kDriftLength * s) * drift_dir.transpose();
        for (std::size_t m = 0; m < modes; ++m) {
            const double freq = 3.14159265358979323846 * static_cast<double>(m + 1);
            const double a = kWiggleAmp / static_cast<double>(m + 1);
            out += (a * std::sin(freq * s + phases[m])) *
                   mode_dirs.row(static_cast<Eigen::Index>(m));
        }
    };

    SyntheticSet set;
    set.embeddings.resize(static_cast<Eigen::Index>(n), d);
    set.latent.resize(n);
    set.class_ranks.resize(n);
    set.records.resize(n);
    set.spec.name = "synthetic_progression";
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        set.spec.classes.push_back("stage_" + std::to_string(c));
    }

    // Latent coordinates: per class, uniform within the class's bin of
    // [0,1), so floor(s * classes) reproduces the class exactly and class
    // sizes are exact. Ascending order within a class makes slide blocks
    // contiguous in s.
    const std::size_t block =
        (cfg.per_class + cfg.slides_per_class - 1) / cfg.slides_per_class;
    SplitRng noise_rng = root.derive("noise");
    const double noise_axis_sigma =
        cfg.noise_sigma / std::sqrt(static_cast<double>(cfg.dim));

    std::size_t row = 0;
    const int id_width = std::max<int>(6, static_cast<int>(std::to_string(n).size()));
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        SplitRng latent_rng = root.derive("latent", c);
        std::vector<double> ss(cfg.per_class);
        for (std::size_t i = 0; i < cfg.per_class; ++i) {
            ss[i] = (static_cast<double>(c) + latent_rng.next_double()) /
                    static_cast<double>(cfg.classes);
        }
        std::sort(ss.begin(), ss.end());

        for (std::size_t i = 0; i < cfg.per_class; ++i, ++row) {
            const double s = ss[i];
            set.latent[row] = s;
            set.class_ranks[row] = static_cast<int>(c);

            curve_point(s, set.embeddings.row(static_cast<Eigen::Index>(row)));
            if (cfg.noise_sigma > 0.0) {
                for (Eigen::Index j = 0; j < d; ++j) {
                    set.embeddings(static_cast<Eigen::Index>(row), j) +=
                        noise_axis_sigma * noise_rng.next_gaussian();
                }
            }

            ingest::PatchRecord rec;
            std::string num = std::to_string(row);
            rec.patch_id = "p" + std::string(static_cast<std::size_t>(id_width) - num.size(), '0') + num;
            rec.slide_id = "synthslide_c" + std::to_string(c) + "_b" + std::to_string(i / block);
            rec.class_label = set.spec.classes[c];
            set.records[row] = std::move(rec);
        }
    }

    set.tau_ceiling = attainable_tau_ceiling(set.latent, set.class_ranks);
    return set;
}

} // namespace synth
} // namespace traject

#endif
