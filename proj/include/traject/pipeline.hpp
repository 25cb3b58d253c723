#ifndef TRAJECT_PIPELINE_HPP
#define TRAJECT_PIPELINE_HPP

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "diffusion.hpp"
#include "graph.hpp"
#include "ingest.hpp"
#include "metrics.hpp"
#include "probe.hpp"
#include "sampling.hpp"
#include "stats.hpp"

/**
 * @file pipeline.hpp
 * @brief End-to-end orchestration: sampling, pseudotime, fidelity and
 *        diagnostics, with JSON reports and CSV sidecars.
 *
 * Every run function surfaces module errors with a "stage <name>:" prefix so
 * the CLI can report where a failure happened. Reports carry their full
 * configuration (plus a hash of it) so any run can be reproduced exactly.
 */

namespace traject {
namespace pipeline {

inline constexpr const char* kVersion = "0.1.0";

enum class RootPolicy { medoid, fixed_index };

struct RunConfig {
    std::string embeddings_path;
    std::string manifest_path;
    std::string spec_path;
    std::string out_path; // JSON report; sidecars share its stem

    int k = 100;
    int n_dcs = 10;
    int alpha = 0;
    bool symmetrize = true;
    diffusion::DptWeights weights = diffusion::DptWeights::paper;

    std::size_t per_class_n = 1000;
    std::size_t per_slide_cap = 50;

    bool with_bootstrap = false;
    bool with_null = false;
    bool with_permutation = false;
    std::size_t bootstrap_iters = 100;
    std::size_t null_reps = 1000;

    int trust_k = 15;
    std::size_t id_subsample = 2000;

    std::uint64_t seed = 0;
    RootPolicy root_policy = RootPolicy::medoid;
    std::size_t root_index = 0; // sampled-row index when root_policy is fixed_index

    std::string model_name = "model"; // row label in joined cross-model tables
    std::string dump_transition_path; // empty means no dump

    int dense_cutoff = 512;
    bool force_dense = false;
};

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const InputError& e) {
        throw InputError(std::string("stage ") + name + ": " + e.what());
    } catch (const AnalysisError& e) {
        throw AnalysisError(std::string("stage ") + name + ": " + e.what());
    }
}

inline std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<std::size_t>(i)] = digits[v & 0xF];
        v >>= 4;
    }
    return out;
}

inline Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows) {
    Matrix out(static_cast<Eigen::Index>(rows.size()), x.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out.row(static_cast<Eigen::Index>(i)) = x.row(static_cast<Eigen::Index>(rows[i]));
    }
    return out;
}

inline std::vector<int> gather_ints(const std::vector<int>& v,
                                    const std::vector<std::size_t>& rows) {
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        out[i] = v[rows[i]];
    }
    return out;
}

inline std::string strip_json_suffix(const std::string& path) {
    const std::string suffix = ".json";
    if (path.size() > suffix.size() &&
        path.compare(path.size() - suffix.size(), suffix.size(), suffix) == 0) {
        return path.substr(0, path.size() - suffix.size());
    }
    return path;
}

inline void save_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << j.dump(2) << '\n';
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

inline nlohmann::json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw InputError(path + ": cannot open");
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": invalid JSON: " + e.what());
    }
    return j;
}

} // namespace detail

inline const char* root_policy_name(RootPolicy p) {
    return p == RootPolicy::medoid ? "medoid" : "index";
}

inline nlohmann::json config_to_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["embeddings"] = cfg.embeddings_path;
    j["manifest"] = cfg.manifest_path;
    j["spec"] = cfg.spec_path;
    j["out"] = cfg.out_path;
    j["k"] = cfg.k;
    j["n_dcs"] = cfg.n_dcs;
    j["alpha"] = cfg.alpha;
    j["symmetrize"] = cfg.symmetrize;
    j["dpt_weights"] = diffusion::dpt_weights_name(cfg.weights);
    j["per_class_n"] = cfg.per_class_n;
    j["per_slide_cap"] = cfg.per_slide_cap;
    j["with_bootstrap"] = cfg.with_bootstrap;
    j["with_null"] = cfg.with_null;
    j["with_permutation"] = cfg.with_permutation;
    j["bootstrap_iters"] = cfg.bootstrap_iters;
    j["null_reps"] = cfg.null_reps;
    j["trust_k"] = cfg.trust_k;
    j["id_subsample"] = cfg.id_subsample;
    j["seed"] = cfg.seed;
    j["root_policy"] = root_policy_name(cfg.root_policy);
    j["root_index"] = cfg.root_index;
    j["model_name"] = cfg.model_name;
    j["dump_transition"] = cfg.dump_transition_path;
    j["dense_cutoff"] = cfg.dense_cutoff;
    j["force_dense"] = cfg.force_dense;
    return j;
}

/// FNV-1a over the canonical (key-sorted) config serialization.
inline std::string config_hash(const RunConfig& cfg) {
    return "fnv1a:" + detail::hex64(detail::fnv1a64(config_to_json(cfg).dump()));
}

inline nlohmann::json provenance_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["version"] = kVersion;
    j["seed"] = cfg.seed;
    j["config_hash"] = config_hash(cfg);
    j["config"] = config_to_json(cfg);
    return j;
}

// ---------------------------------------------------------------------------
// Core analysis shared by fidelity runs and bootstrap replicates.

struct CoreResult {
    graph::TransitionMatrix transition;
    diffusion::DiffusionDecomposition decomposition;
    diffusion::PseudotimeResult pt;
    Matrix coords; // weighted diffusion coordinates, one row per point
    std::size_t root = 0;
    double tau = 0.0;
};

/**
 * Graph, decomposition, root, pseudotime and fidelity for one point set.
 * When `gram` is given, neighbor distances are looked up in that precomputed
 * cosine gram (gram_rows maps each point to its base row), which is how
 * bootstrap replicates avoid recomputing identical dot products.
 */
inline CoreResult run_core(const RunConfig& cfg, const Matrix& x, const std::vector<int>& ranks,
                           Warnings* warnings, const Matrix* gram = nullptr,
                           const std::vector<std::size_t>* gram_rows = nullptr) {
    if (static_cast<std::size_t>(x.rows()) != ranks.size()) {
        throw InputError("run_core: rank vector does not match the point count");
    }

    CoreResult res;
    const graph::NeighborGraph g = detail::stage("graph", [&] {
        if (gram) {
            return graph::knn_from_gram(*gram, *gram_rows, cfg.k);
        }
        return graph::knn_cosine(x, cfg.k);
    });
    res.transition = detail::stage("graph", [&] {
        const Vector scales = graph::local_scales(g, warnings);
        graph::TransitionOptions topts;
        topts.symmetrize = cfg.symmetrize;
        topts.alpha = cfg.alpha;
        return graph::transition_matrix(g, scales, topts);
    });
    res.decomposition = detail::stage("decompose", [&] {
        diffusion::DecomposeOptions dopts;
        dopts.n_dc = cfg.n_dcs;
        dopts.dense_cutoff = cfg.dense_cutoff;
        dopts.force_dense = cfg.force_dense;
        return diffusion::decompose(res.transition, dopts, warnings);
    });
    res.root = detail::stage("root", [&]() -> std::size_t {
        if (cfg.root_policy == RootPolicy::fixed_index) {
            if (cfg.root_index >= static_cast<std::size_t>(x.rows())) {
                throw InputError("root index " + std::to_string(cfg.root_index) +
                                 " is outside the sampled set of " + std::to_string(x.rows()) +
                                 " points");
            }
            return cfg.root_index;
        }
        const int earliest = *std::min_element(ranks.begin(), ranks.end());
        std::vector<std::size_t> candidates;
        for (std::size_t i = 0; i < ranks.size(); ++i) {
            if (ranks[i] == earliest) {
                candidates.push_back(i);
            }
        }
        return diffusion::select_root(x, candidates);
    });
    res.pt = detail::stage("pseudotime", [&] {
        return diffusion::pseudotime(res.decomposition, res.root, cfg.weights, warnings);
    });
    res.coords = diffusion::diffusion_coordinates(res.decomposition, cfg.weights);
    res.tau = detail::stage("fidelity", [&] {
        const std::vector<double> t(res.pt.t_norm.data(),
                                    res.pt.t_norm.data() + res.pt.t_norm.size());
        return metrics::kendall_tau_b(t, ranks);
    });
    return res;
}

// ---------------------------------------------------------------------------
// Fidelity report.

struct SampleSummary {
    std::size_t n = 0;
    std::vector<std::string> classes;
    std::vector<std::size_t> class_counts;
};

struct BootstrapSection {
    bool present = false;
    std::size_t iterations = 0;
    std::size_t failures = 0;
    double point_estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    std::vector<double> taus; // per-iteration values, iteration order
};

struct NullSection {
    bool present = false;
    std::size_t reps = 0;
    double mean = 0.0;
    double p2_5 = 0.0;
    double p97_5 = 0.0;
};

struct PermutationSection {
    bool present = false;
    std::size_t n_orderings = 0;
    double true_tau = 0.0;
    std::size_t true_rank = 0;
    double null_median = 0.0;
    std::string true_ordering;
    std::string best_ordering;
    std::vector<stats::OrderingEntry> orderings; // all class orderings with their taus
};

struct FidelityReport {
    std::string model;
    std::string cohort;
    SampleSummary sample;
    double tau = 0.0;
    double spectral_gap = std::numeric_limits<double>::quiet_NaN();
    double trustworthiness = 0.0;
    double raw_id = 0.0;
    double manifold_id = 0.0;
    double id_reduction_pct = 0.0;
    RootPolicy root_policy = RootPolicy::medoid;
    std::size_t root_row = 0; // row within the sampled set
    std::string root_patch_id;
    BootstrapSection bootstrap;
    NullSection null_summary;
    PermutationSection permutation;
    std::string pseudotime_csv; // sidecar path, empty when not written
    nlohmann::json provenance;
    Warnings warnings;
};

inline nlohmann::json sample_to_json(const SampleSummary& s) {
    nlohmann::json j;
    j["n"] = s.n;
    j["classes"] = s.classes;
    j["class_counts"] = s.class_counts;
    return j;
}

inline nlohmann::json report_to_json(const FidelityReport& r) {
    nlohmann::json j;
    j["schema"] = "traject-fidelity-report/v1";
    j["model"] = r.model;
    j["cohort"] = r.cohort;
    j["sample"] = sample_to_json(r.sample);
    j["tau"] = r.tau;
    // An absent gap is NaN in memory and null on disk.
    if (std::isnan(r.spectral_gap)) {
        j["spectral_gap"] = nullptr;
    } else {
        j["spectral_gap"] = r.spectral_gap;
    }
    j["trustworthiness"] = r.trustworthiness;
    j["intrinsic_dimension"] = {
        {"raw", r.raw_id}, {"manifold", r.manifold_id}, {"reduction_pct", r.id_reduction_pct}};
    j["root"] = {{"policy", root_policy_name(r.root_policy)},
                 {"sample_row", r.root_row},
                 {"patch_id", r.root_patch_id}};
    if (r.bootstrap.present) {
        j["bootstrap"] = {{"iterations", r.bootstrap.iterations},
                          {"failures", r.bootstrap.failures},
                          {"point_estimate", r.bootstrap.point_estimate},
                          {"ci_low", r.bootstrap.ci_low},
                          {"ci_high", r.bootstrap.ci_high},
                          {"taus", r.bootstrap.taus}};
    } else {
        j["bootstrap"] = nullptr;
    }
    if (r.null_summary.present) {
        j["null"] = {{"reps", r.null_summary.reps},
                     {"mean", r.null_summary.mean},
                     {"p2_5", r.null_summary.p2_5},
                     {"p97_5", r.null_summary.p97_5}};
    } else {
        j["null"] = nullptr;
    }
    if (r.permutation.present) {
        nlohmann::json orderings = nlohmann::json::array();
        for (const stats::OrderingEntry& o : r.permutation.orderings) {
            orderings.push_back({{"ordering", o.ordering}, {"tau", o.tau}});
        }
        j["permutation"] = {{"n_orderings", r.permutation.n_orderings},
                            {"true_tau", r.permutation.true_tau},
                            {"true_rank", r.permutation.true_rank},
                            {"null_median", r.permutation.null_median},
                            {"true_ordering", r.permutation.true_ordering},
                            {"best_ordering", r.permutation.best_ordering},
                            {"orderings", std::move(orderings)}};
    } else {
        j["permutation"] = nullptr;
    }
    if (r.pseudotime_csv.empty()) {
        j["pseudotime_csv"] = nullptr;
    } else {
        j["pseudotime_csv"] = r.pseudotime_csv;
    }
    j["provenance"] = r.provenance;
    j["warnings"] = r.warnings;
    return j;
}

struct FidelityOutcome {
    FidelityReport report;
    sampling::IndexSample sample;
    Vector t_raw;
    Vector t_norm;
    graph::TransitionMatrix transition;
};

/**
 * The full fidelity analysis on an already loaded set: slide-aware sample,
 * core run, manifold diagnostics, and the statistics sections enabled in the
 * config. Pure of file IO; run_fidelity adds the sidecars and report file.
 */
inline FidelityOutcome analyze(const RunConfig& cfg, const ingest::EmbeddingSet& set) {
    Warnings warnings;

    sampling::SamplePlan plan;
    plan.per_class_n = cfg.per_class_n;
    plan.per_slide_cap = cfg.per_slide_cap;
    plan.seed = cfg.seed;
    const sampling::IndexSample sample =
        detail::stage("sample", [&] { return sampling::slide_aware_sample(set, plan, &warnings); });

    const Matrix x = detail::gather_rows(set.embeddings, sample.indices);
    const std::vector<int> ranks = detail::gather_ints(set.class_ranks, sample.indices);

    CoreResult core = run_core(cfg, x, ranks, &warnings);

    FidelityOutcome out;
    FidelityReport& rep = out.report;
    rep.model = cfg.model_name;
    rep.cohort = set.spec.name;
    rep.sample.n = sample.indices.size();
    rep.sample.classes = set.spec.classes;
    rep.sample.class_counts = sample.class_counts;
    rep.tau = core.tau;
    rep.spectral_gap = core.pt.spectral_gap;
    rep.root_policy = cfg.root_policy;
    rep.root_row = core.root;
    rep.root_patch_id = set.records[sample.indices[core.root]].patch_id;

    rep.trustworthiness = detail::stage(
        "trustworthiness", [&] { return metrics::trustworthiness(x, core.coords, cfg.trust_k); });
    detail::stage("intrinsic_dimension", [&] {
        const metrics::IdEstimate raw = metrics::twonn_id(x, cfg.id_subsample, cfg.seed, &warnings);
        const metrics::IdEstimate manifold =
            metrics::twonn_id(core.coords, cfg.id_subsample, cfg.seed, &warnings);
        rep.raw_id = raw.dim;
        rep.manifold_id = manifold.dim;
        rep.id_reduction_pct = metrics::id_reduction(raw.dim, manifold.dim);
    });

    const std::vector<double> t_norm_vec(core.pt.t_norm.data(),
                                         core.pt.t_norm.data() + core.pt.t_norm.size());

    if (cfg.with_null) {
        detail::stage("null", [&] {
            const stats::NullDistribution null =
                stats::label_shuffle_null(t_norm_vec, ranks, cfg.null_reps, cfg.seed);
            rep.null_summary.present = true;
            rep.null_summary.reps = cfg.null_reps;
            rep.null_summary.mean = null.mean;
            rep.null_summary.p2_5 = null.p2_5;
            rep.null_summary.p97_5 = null.p97_5;
        });
    }

    if (cfg.with_permutation) {
        detail::stage("permutation", [&] {
            stats::PermutationReport perm =
                stats::ordering_permutation_test(t_norm_vec, ranks, set.spec.classes);
            rep.permutation.present = true;
            rep.permutation.n_orderings = perm.orderings.size();
            rep.permutation.true_tau = perm.true_tau;
            rep.permutation.true_rank = perm.true_rank;
            rep.permutation.null_median = perm.null_median;
            rep.permutation.true_ordering = perm.orderings.front().ordering;
            std::size_t best = 0;
            for (std::size_t i = 1; i < perm.orderings.size(); ++i) {
                if (perm.orderings[i].tau > perm.orderings[best].tau) {
                    best = i;
                }
            }
            rep.permutation.best_ordering = perm.orderings[best].ordering;
            rep.permutation.orderings = std::move(perm.orderings);
        });
    }

    if (cfg.with_bootstrap) {
        detail::stage("bootstrap", [&] {
            const Matrix gram = graph::cosine_gram(x);
            const auto tau_of = [&](const sampling::IndexSample& s) -> double {
                std::vector<std::size_t> pos(s.indices.size());
                for (std::size_t i = 0; i < s.indices.size(); ++i) {
                    const auto it = std::lower_bound(sample.indices.begin(),
                                                     sample.indices.end(), s.indices[i]);
                    pos[i] = static_cast<std::size_t>(it - sample.indices.begin());
                }
                const Matrix xs = detail::gather_rows(set.embeddings, s.indices);
                const std::vector<int> rs = detail::gather_ints(set.class_ranks, s.indices);
                return run_core(cfg, xs, rs, nullptr, &gram, &pos).tau;
            };
            const stats::BootstrapReport boot =
                stats::bootstrap_ci(tau_of, sample, set.class_ranks, set.n_classes(),
                                    cfg.bootstrap_iters, cfg.seed, &warnings);
            rep.bootstrap.present = true;
            rep.bootstrap.iterations = boot.iterations;
            rep.bootstrap.failures = boot.failures;
            rep.bootstrap.point_estimate = boot.point_estimate;
            rep.bootstrap.ci_low = boot.ci_low;
            rep.bootstrap.ci_high = boot.ci_high;
            rep.bootstrap.taus = boot.taus;
        });
    }

    rep.provenance = provenance_json(cfg);
    rep.warnings = warnings;

    out.sample = sample;
    out.t_raw = core.pt.t_raw;
    out.t_norm = core.pt.t_norm;
    out.transition = std::move(core.transition);
    return out;
}

// ---------------------------------------------------------------------------
// Sidecar writers.

inline void write_pseudotime_csv(const std::string& path, const ingest::EmbeddingSet& set,
                                 const sampling::IndexSample& sample, const Vector& t_raw,
                                 const Vector& t_norm) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << std::setprecision(17);
    out << "patch_id,t_raw,t_norm,class_label\n";
    for (std::size_t i = 0; i < sample.indices.size(); ++i) {
        const ingest::PatchRecord& rec = set.records[sample.indices[i]];
        out << ingest::detail::csv_escape(rec.patch_id) << ','
            << t_raw[static_cast<Eigen::Index>(i)] << ',' << t_norm[static_cast<Eigen::Index>(i)]
            << ',' << ingest::detail::csv_escape(rec.class_label) << '\n';
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

/// Transition matrix entries in coordinate form, row-major order.
inline void write_transition_csv(const std::string& path, const graph::TransitionMatrix& tm) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << std::setprecision(17);
    out << "row,col,value\n";
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            out << it.row() << ',' << it.col() << ',' << it.value() << '\n';
        }
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

inline ingest::EmbeddingSet load_input_set(const RunConfig& cfg) {
    return detail::stage("ingest", [&] {
        return ingest::load_set(cfg.embeddings_path, cfg.manifest_path, cfg.spec_path);
    });
}

/// Load, analyze, and write the report JSON plus sidecars.
inline FidelityReport run_fidelity(const RunConfig& cfg) {
    const ingest::EmbeddingSet set = load_input_set(cfg);
    FidelityOutcome outcome = analyze(cfg, set);

    if (!cfg.out_path.empty()) {
        const std::string stem = detail::strip_json_suffix(cfg.out_path);
        outcome.report.pseudotime_csv = stem + ".pseudotime.csv";
        detail::stage("report", [&] {
            write_pseudotime_csv(outcome.report.pseudotime_csv, set, outcome.sample,
                                 outcome.t_raw, outcome.t_norm);
            detail::save_json(cfg.out_path, report_to_json(outcome.report));
        });
    }
    if (!cfg.dump_transition_path.empty()) {
        detail::stage("report",
                      [&] { write_transition_csv(cfg.dump_transition_path, outcome.transition); });
    }
    return outcome.report;
}

// ---------------------------------------------------------------------------
// Hyperparameter sweep.

struct SweepGrid {
    std::vector<int> ks;
    std::vector<int> alphas;
    std::vector<int> n_dcs;
};

struct SweepPoint {
    int k = 0;
    int alpha = 0;
    int n_dcs = 0;
    bool ok = false;
    std::string error;
    double tau = std::numeric_limits<double>::quiet_NaN();
    double trustworthiness = std::numeric_limits<double>::quiet_NaN();
    double spectral_gap = std::numeric_limits<double>::quiet_NaN();
    double manifold_id = std::numeric_limits<double>::quiet_NaN();
};

struct SweepReport {
    std::string model;
    std::string cohort;
    SampleSummary sample;
    std::vector<SweepPoint> points;
    std::string csv; // sidecar path, empty when not written
    nlohmann::json provenance;
    Warnings warnings;
};

/**
 * One core run per grid point over a single shared sample. A failing point
 * records its error and the sweep continues; dimensions left empty in the
 * grid take the config value.
 */
inline SweepReport analyze_sweep(const RunConfig& cfg, const ingest::EmbeddingSet& set,
                                 const SweepGrid& grid) {
    if (grid.ks.empty() && grid.alphas.empty() && grid.n_dcs.empty()) {
        throw InputError("sweep: empty grid (give at least one of k, alpha, n_dcs values)");
    }
    const std::vector<int> ks = grid.ks.empty() ? std::vector<int>{cfg.k} : grid.ks;
    const std::vector<int> alphas = grid.alphas.empty() ? std::vector<int>{cfg.alpha} : grid.alphas;
    const std::vector<int> n_dcs = grid.n_dcs.empty() ? std::vector<int>{cfg.n_dcs} : grid.n_dcs;

    Warnings warnings;
    sampling::SamplePlan plan;
    plan.per_class_n = cfg.per_class_n;
    plan.per_slide_cap = cfg.per_slide_cap;
    plan.seed = cfg.seed;
    const sampling::IndexSample sample =
        detail::stage("sample", [&] { return sampling::slide_aware_sample(set, plan, &warnings); });
    const Matrix x = detail::gather_rows(set.embeddings, sample.indices);
    const std::vector<int> ranks = detail::gather_ints(set.class_ranks, sample.indices);

    SweepReport rep;
    rep.model = cfg.model_name;
    rep.cohort = set.spec.name;
    rep.sample.n = sample.indices.size();
    rep.sample.classes = set.spec.classes;
    rep.sample.class_counts = sample.class_counts;
    rep.provenance = provenance_json(cfg);

    for (int k : ks) {
        for (int alpha : alphas) {
            for (int ndc : n_dcs) {
                SweepPoint point;
                point.k = k;
                point.alpha = alpha;
                point.n_dcs = ndc;
                RunConfig pcfg = cfg;
                pcfg.k = k;
                pcfg.alpha = alpha;
                pcfg.n_dcs = ndc;
                try {
                    const CoreResult core = run_core(pcfg, x, ranks, nullptr);
                    point.tau = core.tau;
                    point.spectral_gap = core.pt.spectral_gap;
                    point.trustworthiness = metrics::trustworthiness(x, core.coords, cfg.trust_k);
                    point.manifold_id =
                        metrics::twonn_id(core.coords, cfg.id_subsample, cfg.seed, nullptr).dim;
                    point.ok = true;
                } catch (const std::exception& e) {
                    point.error = e.what();
                }
                rep.points.push_back(std::move(point));
            }
        }
    }
    rep.warnings = warnings;
    return rep;
}

inline nlohmann::json sweep_to_json(const SweepReport& r) {
    nlohmann::json j;
    j["schema"] = "traject-sweep-report/v1";
    j["model"] = r.model;
    j["cohort"] = r.cohort;
    j["sample"] = sample_to_json(r.sample);
    j["points"] = nlohmann::json::array();
    for (const SweepPoint& p : r.points) {
        nlohmann::json pj;
        pj["k"] = p.k;
        pj["alpha"] = p.alpha;
        pj["n_dcs"] = p.n_dcs;
        pj["ok"] = p.ok;
        if (p.ok) {
            pj["error"] = nullptr;
            pj["tau"] = p.tau;
            pj["trustworthiness"] = p.trustworthiness;
            if (std::isnan(p.spectral_gap)) {
                pj["spectral_gap"] = nullptr;
            } else {
                pj["spectral_gap"] = p.spectral_gap;
            }
            pj["manifold_id"] = p.manifold_id;
        } else {
            pj["error"] = p.error;
            pj["tau"] = nullptr;
            pj["trustworthiness"] = nullptr;
            pj["spectral_gap"] = nullptr;
            pj["manifold_id"] = nullptr;
        }
        j["points"].push_back(std::move(pj));
    }
    if (r.csv.empty()) {
        j["csv"] = nullptr;
    } else {
        j["csv"] = r.csv;
    }
    j["provenance"] = r.provenance;
    j["warnings"] = r.warnings;
    return j;
}

inline void write_sweep_csv(const std::string& path, const SweepReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << std::setprecision(17);
    out << "k,alpha,n_dcs,tau,trustworthiness,spectral_gap,manifold_id,error\n";
    for (const SweepPoint& p : rep.points) {
        out << p.k << ',' << p.alpha << ',' << p.n_dcs << ',';
        if (p.ok) {
            out << p.tau << ',' << p.trustworthiness << ',' << p.spectral_gap << ','
                << p.manifold_id << ',';
        } else {
            out << ",,,,";
        }
        out << ingest::detail::csv_escape(p.error) << '\n';
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

inline SweepReport run_sweep(const RunConfig& cfg, const SweepGrid& grid) {
    const ingest::EmbeddingSet set = load_input_set(cfg);
    SweepReport rep = analyze_sweep(cfg, set, grid);
    if (!cfg.out_path.empty()) {
        const std::string stem = detail::strip_json_suffix(cfg.out_path);
        rep.csv = stem + ".sweep.csv";
        detail::stage("report", [&] {
            write_sweep_csv(rep.csv, rep);
            detail::save_json(cfg.out_path, sweep_to_json(rep));
        });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Depth emergence: the same pipeline over per-layer embedding files.

struct LayerSpec {
    double depth = 0.0; // relative depth in [0, 1]
    std::string embeddings_path;
};

struct EmergenceLayer {
    double depth = 0.0;
    std::string embeddings_path;
    double tau = 0.0;
    double raw_id = 0.0;
    double manifold_id = 0.0;
};

struct EmergenceReport {
    std::string model;
    std::string cohort;
    SampleSummary sample;
    std::vector<EmergenceLayer> layers; // ascending depth
    std::string csv;
    nlohmann::json provenance;
    Warnings warnings;
};

inline EmergenceReport analyze_emergence(const RunConfig& cfg, std::vector<LayerSpec> layers) {
    if (layers.empty()) {
        throw InputError("emergence: no layers given");
    }
    for (const LayerSpec& l : layers) {
        if (!(l.depth >= 0.0 && l.depth <= 1.0)) {
            throw InputError("emergence: depth " + std::to_string(l.depth) +
                             " is outside [0, 1] (" + l.embeddings_path + ")");
        }
    }
    std::stable_sort(layers.begin(), layers.end(),
                     [](const LayerSpec& a, const LayerSpec& b) { return a.depth < b.depth; });

    const std::vector<ingest::PatchRecord> records = detail::stage(
        "ingest", [&] { return ingest::load_manifest(cfg.manifest_path); });
    const ingest::ProgressionSpec spec = detail::stage(
        "ingest", [&] { return ingest::load_progression_spec(cfg.spec_path); });

    EmergenceReport rep;
    rep.model = cfg.model_name;
    rep.cohort = spec.name;
    rep.provenance = provenance_json(cfg);

    Warnings warnings;
    for (const LayerSpec& layer : layers) {
        const ingest::EmbeddingSet set = detail::stage("ingest", [&] {
            Matrix x = ingest::load_embeddings(layer.embeddings_path);
            if (static_cast<std::size_t>(x.rows()) != records.size()) {
                throw InputError("layer at depth " + std::to_string(layer.depth) + " (" +
                                 layer.embeddings_path + ") has " + std::to_string(x.rows()) +
                                 " rows but the shared manifest has " +
                                 std::to_string(records.size()));
            }
            return ingest::bind(std::move(x), records, spec);
        });

        sampling::SamplePlan plan;
        plan.per_class_n = cfg.per_class_n;
        plan.per_slide_cap = cfg.per_slide_cap;
        plan.seed = cfg.seed;
        const sampling::IndexSample sample = detail::stage(
            "sample", [&] { return sampling::slide_aware_sample(set, plan, &warnings); });
        const Matrix x = detail::gather_rows(set.embeddings, sample.indices);
        const std::vector<int> ranks = detail::gather_ints(set.class_ranks, sample.indices);

        const CoreResult core = run_core(cfg, x, ranks, &warnings);

        EmergenceLayer out;
        out.depth = layer.depth;
        out.embeddings_path = layer.embeddings_path;
        out.tau = core.tau;
        detail::stage("intrinsic_dimension", [&] {
            out.raw_id = metrics::twonn_id(x, cfg.id_subsample, cfg.seed, &warnings).dim;
            out.manifold_id =
                metrics::twonn_id(core.coords, cfg.id_subsample, cfg.seed, &warnings).dim;
        });
        rep.layers.push_back(std::move(out));

        if (rep.sample.n == 0) {
            rep.sample.n = sample.indices.size();
            rep.sample.classes = set.spec.classes;
            rep.sample.class_counts = sample.class_counts;
        }
    }
    rep.warnings = warnings;
    return rep;
}

inline nlohmann::json emergence_to_json(const EmergenceReport& r) {
    nlohmann::json j;
    j["schema"] = "traject-emergence-report/v1";
    j["model"] = r.model;
    j["cohort"] = r.cohort;
    j["sample"] = sample_to_json(r.sample);
    j["layers"] = nlohmann::json::array();
    for (const EmergenceLayer& l : r.layers) {
        j["layers"].push_back({{"depth", l.depth},
                               {"embeddings", l.embeddings_path},
                               {"tau", l.tau},
                               {"raw_id", l.raw_id},
                               {"manifold_id", l.manifold_id}});
    }
    if (r.csv.empty()) {
        j["csv"] = nullptr;
    } else {
        j["csv"] = r.csv;
    }
    j["provenance"] = r.provenance;
    j["warnings"] = r.warnings;
    return j;
}

inline void write_emergence_csv(const std::string& path, const EmergenceReport& rep) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw InputError(path + ": cannot open for writing");
    }
    out << std::setprecision(17);
    out << "depth,tau,raw_id,manifold_id\n";
    for (const EmergenceLayer& l : rep.layers) {
        out << l.depth << ',' << l.tau << ',' << l.raw_id << ',' << l.manifold_id << '\n';
    }
    if (!out) {
        throw InputError(path + ": write failed");
    }
}

inline EmergenceReport run_emergence(const RunConfig& cfg, std::vector<LayerSpec> layers) {
    EmergenceReport rep = analyze_emergence(cfg, std::move(layers));
    if (!cfg.out_path.empty()) {
        const std::string stem = detail::strip_json_suffix(cfg.out_path);
        rep.csv = stem + ".emergence.csv";
        detail::stage("report", [&] {
            write_emergence_csv(rep.csv, rep);
            detail::save_json(cfg.out_path, emergence_to_json(rep));
        });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Few-shot probe runs.

struct ProbeReport {
    std::string model;
    std::string cohort;
    SampleSummary sample;
    std::size_t shots = 0;
    std::size_t trials = 0;
    double l2_strength = 0.0;
    probe::ProbeResult result;
    nlohmann::json provenance;
    Warnings warnings;
};

inline ProbeReport analyze_probe(const RunConfig& cfg, const ingest::EmbeddingSet& set,
                                 const probe::FewShotConfig& pcfg) {
    Warnings warnings;
    sampling::SamplePlan plan;
    plan.per_class_n = cfg.per_class_n;
    plan.per_slide_cap = cfg.per_slide_cap;
    plan.seed = cfg.seed;
    const sampling::IndexSample sample =
        detail::stage("sample", [&] { return sampling::slide_aware_sample(set, plan, &warnings); });
    const Matrix x = detail::gather_rows(set.embeddings, sample.indices);
    const std::vector<int> labels = detail::gather_ints(set.class_ranks, sample.indices);

    ProbeReport rep;
    rep.model = cfg.model_name;
    rep.cohort = set.spec.name;
    rep.sample.n = sample.indices.size();
    rep.sample.classes = set.spec.classes;
    rep.sample.class_counts = sample.class_counts;
    rep.shots = pcfg.shots;
    rep.trials = pcfg.trials;
    rep.l2_strength = pcfg.l2_strength;
    rep.result = detail::stage(
        "probe", [&] { return probe::run_few_shot(x, labels, set.n_classes(), pcfg); });
    rep.provenance = provenance_json(cfg);
    rep.warnings = warnings;
    return rep;
}

inline nlohmann::json probe_to_json(const ProbeReport& r) {
    nlohmann::json j;
    j["schema"] = "traject-probe-report/v1";
    j["model"] = r.model;
    j["cohort"] = r.cohort;
    j["sample"] = sample_to_json(r.sample);
    j["shots"] = r.shots;
    j["trials"] = r.trials;
    j["l2_strength"] = r.l2_strength;
    j["mean_f1"] = r.result.mean_f1;
    j["per_trial_f1"] = r.result.per_trial_f1;
    j["per_class_f1"] = r.result.per_class_f1;
    j["provenance"] = r.provenance;
    j["warnings"] = r.warnings;
    return j;
}

inline ProbeReport run_probe(const RunConfig& cfg, const probe::FewShotConfig& pcfg) {
    const ingest::EmbeddingSet set = load_input_set(cfg);
    ProbeReport rep = analyze_probe(cfg, set, pcfg);
    if (!cfg.out_path.empty()) {
        detail::stage("report", [&] { detail::save_json(cfg.out_path, probe_to_json(rep)); });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Intrinsic dimension of a raw embedding file.

struct IdReport {
    std::string embeddings_path;
    std::size_t n_rows = 0;
    std::size_t subsample = 0;
    std::uint64_t seed = 0;
    metrics::IdEstimate estimate;
    Warnings warnings;
};

inline nlohmann::json id_to_json(const IdReport& r) {
    nlohmann::json j;
    j["schema"] = "traject-id-report/v1";
    j["embeddings"] = r.embeddings_path;
    j["n_rows"] = r.n_rows;
    j["subsample"] = r.subsample;
    j["seed"] = r.seed;
    j["dim"] = r.estimate.dim;
    j["n_used"] = r.estimate.n_used;
    j["discard_fraction"] = r.estimate.discard_fraction;
    j["version"] = kVersion;
    j["warnings"] = r.warnings;
    return j;
}

inline IdReport run_id(const std::string& embeddings_path, std::size_t subsample,
                       std::uint64_t seed, const std::string& out_path) {
    IdReport rep;
    rep.embeddings_path = embeddings_path;
    rep.subsample = subsample;
    rep.seed = seed;
    const Matrix x =
        detail::stage("ingest", [&] { return ingest::load_embeddings(embeddings_path); });
    rep.n_rows = static_cast<std::size_t>(x.rows());
    rep.estimate = detail::stage(
        "intrinsic_dimension", [&] { return metrics::twonn_id(x, subsample, seed, &rep.warnings); });
    if (!out_path.empty()) {
        detail::stage("report", [&] { detail::save_json(out_path, id_to_json(rep)); });
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Cross-model tables and correlation protocols.

inline nlohmann::json table_to_json(const probe::MetricTable& t) {
    nlohmann::json j;
    j["schema"] = "traject-table/v1";
    j["models"] = t.models;
    j["cohorts"] = t.cohorts;
    auto matrix_json = [&](const Matrix& m) {
        nlohmann::json rows = nlohmann::json::array();
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (Eigen::Index c = 0; c < m.cols(); ++c) {
                // Missing cells are NaN in memory and null on disk.
                if (std::isnan(m(i, c))) {
                    row.push_back(nullptr);
                } else {
                    row.push_back(m(i, c));
                }
            }
            rows.push_back(std::move(row));
        }
        return rows;
    };
    j["tau"] = matrix_json(t.tau);
    j["f1"] = matrix_json(t.f1);
    return j;
}

inline probe::MetricTable table_from_json(const nlohmann::json& j, const std::string& context) {
    probe::MetricTable t;
    try {
        t.models = j.at("models").get<std::vector<std::string>>();
        t.cohorts = j.at("cohorts").get<std::vector<std::string>>();
        const auto read_matrix = [&](const char* key) {
            Matrix m(static_cast<Eigen::Index>(t.models.size()),
                     static_cast<Eigen::Index>(t.cohorts.size()));
            const nlohmann::json& rows = j.at(key);
            if (rows.size() != t.models.size()) {
                throw InputError(context + ": " + key + " has " + std::to_string(rows.size()) +
                                 " rows, expected " + std::to_string(t.models.size()));
            }
            for (std::size_t i = 0; i < t.models.size(); ++i) {
                const nlohmann::json& row = rows[i];
                if (row.size() != t.cohorts.size()) {
                    throw InputError(context + ": " + key + " row " + std::to_string(i) +
                                     " has " + std::to_string(row.size()) + " cells, expected " +
                                     std::to_string(t.cohorts.size()));
                }
                for (std::size_t c = 0; c < t.cohorts.size(); ++c) {
                    m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
                        row[c].is_null() ? std::numeric_limits<double>::quiet_NaN()
                                         : row[c].get<double>();
                }
            }
            return m;
        };
        t.tau = read_matrix("tau");
        t.f1 = read_matrix("f1");
    } catch (const nlohmann::json::exception& e) {
        throw InputError(context + ": malformed table: " + e.what());
    }
    return t;
}

/// Collects (model, cohort) metric cells from report files into one table.
class TableBuilder {
public:
    void add_tau(const std::string& model, const std::string& cohort, double value,
                 const std::string& source) {
        add(tau_, model, cohort, value, source, "tau");
    }
    void add_f1(const std::string& model, const std::string& cohort, double value,
                const std::string& source) {
        add(f1_, model, cohort, value, source, "F1");
    }

    probe::MetricTable finalize() const {
        probe::MetricTable t;
        t.models = models_;
        t.cohorts = cohorts_;
        const auto nan = std::numeric_limits<double>::quiet_NaN();
        t.tau = Matrix::Constant(static_cast<Eigen::Index>(models_.size()),
                                 static_cast<Eigen::Index>(cohorts_.size()), nan);
        t.f1 = Matrix::Constant(static_cast<Eigen::Index>(models_.size()),
                                static_cast<Eigen::Index>(cohorts_.size()), nan);
        for (const auto& [cell, value] : tau_) {
            t.tau(static_cast<Eigen::Index>(cell.first), static_cast<Eigen::Index>(cell.second)) =
                value;
        }
        for (const auto& [cell, value] : f1_) {
            t.f1(static_cast<Eigen::Index>(cell.first), static_cast<Eigen::Index>(cell.second)) =
                value;
        }
        return t;
    }

private:
    std::size_t index_of(std::vector<std::string>& names, const std::string& name) {
        for (std::size_t i = 0; i < names.size(); ++i) {
            if (names[i] == name) {
                return i;
            }
        }
        names.push_back(name);
        return names.size() - 1;
    }

    void add(std::map<std::pair<std::size_t, std::size_t>, double>& cells,
             const std::string& model, const std::string& cohort, double value,
             const std::string& source, const char* what) {
        const std::pair<std::size_t, std::size_t> cell{index_of(models_, model),
                                                       index_of(cohorts_, cohort)};
        if (!cells.emplace(cell, value).second) {
            throw InputError(source + ": duplicate " + what + " cell for model '" + model +
                             "', cohort '" + cohort + "'");
        }
    }

    std::vector<std::string> models_;
    std::vector<std::string> cohorts_;
    std::map<std::pair<std::size_t, std::size_t>, double> tau_;
    std::map<std::pair<std::size_t, std::size_t>, double> f1_;
};

/**
 * Merge one report file into the builder. Fidelity reports contribute a tau
 * cell, probe reports an F1 cell, and table files all their non-null cells.
 */
inline void merge_report_file(TableBuilder& builder, const std::string& path) {
    const nlohmann::json j = detail::load_json(path);
    const std::string schema = j.value("schema", "");
    try {
        if (schema == "traject-fidelity-report/v1") {
            builder.add_tau(j.at("model").get<std::string>(), j.at("cohort").get<std::string>(),
                            j.at("tau").get<double>(), path);
        } else if (schema == "traject-probe-report/v1") {
            builder.add_f1(j.at("model").get<std::string>(), j.at("cohort").get<std::string>(),
                           j.at("mean_f1").get<double>(), path);
        } else if (schema == "traject-table/v1") {
            const probe::MetricTable t = table_from_json(j, path);
            for (std::size_t i = 0; i < t.models.size(); ++i) {
                for (std::size_t c = 0; c < t.cohorts.size(); ++c) {
                    const double tau = t.tau(static_cast<Eigen::Index>(i),
                                             static_cast<Eigen::Index>(c));
                    const double f1 = t.f1(static_cast<Eigen::Index>(i),
                                           static_cast<Eigen::Index>(c));
                    if (std::isfinite(tau)) {
                        builder.add_tau(t.models[i], t.cohorts[c], tau, path);
                    }
                    if (std::isfinite(f1)) {
                        builder.add_f1(t.models[i], t.cohorts[c], f1, path);
                    }
                }
            }
        } else {
            throw InputError(path + ": unsupported report schema '" + schema + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ": malformed report: " + e.what());
    }
}

inline probe::MetricTable build_table(const std::vector<std::string>& paths) {
    if (paths.empty()) {
        throw InputError("no input report files given");
    }
    TableBuilder builder;
    for (const std::string& p : paths) {
        merge_report_file(builder, p);
    }
    return builder.finalize();
}

inline probe::MetricTable run_compare(const std::vector<std::string>& paths,
                                      const std::string& out_path) {
    const probe::MetricTable t = detail::stage("compare", [&] { return build_table(paths); });
    if (!out_path.empty()) {
        detail::stage("report", [&] { detail::save_json(out_path, table_to_json(t)); });
    }
    return t;
}

enum class Protocol { within, loo, loo_f1 };

inline nlohmann::json correlation_to_json(const probe::CorrelationReport& r,
                                          const probe::MetricTable& table) {
    nlohmann::json j;
    j["schema"] = "traject-correlation-report/v1";
    j["protocol"] = r.protocol;
    j["targets"] = r.targets;
    j["rho"] = r.rho;
    j["mean_rho"] = r.mean_rho;
    j["table"] = table_to_json(table);
    j["version"] = kVersion;
    return j;
}

inline probe::CorrelationReport run_correlate(const std::vector<std::string>& paths,
                                              Protocol protocol, const std::string& out_path) {
    const probe::MetricTable table =
        detail::stage("compare", [&] { return build_table(paths); });
    const probe::CorrelationReport rep = detail::stage("correlate", [&] {
        switch (protocol) {
        case Protocol::within:
            return probe::within_disease_correlation(table);
        case Protocol::loo:
            return probe::leave_one_out_correlation(table, false);
        default:
            return probe::leave_one_out_correlation(table, true);
        }
    });
    if (!out_path.empty()) {
        detail::stage("report",
                      [&] { detail::save_json(out_path, correlation_to_json(rep, table)); });
    }
    return rep;
}

} // namespace pipeline
} // namespace traject

#endif
