#ifndef TRAJECT_PROBE_HPP
#define TRAJECT_PROBE_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "metrics.hpp"
#include "rng.hpp"

/**
 * @file probe.hpp
 * @brief Few-shot multinomial logistic-regression probes and the
 *        tau-versus-F1 correlation protocols.
 *
 * Probes are trained full batch with L-BFGS on an L2-regularized
 * cross-entropy objective (bias unpenalized, inverse-strength convention)
 * from features z-scored with training statistics only.
 */

namespace traject {
namespace probe {

struct FewShotConfig {
    std::size_t shots = 5;
    std::size_t trials = 10;
    double l2_strength = 1.0; // inverse strength: penalty is |W|^2 / (2 l2)
    std::size_t max_iters = 500;
    double tol = 1e-6; // on the euclidean gradient norm
    std::uint64_t seed = 0;
};

struct Split {
    std::vector<std::size_t> train; // ascending
    std::vector<std::size_t> eval;  // ascending
};

/**
 * Pick `shots` members per class uniformly without replacement; everything
 * else goes to eval. Every class needs more than `shots` members so the
 * eval split covers all classes.
 */
inline Split few_shot_split(const std::vector<int>& labels, std::size_t n_classes,
                            std::size_t shots, const SplitRng& rng) {
    if (shots < 1) {
        throw InputError("few_shot_split: shots must be >= 1");
    }
    std::vector<std::vector<std::size_t>> members(n_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        members[static_cast<std::size_t>(labels[i])].push_back(i);
    }

    Split split;
    std::vector<char> in_train(labels.size(), 0);
    for (std::size_t c = 0; c < n_classes; ++c) {
        if (members[c].size() <= shots) {
            throw InputError("few_shot_split: class " + std::to_string(c) + " has " +
                             std::to_string(members[c].size()) + " members but " +
                             std::to_string(shots) + " shots plus a non-empty eval split "
                             "are required");
        }
        SplitRng class_rng = rng.derive("shots", static_cast<std::uint64_t>(c));
        const std::vector<std::size_t> picks =
            class_rng.sample_without_replacement(members[c].size(), shots);
        for (std::size_t p : picks) {
            in_train[members[c][p]] = 1;
        }
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        (in_train[i] ? split.train : split.eval).push_back(i);
    }
    return split;
}

struct Standardizer {
    Eigen::RowVectorXd mean;
    Eigen::RowVectorXd std_dev; // floored at 1e-8
};

/// Per-dimension mean and population std of the training rows.
inline Standardizer fit_zscore(const Matrix& train) {
    if (train.rows() < 1) {
        throw InputError("fit_zscore: empty training set");
    }
    Standardizer s;
    s.mean = train.colwise().mean();
    Matrix centered = train.rowwise() - s.mean;
    s.std_dev = (centered.array().square().colwise().sum() / double(train.rows()))
                    .sqrt()
                    .matrix();
    s.std_dev = s.std_dev.cwiseMax(1e-8);
    return s;
}

inline Matrix apply_zscore(const Standardizer& s, const Matrix& x) {
    Matrix out = x.rowwise() - s.mean;
    out.array().rowwise() /= s.std_dev.array();
    return out;
}

/**
 * Loss and gradient of the probe objective at theta (C rows, d+1 columns,
 * bias last). Cross-entropy is summed over rows of x; the penalty
 * |W|^2 / (2 l2) excludes the bias column.
 */
inline double loss_and_gradient(const Matrix& x, const std::vector<int>& y, std::size_t n_classes,
                                double l2, const Eigen::VectorXd& theta, Eigen::VectorXd* grad) {
    const Eigen::Index n = x.rows();
    const Eigen::Index d = x.cols();
    const Eigen::Index c = static_cast<Eigen::Index>(n_classes);
    Eigen::Map<const Matrix> t(theta.data(), c, d + 1);

    Matrix logits = x * t.leftCols(d).transpose();
    logits.rowwise() += t.col(d).transpose();

    double loss = 0.0;
    Matrix resid(n, c); // softmax probabilities minus one-hot labels
    for (Eigen::Index i = 0; i < n; ++i) {
        const double m = logits.row(i).maxCoeff();
        Eigen::RowVectorXd e = (logits.row(i).array() - m).exp();
        const double z = e.sum();
        loss += std::log(z) + m - logits(i, y[static_cast<std::size_t>(i)]);
        resid.row(i) = e / z;
        resid(i, y[static_cast<std::size_t>(i)]) -= 1.0;
    }
    loss += t.leftCols(d).squaredNorm() / (2.0 * l2);

    if (grad) {
        grad->resize(theta.size());
        Eigen::Map<Matrix> g(grad->data(), c, d + 1);
        g.leftCols(d) = resid.transpose() * x + t.leftCols(d) / l2;
        g.col(d) = resid.colwise().sum().transpose();
    }
    return loss;
}

struct ProbeModel {
    Matrix theta; // C x (d+1), bias in the last column, biases mean-centered
    double final_loss = 0.0;
    double grad_norm = 0.0;
    std::size_t iters = 0;
};

/**
 * Full-batch L-BFGS (memory 10) with Armijo backtracking, run until the
 * gradient norm drops to cfg.tol or an accepted step changes neither the
 * loss nor the curvature state, which marks the resolution floor of double
 * precision for this objective. The objective is convex, so the final loss
 * is independent of the starting point; `init` exists to let tests check
 * exactly that. Biases are shifted to mean zero after convergence, which
 * leaves every predicted probability unchanged.
 */
inline ProbeModel train_probe(const Matrix& x, const std::vector<int>& y, std::size_t n_classes,
                              const FewShotConfig& cfg, const Eigen::VectorXd* init = nullptr) {
    if (x.rows() < 1 || static_cast<std::size_t>(x.rows()) != y.size()) {
        throw InputError("train_probe: feature/label shape mismatch");
    }
    if (n_classes < 2) {
        throw InputError("train_probe: need at least 2 classes");
    }
    if (cfg.l2_strength <= 0.0) {
        throw InputError("train_probe: l2 strength must be positive");
    }
    for (int label : y) {
        if (label < 0 || static_cast<std::size_t>(label) >= n_classes) {
            throw InputError("train_probe: label out of range");
        }
    }

    const Eigen::Index d = x.cols();
    const Eigen::Index dim = static_cast<Eigen::Index>(n_classes) * (d + 1);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(dim);
    if (init) {
        if (init->size() != dim) {
            throw InputError("train_probe: init has wrong dimension");
        }
        theta = *init;
    }

    Eigen::VectorXd grad(dim);
    double loss = loss_and_gradient(x, y, n_classes, cfg.l2_strength, theta, &grad);

    std::deque<Eigen::VectorXd> s_hist;
    std::deque<Eigen::VectorXd> y_hist;
    std::deque<double> rho_hist;
    const std::size_t memory = 10;

    std::size_t iter = 0;
    bool at_floor = false;
    for (; iter < cfg.max_iters && grad.norm() > cfg.tol; ++iter) {
        // Two-loop recursion.
        Eigen::VectorXd q = grad;
        std::vector<double> alpha(s_hist.size());
        for (std::size_t h = s_hist.size(); h-- > 0;) {
            alpha[h] = rho_hist[h] * s_hist[h].dot(q);
            q -= alpha[h] * y_hist[h];
        }
        if (!s_hist.empty()) {
            const double gamma =
                s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            q *= gamma;
        }
        for (std::size_t h = 0; h < s_hist.size(); ++h) {
            const double beta = rho_hist[h] * y_hist[h].dot(q);
            q += (alpha[h] - beta) * s_hist[h];
        }
        Eigen::VectorXd dir = -q;

        double slope = grad.dot(dir);
        if (!(slope < 0.0)) {
            // Stale curvature information; fall back to steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -grad;
            slope = -grad.squaredNorm();
        }

        double step = 1.0;
        Eigen::VectorXd theta_next;
        Eigen::VectorXd grad_next(dim);
        double loss_next = loss;
        bool accepted = false;
        while (step > 1e-20) {
            theta_next = theta + step * dir;
            loss_next = loss_and_gradient(x, y, n_classes, cfg.l2_strength, theta_next,
                                          &grad_next);
            if (loss_next <= loss + 1e-4 * step * slope) {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) {
            break; // step collapsed; gradient check below decides pass or fail
        }

        Eigen::VectorXd s_vec = theta_next - theta;
        Eigen::VectorXd y_vec = grad_next - grad;
        const double sy = s_vec.dot(y_vec);
        const bool informative = sy > 1e-12 * s_vec.norm() * y_vec.norm();
        if (informative) {
            s_hist.push_back(std::move(s_vec));
            y_hist.push_back(std::move(y_vec));
            rho_hist.push_back(1.0 / sy);
            if (s_hist.size() > memory) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        at_floor = !(loss_next < loss) && !informative;
        theta = std::move(theta_next);
        grad = std::move(grad_next);
        loss = loss_next;
        if (at_floor) {
            // An accepted step that lowered nothing and carried no curvature:
            // no representable progress is left, so treat the iterate as the
            // optimum even if the gradient norm still sits above cfg.tol.
            ++iter;
            break;
        }
    }

    if (grad.norm() > cfg.tol && !at_floor) {
        throw AnalysisError("train_probe: no convergence after " + std::to_string(iter) +
                            " iterations (gradient norm " + std::to_string(grad.norm()) + ")");
    }

    ProbeModel model;
    model.theta = Eigen::Map<Matrix>(theta.data(), static_cast<Eigen::Index>(n_classes), d + 1);
    // Uniform logit shifts are a flat direction of the objective; pin it.
    model.theta.col(d).array() -= model.theta.col(d).mean();
    model.final_loss = loss_and_gradient(x, y, n_classes, cfg.l2_strength, theta, nullptr);
    model.grad_norm = grad.norm();
    model.iters = iter;
    return model;
}

/// Argmax class per row; ties resolve to the lowest class index.
inline std::vector<int> predict(const ProbeModel& model, const Matrix& x) {
    const Eigen::Index d = x.cols();
    Matrix logits = x * model.theta.leftCols(d).transpose();
    logits.rowwise() += model.theta.col(d).transpose();
    std::vector<int> labels(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        int best = 0;
        for (Eigen::Index c = 1; c < logits.cols(); ++c) {
            if (logits(i, c) > logits(i, best)) {
                best = static_cast<int>(c);
            }
        }
        labels[static_cast<std::size_t>(i)] = best;
    }
    return labels;
}

/// Per-class F1 as 2TP / (2TP + FP + FN); a class with empty denominator
/// (absent from predictions and labels alike) counts as 0.
inline std::vector<double> per_class_f1(const std::vector<int>& predictions,
                                        const std::vector<int>& labels, std::size_t n_classes) {
    if (predictions.size() != labels.size()) {
        throw InputError("per_class_f1: length mismatch");
    }
    std::vector<std::int64_t> tp(n_classes, 0), fp(n_classes, 0), fn(n_classes, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto p = static_cast<std::size_t>(predictions[i]);
        const auto a = static_cast<std::size_t>(labels[i]);
        if (p >= n_classes || a >= n_classes) {
            throw InputError("per_class_f1: label out of range");
        }
        if (p == a) {
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[a];
        }
    }
    std::vector<double> f1(n_classes, 0.0);
    for (std::size_t c = 0; c < n_classes; ++c) {
        const std::int64_t denom = 2 * tp[c] + fp[c] + fn[c];
        f1[c] = denom > 0 ? 2.0 * double(tp[c]) / double(denom) : 0.0;
    }
    return f1;
}

inline double macro_f1(const std::vector<int>& predictions, const std::vector<int>& labels,
                       std::size_t n_classes) {
    const std::vector<double> f1 = per_class_f1(predictions, labels, n_classes);
    return mean_of(f1);
}

struct ProbeResult {
    std::vector<double> per_trial_f1; // macro-F1, one per trial
    double mean_f1 = 0.0;
    std::vector<double> per_class_f1; // averaged over trials
};

/**
 * The few-shot protocol: `trials` independent rounds of split, z-score on
 * the training shots, probe fit, and macro-F1 on the held-out remainder.
 * Trial t draws from the stream (seed, "probe_trial", t).
 */
inline ProbeResult run_few_shot(const Matrix& x, const std::vector<int>& labels,
                                std::size_t n_classes, const FewShotConfig& cfg) {
    if (cfg.trials < 1) {
        throw InputError("run_few_shot: trials must be >= 1");
    }
    const SplitRng root(cfg.seed);

    std::vector<double> trial_f1(cfg.trials, 0.0);
    Matrix class_f1(static_cast<Eigen::Index>(cfg.trials), static_cast<Eigen::Index>(n_classes));
    std::vector<std::string> errors(cfg.trials);
    std::vector<char> failed(cfg.trials, 0);

    const int nthreads = threads::count();
#pragma omp parallel for schedule(dynamic) num_threads(nthreads)
    for (std::int64_t t = 0; t < static_cast<std::int64_t>(cfg.trials); ++t) {
        const auto ti = static_cast<std::size_t>(t);
        try {
            const SplitRng rng = root.derive("probe_trial", static_cast<std::uint64_t>(t));
            const Split split = few_shot_split(labels, n_classes, cfg.shots, rng);

            Matrix train_x(static_cast<Eigen::Index>(split.train.size()), x.cols());
            std::vector<int> train_y(split.train.size());
            for (std::size_t i = 0; i < split.train.size(); ++i) {
                train_x.row(static_cast<Eigen::Index>(i)) =
                    x.row(static_cast<Eigen::Index>(split.train[i]));
                train_y[i] = labels[split.train[i]];
            }
            Matrix eval_x(static_cast<Eigen::Index>(split.eval.size()), x.cols());
            std::vector<int> eval_y(split.eval.size());
            for (std::size_t i = 0; i < split.eval.size(); ++i) {
                eval_x.row(static_cast<Eigen::Index>(i)) =
                    x.row(static_cast<Eigen::Index>(split.eval[i]));
                eval_y[i] = labels[split.eval[i]];
            }

            const Standardizer stats = fit_zscore(train_x);
            const ProbeModel model =
                train_probe(apply_zscore(stats, train_x), train_y, n_classes, cfg);
            const std::vector<int> predicted = predict(model, apply_zscore(stats, eval_x));

            trial_f1[ti] = macro_f1(predicted, eval_y, n_classes);
            const std::vector<double> f1 = per_class_f1(predicted, eval_y, n_classes);
            for (std::size_t c = 0; c < n_classes; ++c) {
                class_f1(static_cast<Eigen::Index>(ti), static_cast<Eigen::Index>(c)) = f1[c];
            }
        } catch (const std::exception& e) {
            failed[ti] = 1;
            errors[ti] = e.what();
        }
    }

    for (std::size_t t = 0; t < cfg.trials; ++t) {
        if (failed[t]) {
            throw AnalysisError("run_few_shot: trial " + std::to_string(t) + " failed: " +
                                errors[t]);
        }
    }

    ProbeResult result;
    result.per_trial_f1 = trial_f1;
    result.mean_f1 = mean_of(trial_f1);
    result.per_class_f1.resize(n_classes);
    for (std::size_t c = 0; c < n_classes; ++c) {
        result.per_class_f1[c] = class_f1.col(static_cast<Eigen::Index>(c)).mean();
    }
    return result;
}

// ---------------------------------------------------------------------------
// Correlation protocols across models and cohorts.

struct MetricTable {
    std::vector<std::string> models;  // row names
    std::vector<std::string> cohorts; // column names
    Matrix tau;                       // models x cohorts; NaN marks a missing cell
    Matrix f1;                        // same shape; NaN marks a missing cell
};

namespace detail {

inline double table_cell(const Matrix& values, const MetricTable& table, std::size_t model,
                         std::size_t cohort, const char* what) {
    const double v = values(static_cast<Eigen::Index>(model), static_cast<Eigen::Index>(cohort));
    if (!std::isfinite(v)) {
        throw InputError(std::string("correlation table is missing ") + what + " for model '" +
                         table.models[model] + "', cohort '" + table.cohorts[cohort] + "'");
    }
    return v;
}

inline void check_table(const MetricTable& table, bool need_f1) {
    if (table.models.size() < 3) {
        throw InputError("correlation protocols need at least 3 models (got " +
                         std::to_string(table.models.size()) + ")");
    }
    if (table.tau.rows() != static_cast<Eigen::Index>(table.models.size()) ||
        table.tau.cols() != static_cast<Eigen::Index>(table.cohorts.size())) {
        throw InputError("correlation table shape does not match its model/cohort names");
    }
    if (need_f1 && (table.f1.rows() != table.tau.rows() || table.f1.cols() != table.tau.cols())) {
        throw InputError("correlation table has no F1 values");
    }
}

} // namespace detail

struct CorrelationReport {
    std::string protocol; // within_disease, leave_one_out, reference_f1
    std::vector<std::string> targets;
    std::vector<double> rho; // one per target cohort
    double mean_rho = 0.0;
};

/// Spearman rho between tau and few-shot F1 across models, per cohort.
inline CorrelationReport within_disease_correlation(const MetricTable& table) {
    detail::check_table(table, true);
    if (table.cohorts.empty()) {
        throw InputError("within_disease_correlation: no cohorts");
    }

    CorrelationReport report;
    report.protocol = "within_disease";
    const std::size_t m = table.models.size();
    for (std::size_t j = 0; j < table.cohorts.size(); ++j) {
        std::vector<double> taus(m), f1s(m);
        for (std::size_t i = 0; i < m; ++i) {
            taus[i] = detail::table_cell(table.tau, table, i, j, "tau");
            f1s[i] = detail::table_cell(table.f1, table, i, j, "F1");
        }
        report.targets.push_back(table.cohorts[j]);
        report.rho.push_back(metrics::spearman_rho(taus, f1s));
    }
    report.mean_rho = mean_of(report.rho);
    return report;
}

/**
 * Hold each cohort out in turn: rank models by their mean reference metric
 * over the remaining cohorts (tau by default, F1 when `reference_f1`), then
 * correlate that ranking with few-shot F1 on the held-out cohort.
 */
inline CorrelationReport leave_one_out_correlation(const MetricTable& table, bool reference_f1) {
    detail::check_table(table, true);
    if (table.cohorts.size() < 3) {
        throw InputError("leave_one_out_correlation: need at least 3 cohorts so every "
                         "target keeps 2 references (got " +
                         std::to_string(table.cohorts.size()) + ")");
    }

    const Matrix& reference = reference_f1 ? table.f1 : table.tau;
    const char* ref_name = reference_f1 ? "F1" : "tau";

    CorrelationReport report;
    report.protocol = reference_f1 ? "reference_f1" : "leave_one_out";
    const std::size_t m = table.models.size();
    for (std::size_t target = 0; target < table.cohorts.size(); ++target) {
        std::vector<double> ref(m, 0.0), held(m);
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < table.cohorts.size(); ++j) {
                if (j != target) {
                    ref[i] += detail::table_cell(reference, table, i, j, ref_name);
                }
            }
            ref[i] /= double(table.cohorts.size() - 1);
            held[i] = detail::table_cell(table.f1, table, i, target, "F1");
        }
        report.targets.push_back(table.cohorts[target]);
        report.rho.push_back(metrics::spearman_rho(ref, held));
    }
    report.mean_rho = mean_of(report.rho);
    return report;
}

/// Midranks of one cohort's tau column, 1 = highest tau, ties averaged.
inline std::vector<double> model_rank_vector(const MetricTable& table, std::size_t cohort) {
    detail::check_table(table, false);
    std::vector<double> negated(table.models.size());
    for (std::size_t i = 0; i < table.models.size(); ++i) {
        negated[i] = -detail::table_cell(table.tau, table, i, cohort, "tau");
    }
    return metrics::midranks(negated);
}

} // namespace probe
} // namespace traject

#endif
