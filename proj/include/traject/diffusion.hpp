#ifndef TRAJECT_DIFFUSION_HPP
#define TRAJECT_DIFFUSION_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/Sparse>

#include "common.hpp"
#include "graph.hpp"
#include "rng.hpp"

/**
 * @file diffusion.hpp
 * @brief Diffusion pseudotime over a transition matrix.
 *
 * The accumulated transition operator M = sum_t Ttilde^t (Ttilde is the
 * transition matrix with its stationary component removed) has the closed
 * form (I - Ttilde)^{-1} - I. Its action is approximated spectrally from the
 * top eigenpairs, and the diffusion pseudotime distance between two points
 * is the Euclidean distance between their rows of that approximation:
 *
 *   dpt(i,j)^2 = sum_l w(lambda_l)^2 * (phi_l(i) - phi_l(j))^2
 *
 * with per-component weights w. Two weightings are supported: "paper"
 * weights 1/(1-lambda) and "classic" weights lambda/(1-lambda); see
 * DptWeights. Eigenpairs are computed on the symmetric conjugate
 * S = D^{-1/2} K D^{-1/2} (D = kernel row sums), whose orthonormal basis
 * makes the spectral form of M exact when all components are retained.
 *
 * Pseudotime is the dpt distance from a root point, by default the medoid
 * of the earliest progression class.
 */

namespace traject {
namespace diffusion {

/// Per-component weight applied to eigenvector l:
///  - paper: 1/(1-lambda_l), the form stated alongside the spectral
///    approximation of M;
///  - classic: lambda_l/(1-lambda_l), the expansion of (I-Ttilde)^{-1} - I.
enum class DptWeights { paper, classic };

inline const char* dpt_weights_name(DptWeights w) {
    return w == DptWeights::paper ? "paper" : "classic";
}

struct DecomposeOptions {
    int n_dc = 10;           // retained non-stationary components
    int dense_cutoff = 512;  // use the dense solver at or below this size
    bool force_dense = false;
    double lanczos_tol = 1e-10;
};

struct DiffusionDecomposition {
    Vector eigenvalues;   // ordered by decreasing |lambda|
    Matrix eigenvectors;  // n x m; orthonormal in the metric that makes T symmetric
    Vector stationary;    // removed lambda = 1 eigenvector (unit norm)
    double max_residual = 0.0;
    bool symmetric_basis = true; // false under the literal non-symmetrized mode
};

namespace detail {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

inline void sparse_matvec(const SpMat& s, const double* x, double* y) {
    const Eigen::Index n = s.rows();
    const auto* outer = s.outerIndexPtr();
    const auto* inner = s.innerIndexPtr();
    const double* vals = s.valuePtr();
    const int nthreads = threads::count();
#pragma omp parallel for schedule(static) num_threads(nthreads)
    for (Eigen::Index i = 0; i < n; ++i) {
        double acc = 0.0;
        for (auto p = outer[i]; p < outer[i + 1]; ++p) {
            acc += vals[p] * x[inner[p]];
        }
        y[i] = acc;
    }
}

// Flips each column so its largest-magnitude entry is positive.
inline void canonicalize_signs(Matrix& vecs) {
    for (Eigen::Index c = 0; c < vecs.cols(); ++c) {
        Eigen::Index arg = 0;
        double best = -1.0;
        for (Eigen::Index r = 0; r < vecs.rows(); ++r) {
            const double a = std::abs(vecs(r, c));
            if (a > best) {
                best = a;
                arg = r;
            }
        }
        if (vecs(arg, c) < 0.0) {
            vecs.col(c) = -vecs.col(c);
        }
    }
}

// Order eigenpair slots by decreasing |lambda|; ties by decreasing lambda,
// then by original slot for determinism.
inline std::vector<std::size_t> magnitude_order(const Vector& values) {
    std::vector<std::size_t> order(static_cast<std::size_t>(values.size()));
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double ma = std::abs(values[static_cast<Eigen::Index>(a)]);
        const double mb = std::abs(values[static_cast<Eigen::Index>(b)]);
        if (ma != mb) return ma > mb;
        const double va = values[static_cast<Eigen::Index>(a)];
        const double vb = values[static_cast<Eigen::Index>(b)];
        if (va != vb) return va > vb;
        return a < b;
    });
    return order;
}

struct EigenPairs {
    Vector values;
    Matrix vectors;
};

// Dense eigensolve of A = S - phi0 phi0^T restricted to the complement of
// phi0: all eigenpairs, the deflated direction removed by overlap with phi0.
inline EigenPairs dense_deflated(const Matrix& s_dense, const Vector& phi0, int want) {
    const Eigen::Index n = s_dense.rows();
    Matrix a = s_dense;
    a.noalias() -= phi0 * phi0.transpose();
    Eigen::SelfAdjointEigenSolver<Matrix> solver(a);
    if (solver.info() != Eigen::Success) {
        throw AnalysisError("decompose: dense eigensolver failed to converge");
    }

    // The deflated direction shows up as the eigenvector most aligned with
    // phi0; its eigenvalue is ~0 but may be degenerate with legit pairs.
    Eigen::Index deflated = 0;
    double best_overlap = -1.0;
    for (Eigen::Index c = 0; c < n; ++c) {
        const double o = std::abs(solver.eigenvectors().col(c).dot(phi0));
        if (o > best_overlap) {
            best_overlap = o;
            deflated = c;
        }
    }

    Vector all_values(n - 1);
    Matrix all_vectors(n, n - 1);
    Eigen::Index out = 0;
    for (Eigen::Index c = 0; c < n; ++c) {
        if (c == deflated) continue;
        all_values[out] = solver.eigenvalues()[c];
        all_vectors.col(out) = solver.eigenvectors().col(c);
        ++out;
    }

    const std::vector<std::size_t> order = magnitude_order(all_values);
    const int m = std::min<int>(want, static_cast<int>(order.size()));
    EigenPairs res;
    res.values.resize(m);
    res.vectors.resize(n, m);
    for (int i = 0; i < m; ++i) {
        res.values[i] = all_values[static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)])];
        res.vectors.col(i) =
            all_vectors.col(static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)]));
    }
    canonicalize_signs(res.vectors);
    return res;
}

/**
 * Lanczos with full reorthogonalization for the largest-|lambda| eigenpairs
 * of A = S - phi0 phi0^T. The stationary direction phi0 is deflated
 * analytically: the Krylov basis is kept orthogonal to it throughout, so the
 * lambda = 1 pair of S never enters the spectrum seen by the iteration.
 */
inline EigenPairs lanczos_deflated(const SpMat& s, const Vector& phi0, int want, double tol) {
    const Eigen::Index n = s.rows();
    const Eigen::Index max_dim =
        std::min<Eigen::Index>(n - 1, std::max<Eigen::Index>(4 * want + 40, 120));
    if (want > max_dim) {
        throw AnalysisError("decompose: n_dcs too large for the iterative eigensolver at n = " +
                            std::to_string(n));
    }

    Eigen::MatrixXd v(n, max_dim + 1);
    std::vector<double> alpha, beta;
    alpha.reserve(static_cast<std::size_t>(max_dim));
    beta.reserve(static_cast<std::size_t>(max_dim));

    SplitRng rng = SplitRng(0x7261444D414EULL).derive("lanczos_start");
    auto fill_random_orthogonal = [&](Eigen::Index col) {
        for (int attempt = 0; attempt < 16; ++attempt) {
            Vector w(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                w[i] = rng.next_gaussian();
            }
            w -= phi0 * phi0.dot(w);
            for (Eigen::Index c = 0; c < col; ++c) {
                w -= v.col(c) * v.col(c).dot(w);
            }
            const double norm = w.norm();
            if (norm > 1e-8) {
                v.col(col) = w / norm;
                return true;
            }
        }
        return false;
    };
    if (!fill_random_orthogonal(0)) {
        throw AnalysisError("decompose: could not seed the Lanczos iteration");
    }

    Vector w(n);
    EigenPairs res;
    Eigen::VectorXd ritz_values;
    Eigen::MatrixXd ritz_coeff;

    Eigen::Index j = 0;
    for (; j < max_dim; ++j) {
        sparse_matvec(s, v.col(j).data(), w.data());
        // Deflate numerically as well; for exact arithmetic w is already
        // orthogonal to phi0 because v.col(j) is.
        w -= phi0 * phi0.dot(w);

        const double a = v.col(j).dot(w);
        alpha.push_back(a);
        w -= a * v.col(j);
        if (j > 0) {
            w -= beta[static_cast<std::size_t>(j - 1)] * v.col(j - 1);
        }
        // Full reorthogonalization, twice for stability.
        for (int pass = 0; pass < 2; ++pass) {
            w -= phi0 * phi0.dot(w);
            for (Eigen::Index c = 0; c <= j; ++c) {
                w -= v.col(c) * v.col(c).dot(w);
            }
        }

        double b = w.norm();
        if (b < 1e-13) {
            // Invariant subspace exhausted; restart with a fresh direction.
            if (!fill_random_orthogonal(j + 1)) {
                beta.push_back(0.0);
                ++j;
                break;
            }
            b = 0.0;
            beta.push_back(b);
            continue;
        }
        beta.push_back(b);
        v.col(j + 1) = w / b;

        // Convergence test on the tridiagonal Ritz pairs.
        const Eigen::Index dim = j + 1;
        if (dim >= want && (dim % 5 == 0 || dim == max_dim)) {
            Eigen::VectorXd diag(dim), sub(dim - 1);
            for (Eigen::Index i = 0; i < dim; ++i) {
                diag[i] = alpha[static_cast<std::size_t>(i)];
            }
            for (Eigen::Index i = 0; i + 1 < dim; ++i) {
                sub[i] = beta[static_cast<std::size_t>(i)];
            }
            Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri;
            tri.computeFromTridiagonal(diag, sub);
            if (tri.info() != Eigen::Success) {
                continue;
            }
            Vector vals = tri.eigenvalues();
            const std::vector<std::size_t> order = magnitude_order(vals);
            bool ok = static_cast<int>(order.size()) >= want;
            for (int i = 0; ok && i < want; ++i) {
                const auto c = static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)]);
                const double resid = std::abs(b * tri.eigenvectors()(dim - 1, c));
                ok = resid <= tol;
            }
            if (ok) {
                ritz_values = std::move(vals);
                ritz_coeff = tri.eigenvectors();
                j = dim;
                break;
            }
        }
    }

    if (ritz_values.size() == 0) {
        // Final attempt with whatever subspace was built.
        const Eigen::Index dim = j;
        if (dim < want) {
            throw AnalysisError("decompose: Lanczos subspace too small (" + std::to_string(dim) +
                                " of " + std::to_string(want) + " components)");
        }
        Eigen::VectorXd diag(dim), sub(dim - 1);
        for (Eigen::Index i = 0; i < dim; ++i) {
            diag[i] = alpha[static_cast<std::size_t>(i)];
        }
        for (Eigen::Index i = 0; i + 1 < dim; ++i) {
            sub[i] = beta[static_cast<std::size_t>(i)];
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> tri;
        tri.computeFromTridiagonal(diag, sub);
        if (tri.info() != Eigen::Success) {
            throw AnalysisError("decompose: tridiagonal eigensolver failed");
        }
        ritz_values = tri.eigenvalues();
        ritz_coeff = tri.eigenvectors();
    }

    const Eigen::Index dim = ritz_coeff.rows();
    const std::vector<std::size_t> order = magnitude_order(ritz_values);
    EigenPairs out;
    out.values.resize(want);
    out.vectors.resize(n, want);
    for (int i = 0; i < want; ++i) {
        const auto c = static_cast<Eigen::Index>(order[static_cast<std::size_t>(i)]);
        out.values[i] = ritz_values[c];
        out.vectors.col(i).noalias() = v.leftCols(dim) * ritz_coeff.col(c);
        const double norm = out.vectors.col(i).norm();
        if (norm > 0.0) {
            out.vectors.col(i) /= norm;
        }
    }
    canonicalize_signs(out.vectors);
    return out;
}

} // namespace detail

/**
 * Spectral decomposition of the de-stationarized transition operator.
 *
 * Requires a single connected component. Retains min(n_dc, n-1) eigenpairs
 * ordered by decreasing |lambda|; each retained eigenvalue must satisfy
 * lambda < 1 (a second stationary-like component means the removal failed).
 * Residuals ||A v - lambda v||_inf are verified to 1e-8 (1e-6 under the
 * literal non-symmetrized mode, which uses a general dense eigensolver).
 */
inline DiffusionDecomposition decompose(const graph::TransitionMatrix& tm,
                                        const DecomposeOptions& opts = {},
                                        Warnings* warnings = nullptr) {
    const Eigen::Index n = static_cast<Eigen::Index>(tm.n);
    if (n < 2) {
        throw InputError("decompose: need at least 2 points");
    }
    if (tm.components > 1) {
        throw AnalysisError("decompose: transition graph has " + std::to_string(tm.components) +
                            " connected components; diffusion pseudotime assumes a connected "
                            "manifold (increase k or check the data)");
    }
    if (opts.n_dc < 1) {
        throw InputError("decompose: n_dc must be >= 1");
    }
    int want = opts.n_dc;
    if (want > static_cast<int>(n - 1)) {
        warn(warnings, "decompose: n_dc clamped from " + std::to_string(want) + " to " +
                           std::to_string(n - 1) + " (only n-1 non-stationary components exist)");
        want = static_cast<int>(n - 1);
    }

    DiffusionDecomposition dec;

    if (tm.symmetrized) {
        // Symmetric conjugate S = D^{-1/2} K D^{-1/2}; its lambda = 1
        // eigenvector is sqrt(D), known analytically.
        detail::SpMat s = tm.t;
        Vector sqrt_d(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            sqrt_d[i] = std::sqrt(tm.kernel_row_sums[i]);
        }
        for (Eigen::Index i = 0; i < s.outerSize(); ++i) {
            for (detail::SpMat::InnerIterator it(s, i); it; ++it) {
                it.valueRef() *= sqrt_d[i] / sqrt_d[it.col()];
            }
        }
        Vector phi0 = sqrt_d / sqrt_d.norm();

        {
            Vector sp(n);
            detail::sparse_matvec(s, phi0.data(), sp.data());
            const double resid = (sp - phi0).lpNorm<Eigen::Infinity>();
            if (resid > 1e-8) {
                throw AnalysisError(
                    "decompose: stationary residual " + std::to_string(resid) +
                    " exceeds 1e-8; the kernel is not consistent with its row sums");
            }
        }

        detail::EigenPairs pairs;
        if (opts.force_dense || n <= opts.dense_cutoff) {
            pairs = detail::dense_deflated(Matrix(s), phi0, want);
        } else if (want >= static_cast<int>(n) - 2 && n <= 2000) {
            pairs = detail::dense_deflated(Matrix(s), phi0, want);
        } else {
            pairs = detail::lanczos_deflated(s, phi0, want, opts.lanczos_tol);
        }

        // Explicit residuals on A = S - phi0 phi0^T. Columns are copied out
        // because sparse_matvec needs contiguous storage and the eigenvector
        // matrix is row-major.
        Vector av(n);
        Vector vc(n);
        const auto residual_of = [&](const detail::EigenPairs& p) {
            double worst = 0.0;
            for (Eigen::Index c = 0; c < p.vectors.cols(); ++c) {
                vc = p.vectors.col(c);
                detail::sparse_matvec(s, vc.data(), av.data());
                av -= phi0 * phi0.dot(vc);
                const double r = (av - p.values[c] * vc).lpNorm<Eigen::Infinity>();
                worst = std::max(worst, r);
            }
            return worst;
        };
        double max_resid = residual_of(pairs);
        if (max_resid > 1e-8) {
            if (n <= 2000) {
                pairs = detail::dense_deflated(Matrix(s), phi0, want);
                max_resid = residual_of(pairs);
            }
            if (max_resid > 1e-8) {
                throw AnalysisError("decompose: eigenpair residual " + std::to_string(max_resid) +
                                    " exceeds 1e-8");
            }
        }

        dec.eigenvalues = std::move(pairs.values);
        dec.eigenvectors = std::move(pairs.vectors);
        dec.stationary = std::move(phi0);
        dec.max_residual = max_resid;
        dec.symmetric_basis = true;
    } else {
        // Literal mode: general eigensolve of Ttilde = T - psi0 psi0^T with
        // psi0 the (constant) right stationary eigenvector of T. Intended
        // for research-scale comparison runs; the retained spectrum must be
        // real. Tolerances are relaxed to 1e-6.
        if (n > 2000) {
            throw AnalysisError("decompose: the non-symmetrized mode uses a dense general "
                                "eigensolver and is capped at n = 2000 (got n = " +
                                std::to_string(n) + "); use the symmetrized kernel at scale");
        }
        Matrix td = Matrix(tm.t);
        Vector psi0 = Vector::Constant(n, 1.0 / std::sqrt(static_cast<double>(n)));
        td.noalias() -= psi0 * psi0.transpose();

        Eigen::EigenSolver<Eigen::MatrixXd> solver(td);
        if (solver.info() != Eigen::Success) {
            throw AnalysisError("decompose: general eigensolver failed to converge");
        }
        const auto& cvals = solver.eigenvalues();
        // eigenvectors() returns by value; keep the matrix alive while
        // column views into it are used.
        const Eigen::MatrixXcd cvecs = solver.eigenvectors();
        Vector mags(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            mags[i] = std::abs(cvals[i]);
        }
        const std::vector<std::size_t> order = detail::magnitude_order(mags);

        dec.eigenvalues.resize(want);
        dec.eigenvectors.resize(n, want);
        Eigen::Index taken = 0;
        for (std::size_t oi = 0; oi < order.size() && taken < want; ++oi) {
            const auto c = static_cast<Eigen::Index>(order[oi]);
            const auto lam = cvals[c];
            const auto vec = cvecs.col(c);
            const double vec_imag = vec.imag().lpNorm<Eigen::Infinity>();
            if (std::abs(lam.imag()) > 1e-8 || vec_imag > 1e-6) {
                throw AnalysisError("decompose: complex eigenvalue pair in the retained "
                                    "spectrum of the non-symmetrized operator; rerun with the "
                                    "symmetrized kernel");
            }
            Vector rv = vec.real();
            // Skip the deflated stationary direction itself.
            if (std::abs(lam.real()) < 1e-10 && std::abs(rv.normalized().dot(psi0)) > 0.99) {
                continue;
            }
            rv /= rv.norm();
            dec.eigenvalues[taken] = lam.real();
            dec.eigenvectors.col(taken) = rv;
            ++taken;
        }
        if (taken < want) {
            throw AnalysisError("decompose: could not extract " + std::to_string(want) +
                                " real eigenpairs in the non-symmetrized mode");
        }
        detail::canonicalize_signs(dec.eigenvectors);

        double max_resid = 0.0;
        for (Eigen::Index c = 0; c < want; ++c) {
            const double r = (td * dec.eigenvectors.col(c) -
                              dec.eigenvalues[c] * dec.eigenvectors.col(c))
                                 .lpNorm<Eigen::Infinity>();
            max_resid = std::max(max_resid, r);
        }
        if (max_resid > 1e-6) {
            throw AnalysisError("decompose: eigenpair residual " + std::to_string(max_resid) +
                                " exceeds 1e-6 (non-symmetrized mode)");
        }
        dec.stationary = std::move(psi0);
        dec.max_residual = max_resid;
        dec.symmetric_basis = false;
    }

    // lambda >= 1 among retained components means stationary removal failed.
    for (Eigen::Index i = 0; i < dec.eigenvalues.size(); ++i) {
        const double lam = dec.eigenvalues[i];
        if (lam >= 1.0 - 1e-12) {
            throw AnalysisError("decompose: retained eigenvalue " + std::to_string(lam) +
                                " reaches 1; stationary removal failed");
        }
        if (std::abs(lam) > 1.0 + 1e-8) {
            throw AnalysisError("decompose: eigenvalue " + std::to_string(lam) +
                                " outside the unit disc");
        }
    }
    return dec;
}

/// Per-component dpt weights for the chosen variant.
inline Vector dpt_component_weights(const DiffusionDecomposition& dec, DptWeights variant) {
    Vector w(dec.eigenvalues.size());
    for (Eigen::Index l = 0; l < dec.eigenvalues.size(); ++l) {
        const double lam = dec.eigenvalues[l];
        const double gap = 1.0 - lam;
        if (!(gap > 1e-12)) {
            throw AnalysisError("dpt weights: eigenvalue reaches 1; stationary removal failed");
        }
        w[l] = (variant == DptWeights::paper) ? 1.0 / gap : lam / gap;
    }
    return w;
}

/// Diffusion coordinates: row i is (w_1 phi_1(i), ..., w_m phi_m(i)).
/// dpt distances are Euclidean distances between these rows.
inline Matrix diffusion_coordinates(const DiffusionDecomposition& dec, DptWeights variant) {
    const Vector w = dpt_component_weights(dec, variant);
    Matrix coords(dec.eigenvectors.rows(), dec.eigenvectors.cols());
    for (Eigen::Index l = 0; l < dec.eigenvectors.cols(); ++l) {
        coords.col(l) = dec.eigenvectors.col(l) * w[l];
    }
    return coords;
}

/// Diffusion pseudotime distance between points i and j.
inline double dpt_distance(const DiffusionDecomposition& dec, std::size_t i, std::size_t j,
                           DptWeights variant = DptWeights::paper) {
    const auto n = static_cast<std::size_t>(dec.eigenvectors.rows());
    if (i >= n || j >= n) {
        throw InputError("dpt_distance: point index out of range");
    }
    const Vector w = dpt_component_weights(dec, variant);
    double acc = 0.0;
    for (Eigen::Index l = 0; l < dec.eigenvectors.cols(); ++l) {
        const double diff = w[l] * (dec.eigenvectors(static_cast<Eigen::Index>(i), l) -
                                    dec.eigenvectors(static_cast<Eigen::Index>(j), l));
        acc += diff * diff;
    }
    return std::sqrt(acc);
}

/**
 * Root for pseudotime: the medoid of the given candidate rows under summed
 * cosine distance (ties toward the lowest row index). For a progression this
 * is called with the members of the earliest class.
 */
inline std::size_t select_root(const Matrix& x, const std::vector<std::size_t>& candidates) {
    if (candidates.empty()) {
        throw InputError("select_root: no candidate rows");
    }
    Matrix cn(static_cast<Eigen::Index>(candidates.size()), x.cols());
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(candidates[i]);
        if (r < 0 || r >= x.rows()) {
            throw InputError("select_root: candidate row out of range");
        }
        const double norm = x.row(r).norm();
        if (!(norm > 0.0)) {
            throw InputError("select_root: zero-norm embedding row " + std::to_string(candidates[i]));
        }
        cn.row(static_cast<Eigen::Index>(i)) = x.row(r) / norm;
    }
    // argmin of sum_q (1 - p.q) == argmax of p . sum_q q.
    Vector centroid = cn.colwise().sum();
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const double score = cn.row(static_cast<Eigen::Index>(i)).dot(centroid);
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return candidates[best];
}

struct PseudotimeResult {
    Vector t_raw;
    Vector t_norm;
    std::size_t root = 0;
    double spectral_gap = std::numeric_limits<double>::quiet_NaN(); // lambda_1 - lambda_2
};

/// Pseudotime: dpt distance from the root, plus its min-max normalization.
inline PseudotimeResult pseudotime(const DiffusionDecomposition& dec, std::size_t root,
                                   DptWeights variant = DptWeights::paper,
                                   Warnings* warnings = nullptr) {
    const auto n = static_cast<std::size_t>(dec.eigenvectors.rows());
    if (root >= n) {
        throw InputError("pseudotime: root index out of range");
    }
    const Matrix coords = diffusion_coordinates(dec, variant);

    PseudotimeResult res;
    res.root = root;
    res.t_raw.resize(static_cast<Eigen::Index>(n));
    const auto r = static_cast<Eigen::Index>(root);
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        res.t_raw[i] = (coords.row(i) - coords.row(r)).norm();
    }

    const double lo = res.t_raw.minCoeff();
    const double hi = res.t_raw.maxCoeff();
    if (!(hi > lo)) {
        throw AnalysisError("pseudotime: distances from the root are constant; the diffusion "
                            "coordinates are degenerate");
    }
    res.t_norm = (res.t_raw.array() - lo) / (hi - lo);

    if (dec.eigenvalues.size() >= 2) {
        res.spectral_gap = dec.eigenvalues[0] - dec.eigenvalues[1];
    } else {
        warn(warnings, "pseudotime: fewer than 2 retained components; spectral gap undefined");
    }
    return res;
}

} // namespace diffusion
} // namespace traject

#endif
