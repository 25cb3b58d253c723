#ifndef TRAJECT_GRAPH_HPP
#define TRAJECT_GRAPH_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Sparse>

#include "common.hpp"

/**
 * @file graph.hpp
 * @brief Exact k-nearest-neighbor graph and diffusion transition matrix.
 *
 * Distances are cosine (1 - dot of unit rows). The kernel uses local
 * scaling: K(i,j) = exp(-d(i,j)^2 / (2 * sigma_i * sigma_j)) with sigma_i
 * the distance from i to its k-th neighbor. Row-normalizing K yields the
 * row-stochastic transition matrix T. By default the neighbor support is
 * symmetrized (union closure), which keeps the kernel matrix symmetric and
 * lets the eigenproblem be solved in conjugated symmetric form.
 */

namespace traject {
namespace graph {

struct NeighborGraph {
    std::size_t n = 0;
    int k = 0;
    // Row-major n*k blocks, each sorted ascending by (distance, index).
    std::vector<std::int32_t> indices;
    std::vector<double> distances;

    const std::int32_t* row_indices(std::size_t i) const {
        return indices.data() + i * static_cast<std::size_t>(k);
    }
    const double* row_distances(std::size_t i) const {
        return distances.data() + i * static_cast<std::size_t>(k);
    }
};

namespace detail {

// Writes the k nearest columns of one distance row (self excluded, ties
// toward the lower index) into the flat graph arrays.
inline void take_k_nearest(const std::vector<double>& dist, Eigen::Index i, Eigen::Index n, int k,
                           std::vector<std::int32_t>& order, NeighborGraph& g) {
    std::int32_t m = 0;
    for (Eigen::Index j = 0; j < n; ++j) {
        if (j != i) {
            order[static_cast<std::size_t>(m++)] = static_cast<std::int32_t>(j);
        }
    }
    const auto closer = [&](std::int32_t a, std::int32_t b) {
        const double da = dist[static_cast<std::size_t>(a)];
        const double db = dist[static_cast<std::size_t>(b)];
        if (da != db) return da < db;
        return a < b;
    };
    std::nth_element(order.begin(), order.begin() + (k - 1), order.begin() + m, closer);
    std::sort(order.begin(), order.begin() + k, closer);

    const std::size_t base = static_cast<std::size_t>(i) * static_cast<std::size_t>(k);
    for (int r = 0; r < k; ++r) {
        const std::int32_t j = order[static_cast<std::size_t>(r)];
        g.indices[base + static_cast<std::size_t>(r)] = j;
        g.distances[base + static_cast<std::size_t>(r)] = dist[static_cast<std::size_t>(j)];
    }
}

} // namespace detail

/**
 * Exact k-nearest neighbors under cosine distance, self excluded, ties
 * broken toward the lower index. Requires k >= 1 and n > k; rejects
 * zero-norm rows.
 */
inline NeighborGraph knn_cosine(const Matrix& x, int k) {
    const Eigen::Index n = x.rows();
    if (k < 1) {
        throw InputError("knn_cosine: k must be >= 1");
    }
    if (n <= k) {
        throw InputError("knn_cosine: k = " + std::to_string(k) +
                         " requires more than k rows, got n = " + std::to_string(n));
    }

    Matrix xn(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double norm = x.row(i).norm();
        if (!(norm > 0.0)) {
            throw InputError("knn_cosine: zero-norm embedding row " + std::to_string(i));
        }
        xn.row(i) = x.row(i) / norm;
    }

    NeighborGraph g;
    g.n = static_cast<std::size_t>(n);
    g.k = k;
    g.indices.resize(g.n * static_cast<std::size_t>(k));
    g.distances.resize(g.n * static_cast<std::size_t>(k));

    const Eigen::Index block = 256;
    const int nthreads = threads::count();
#pragma omp parallel num_threads(nthreads)
    {
        std::vector<double> dist(g.n);
        std::vector<std::int32_t> order(g.n);

#pragma omp for schedule(static)
        for (Eigen::Index b0 = 0; b0 < n; b0 += block) {
            const Eigen::Index b1 = std::min(b0 + block, n);
            const Matrix gram = xn.middleRows(b0, b1 - b0) * xn.transpose();

            for (Eigen::Index i = b0; i < b1; ++i) {
                for (Eigen::Index j = 0; j < n; ++j) {
                    const double d = 1.0 - gram(i - b0, j);
                    dist[static_cast<std::size_t>(j)] = d < 0.0 ? 0.0 : d;
                }
                detail::take_k_nearest(dist, i, n, k, order, g);
            }
        }
    }
    return g;
}

/**
 * Full cosine similarity matrix (dot products of unit rows), computed in the
 * same 256-row blocks as knn_cosine so the entries are bitwise the values the
 * direct path would see. Needs n^2 doubles; meant for resampling loops over a
 * fixed base set.
 */
inline Matrix cosine_gram(const Matrix& x) {
    const Eigen::Index n = x.rows();
    if (n < 2) {
        throw InputError("cosine_gram: need at least 2 rows");
    }
    Matrix xn(n, x.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        const double norm = x.row(i).norm();
        if (!(norm > 0.0)) {
            throw InputError("cosine_gram: zero-norm embedding row " + std::to_string(i));
        }
        xn.row(i) = x.row(i) / norm;
    }
    Matrix gram(n, n);
    const Eigen::Index block = 256;
    const int nthreads = threads::count();
#pragma omp parallel for schedule(static) num_threads(nthreads)
    for (Eigen::Index b0 = 0; b0 < n; b0 += block) {
        const Eigen::Index b1 = std::min(b0 + block, n);
        gram.middleRows(b0, b1 - b0).noalias() = xn.middleRows(b0, b1 - b0) * xn.transpose();
    }
    return gram;
}

/**
 * k-nearest neighbors for a multiset of base rows, with distances looked up
 * in a precomputed cosine gram. Point i of the output graph is base row
 * rows[i]; repeated base rows are distinct points (self excluded by point
 * index, not by base row). Matches knn_cosine on the gathered matrix.
 */
inline NeighborGraph knn_from_gram(const Matrix& gram, const std::vector<std::size_t>& rows,
                                   int k) {
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size());
    if (k < 1) {
        throw InputError("knn_from_gram: k must be >= 1");
    }
    if (n <= k) {
        throw InputError("knn_from_gram: k = " + std::to_string(k) +
                         " requires more than k rows, got n = " + std::to_string(n));
    }
    for (std::size_t r : rows) {
        if (r >= static_cast<std::size_t>(gram.rows())) {
            throw InputError("knn_from_gram: base row " + std::to_string(r) + " out of range");
        }
    }

    NeighborGraph g;
    g.n = static_cast<std::size_t>(n);
    g.k = k;
    g.indices.resize(g.n * static_cast<std::size_t>(k));
    g.distances.resize(g.n * static_cast<std::size_t>(k));

    const int nthreads = threads::count();
#pragma omp parallel num_threads(nthreads)
    {
        std::vector<double> dist(g.n);
        std::vector<std::int32_t> order(g.n);

#pragma omp for schedule(static)
        for (Eigen::Index i = 0; i < n; ++i) {
            const auto ri = static_cast<Eigen::Index>(rows[static_cast<std::size_t>(i)]);
            for (Eigen::Index j = 0; j < n; ++j) {
                const double d =
                    1.0 - gram(ri, static_cast<Eigen::Index>(rows[static_cast<std::size_t>(j)]));
                dist[static_cast<std::size_t>(j)] = d < 0.0 ? 0.0 : d;
            }
            detail::take_k_nearest(dist, i, n, k, order, g);
        }
    }
    return g;
}

/**
 * Local kernel scales: sigma_i = distance from i to its k-th neighbor.
 * A zero scale (at least k exact duplicates of row i) falls back to the
 * smallest positive distance in the row, with a warning; a row whose
 * neighbors are all at distance zero is an error.
 */
inline Vector local_scales(const NeighborGraph& g, Warnings* warnings = nullptr) {
    Vector sigma(static_cast<Eigen::Index>(g.n));
    std::size_t substituted = 0;
    std::string first_rows;
    for (std::size_t i = 0; i < g.n; ++i) {
        double s = g.row_distances(i)[static_cast<std::size_t>(g.k - 1)];
        if (s == 0.0) {
            double smallest_positive = 0.0;
            for (int r = 0; r < g.k; ++r) {
                const double d = g.row_distances(i)[static_cast<std::size_t>(r)];
                if (d > 0.0) {
                    smallest_positive = d;
                    break;
                }
            }
            if (smallest_positive == 0.0) {
                throw AnalysisError("local_scales: every neighbor of row " + std::to_string(i) +
                                    " is at distance zero; the point is duplicated more than k "
                                    "times");
            }
            s = smallest_positive;
            ++substituted;
            if (substituted <= 3) {
                first_rows += (first_rows.empty() ? "" : ", ") + std::to_string(i);
            }
        }
        sigma[static_cast<Eigen::Index>(i)] = s;
    }
    if (substituted > 0) {
        warn(warnings, "local_scales: " + std::to_string(substituted) +
                           " rows had a zero k-th neighbor distance (rows " + first_rows +
                           (substituted > 3 ? ", ..." : "") +
                           "); substituted the smallest positive row distance");
    }
    return sigma;
}

struct TransitionOptions {
    bool symmetrize = true; // union closure of the neighbor support
    int alpha = 0;          // density normalization exponent, 0 or 1
};

struct TransitionMatrix {
    std::size_t n = 0;
    Eigen::SparseMatrix<double, Eigen::RowMajor> t; // row-stochastic, zero diagonal
    Vector kernel_row_sums;                         // row sums of the kernel before normalization
    int components = 0;                             // connected components of the support
    bool symmetrized = true;
    int alpha = 0;
};

namespace detail {

class UnionFind {
public:
    explicit UnionFind(std::size_t n) : parent_(n) {
        std::iota(parent_.begin(), parent_.end(), std::size_t{0});
    }
    std::size_t find(std::size_t a) {
        while (parent_[a] != a) {
            parent_[a] = parent_[parent_[a]];
            a = parent_[a];
        }
        return a;
    }
    void unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a != b) {
            parent_[b] = a;
        }
    }
    int count() {
        int c = 0;
        for (std::size_t i = 0; i < parent_.size(); ++i) {
            if (find(i) == i) {
                ++c;
            }
        }
        return c;
    }

private:
    std::vector<std::size_t> parent_;
};

} // namespace detail

/**
 * Locally scaled kernel and row-stochastic transition matrix over the
 * neighbor support. With `symmetrize` the support is the union closure and
 * the kernel matrix is exactly symmetric (each undirected edge is evaluated
 * once). With alpha = 1 the kernel is first divided by the product of its
 * row sums (density normalization), which preserves symmetry.
 */
inline TransitionMatrix transition_matrix(const NeighborGraph& g, const Vector& scales,
                                          const TransitionOptions& opts = {}) {
    if (opts.alpha != 0 && opts.alpha != 1) {
        throw InputError("transition_matrix: alpha must be 0 or 1");
    }
    if (static_cast<std::size_t>(scales.size()) != g.n) {
        throw InputError("transition_matrix: scale vector length mismatch");
    }
    const std::size_t n = g.n;

    struct Edge {
        std::int32_t i, j;
        double d;
    };
    std::vector<Edge> edges;
    edges.reserve(n * static_cast<std::size_t>(g.k) * (opts.symmetrize ? 1 : 1));

    if (opts.symmetrize) {
        // Undirected union support; one kernel evaluation per edge keeps
        // K numerically symmetric by construction.
        for (std::size_t i = 0; i < n; ++i) {
            for (int r = 0; r < g.k; ++r) {
                const std::int32_t j = g.row_indices(i)[static_cast<std::size_t>(r)];
                const double d = g.row_distances(i)[static_cast<std::size_t>(r)];
                const std::int32_t a = std::min<std::int32_t>(static_cast<std::int32_t>(i), j);
                const std::int32_t b = std::max<std::int32_t>(static_cast<std::int32_t>(i), j);
                edges.push_back(Edge{a, b, d});
            }
        }
        std::sort(edges.begin(), edges.end(), [](const Edge& x, const Edge& y) {
            if (x.i != y.i) return x.i < y.i;
            return x.j < y.j;
        });
        edges.erase(std::unique(edges.begin(), edges.end(),
                                [](const Edge& x, const Edge& y) {
                                    return x.i == y.i && x.j == y.j;
                                }),
                    edges.end());
    } else {
        for (std::size_t i = 0; i < n; ++i) {
            for (int r = 0; r < g.k; ++r) {
                edges.push_back(Edge{static_cast<std::int32_t>(i),
                                     g.row_indices(i)[static_cast<std::size_t>(r)],
                                     g.row_distances(i)[static_cast<std::size_t>(r)]});
            }
        }
    }

    detail::UnionFind uf(n);
    for (const Edge& e : edges) {
        uf.unite(static_cast<std::size_t>(e.i), static_cast<std::size_t>(e.j));
    }

    // Kernel values; symmetrized edges carry both (i,j) and (j,i).
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(edges.size() * (opts.symmetrize ? 2 : 1));
    for (const Edge& e : edges) {
        const double si = scales[e.i];
        const double sj = scales[e.j];
        const double kv = std::exp(-(e.d * e.d) / (2.0 * si * sj));
        trip.emplace_back(e.i, e.j, kv);
        if (opts.symmetrize) {
            trip.emplace_back(e.j, e.i, kv);
        }
    }

    Eigen::SparseMatrix<double, Eigen::RowMajor> kernel(static_cast<Eigen::Index>(n),
                                                        static_cast<Eigen::Index>(n));
    kernel.setFromTriplets(trip.begin(), trip.end());

    if (opts.alpha == 1) {
        Vector q = Vector::Zero(static_cast<Eigen::Index>(n));
        for (Eigen::Index i = 0; i < kernel.outerSize(); ++i) {
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(kernel, i); it;
                 ++it) {
                q[i] += it.value();
            }
        }
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
            if (!(q[i] > 0.0)) {
                throw AnalysisError("transition_matrix: kernel row " + std::to_string(i) +
                                    " sums to zero before density normalization");
            }
        }
        for (Eigen::Index i = 0; i < kernel.outerSize(); ++i) {
            for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(kernel, i); it;
                 ++it) {
                it.valueRef() /= q[i] * q[it.col()];
            }
        }
    }

    TransitionMatrix tm;
    tm.n = n;
    tm.symmetrized = opts.symmetrize;
    tm.alpha = opts.alpha;
    tm.components = uf.count();
    tm.kernel_row_sums = Vector::Zero(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < kernel.outerSize(); ++i) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(kernel, i); it; ++it) {
            tm.kernel_row_sums[i] += it.value();
        }
    }
    for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(n); ++i) {
        if (!(tm.kernel_row_sums[i] > 0.0)) {
            throw AnalysisError("transition_matrix: kernel row " + std::to_string(i) +
                                " underflowed to zero; scales are degenerate");
        }
    }

    tm.t = kernel;
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            it.valueRef() /= tm.kernel_row_sums[i];
        }
    }
    return tm;
}

} // namespace graph
} // namespace traject

#endif
