#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <set>
#include <vector>

#include "traject/graph.hpp"
#include "traject/rng.hpp"
#include "oracles.hpp"

using namespace traject;

namespace {

Matrix random_points(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
    SplitRng rng(seed);
    Matrix x(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < d; ++j) {
            x(i, j) = rng.next_gaussian();
        }
    }
    return x;
}

void require_matches_brute(const Matrix& x, int k) {
    const graph::NeighborGraph g = graph::knn_cosine(x, k);
    const oracles::BruteNeighbors brute = oracles::brute_knn_cosine(x, k);
    for (std::size_t i = 0; i < g.n; ++i) {
        for (int r = 0; r < k; ++r) {
            REQUIRE(g.row_indices(i)[static_cast<std::size_t>(r)] ==
                    brute.indices[i][static_cast<std::size_t>(r)]);
            REQUIRE(g.row_distances(i)[static_cast<std::size_t>(r)] ==
                    Catch::Approx(brute.distances[i][static_cast<std::size_t>(r)]).margin(1e-12));
        }
    }
}

} // namespace

TEST_CASE("knn_cosine matches the brute-force oracle") {
    require_matches_brute(random_points(120, 10, 1), 7);
}

TEST_CASE("knn_cosine matches the oracle across GEMM block boundaries") {
    require_matches_brute(random_points(600, 5, 2), 4);
}

TEST_CASE("knn_cosine rows are sorted and self-free") {
    const Matrix x = random_points(50, 4, 3);
    const graph::NeighborGraph g = graph::knn_cosine(x, 6);
    for (std::size_t i = 0; i < g.n; ++i) {
        for (int r = 0; r < g.k; ++r) {
            REQUIRE(g.row_indices(i)[static_cast<std::size_t>(r)] != static_cast<std::int32_t>(i));
            if (r > 0) {
                REQUIRE(g.row_distances(i)[static_cast<std::size_t>(r)] >=
                        g.row_distances(i)[static_cast<std::size_t>(r - 1)]);
            }
        }
    }
}

TEST_CASE("knn_cosine breaks exact distance ties toward the lower index") {
    // Orthonormal axis points: every pairwise cosine distance is exactly 1.
    Matrix x = Matrix::Zero(5, 5);
    for (Eigen::Index i = 0; i < 5; ++i) {
        x(i, i) = 1.0;
    }
    const graph::NeighborGraph g = graph::knn_cosine(x, 3);
    REQUIRE(std::vector<std::int32_t>(g.row_indices(0), g.row_indices(0) + 3) ==
            std::vector<std::int32_t>{1, 2, 3});
    REQUIRE(std::vector<std::int32_t>(g.row_indices(3), g.row_indices(3) + 3) ==
            std::vector<std::int32_t>{0, 1, 2});
    for (int r = 0; r < 3; ++r) {
        REQUIRE(g.row_distances(4)[static_cast<std::size_t>(r)] == 1.0);
    }
}

TEST_CASE("knn_cosine validates its input") {
    const Matrix x = random_points(10, 3, 4);
    REQUIRE_THROWS_AS(graph::knn_cosine(x, 0), InputError);
    REQUIRE_THROWS_AS(graph::knn_cosine(x, 10), InputError);
    Matrix with_zero = x;
    with_zero.row(5).setZero();
    REQUIRE_THROWS_WITH(graph::knn_cosine(with_zero, 3),
                        Catch::Matchers::ContainsSubstring("zero-norm embedding row 5"));
}

TEST_CASE("cosine_gram holds unit-row dot products") {
    const Matrix x = random_points(40, 6, 5);
    const Matrix gram = graph::cosine_gram(x);
    Matrix xn(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        xn.row(i) = x.row(i) / x.row(i).norm();
    }
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        REQUIRE(gram(i, i) == Catch::Approx(1.0).margin(1e-12));
        for (Eigen::Index j = 0; j < x.rows(); ++j) {
            REQUIRE(gram(i, j) == Catch::Approx(xn.row(i).dot(xn.row(j))).margin(1e-12));
        }
    }

    Matrix bad = x;
    bad.row(2).setZero();
    REQUIRE_THROWS_AS(graph::cosine_gram(bad), InputError);
}

TEST_CASE("knn_from_gram reproduces knn_cosine bit for bit") {
    const Matrix x = random_points(90, 8, 6);
    const Matrix gram = graph::cosine_gram(x);

    SECTION("identity row set") {
        std::vector<std::size_t> rows(90);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i] = i;
        }
        const graph::NeighborGraph direct = graph::knn_cosine(x, 9);
        const graph::NeighborGraph via_gram = graph::knn_from_gram(gram, rows, 9);
        REQUIRE(via_gram.indices == direct.indices);
        REQUIRE(via_gram.distances == direct.distances);
    }

    SECTION("resampled multiset equals the gathered matrix") {
        SplitRng rng(77);
        std::vector<std::size_t> rows(60);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i] = static_cast<std::size_t>(rng.next_below(90));
        }
        std::sort(rows.begin(), rows.end());

        Matrix gathered(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            gathered.row(static_cast<Eigen::Index>(i)) =
                x.row(static_cast<Eigen::Index>(rows[i]));
        }
        const graph::NeighborGraph direct = graph::knn_cosine(gathered, 5);
        const graph::NeighborGraph via_gram = graph::knn_from_gram(gram, rows, 5);
        REQUIRE(via_gram.indices == direct.indices);
        // Same dot products through a different GEMM shape: edge tiles may
        // round differently in the last ulp, unlike the identity gather.
        REQUIRE(via_gram.distances.size() == direct.distances.size());
        for (std::size_t i = 0; i < direct.distances.size(); ++i) {
            REQUIRE(via_gram.distances[i] ==
                    Catch::Approx(direct.distances[i]).margin(1e-12));
        }
    }

    SECTION("input validation") {
        REQUIRE_THROWS_AS(graph::knn_from_gram(gram, {0, 1, 2}, 3), InputError);
        REQUIRE_THROWS_WITH(graph::knn_from_gram(gram, {0, 1, 200, 3}, 2),
                            Catch::Matchers::ContainsSubstring("out of range"));
    }
}

TEST_CASE("local_scales picks the k-th neighbor distance") {
    const Matrix x = random_points(30, 5, 8);
    const graph::NeighborGraph g = graph::knn_cosine(x, 4);
    const Vector sigma = graph::local_scales(g, nullptr);
    for (std::size_t i = 0; i < g.n; ++i) {
        REQUIRE(sigma[static_cast<Eigen::Index>(i)] == g.row_distances(i)[3]);
    }
}

TEST_CASE("local_scales substitutes and warns on a zero k-th distance") {
    // Hand-built graph whose first row ends in a zero distance; valid sorted
    // graphs cannot produce this, so construct the rows directly.
    graph::NeighborGraph g;
    g.n = 2;
    g.k = 2;
    g.indices = {1, 0, 0, 1};
    g.distances = {0.25, 0.0, 0.1, 0.2};

    Warnings warnings;
    const Vector sigma = graph::local_scales(g, &warnings);
    REQUIRE(sigma[0] == 0.25); // smallest positive distance in the row
    REQUIRE(sigma[1] == 0.2);
    REQUIRE(warnings.size() == 1);
    REQUIRE(warnings[0].find("rows 0") != std::string::npos);
}

TEST_CASE("local_scales fails when a point is duplicated beyond k") {
    Matrix x(8, 3);
    for (Eigen::Index i = 0; i < 4; ++i) {
        x.row(i) << 1.0, 0.0, 0.0; // four copies, k = 3 neighbors all at zero
    }
    x.row(4) << 0.0, 1.0, 0.0;
    x.row(5) << 0.0, 1.0, 0.1;
    x.row(6) << 0.0, 1.0, 0.2;
    x.row(7) << 0.0, 1.0, 0.3;
    const graph::NeighborGraph g = graph::knn_cosine(x, 3);
    REQUIRE_THROWS_AS(graph::local_scales(g, nullptr), AnalysisError);
}

TEST_CASE("transition_matrix is row-stochastic over a symmetric kernel") {
    const Matrix x = random_points(60, 6, 9);
    const graph::NeighborGraph g = graph::knn_cosine(x, 8);
    const Vector sigma = graph::local_scales(g, nullptr);
    const graph::TransitionMatrix tm = graph::transition_matrix(g, sigma, {});

    REQUIRE(tm.n == 60);
    REQUIRE(tm.components == 1);
    REQUIRE(tm.symmetrized);

    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        double row_sum = 0.0;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            REQUIRE(it.col() != i); // zero diagonal
            row_sum += it.value();
        }
        REQUIRE(row_sum == Catch::Approx(1.0).margin(1e-12));
    }

    // One kernel evaluation per undirected edge; reconstructing K through
    // the row normalization costs one rounding on each side.
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            const double k_ij = it.value() * tm.kernel_row_sums[i];
            const double k_ji = tm.t.coeff(it.col(), i) * tm.kernel_row_sums[it.col()];
            REQUIRE(k_ij == Catch::Approx(k_ji).epsilon(1e-13).margin(1e-300));
        }
    }
}

TEST_CASE("transition_matrix counts connected components") {
    // Two tight clusters with k = 2: all neighbors stay inside a cluster.
    Matrix x(12, 2);
    SplitRng rng(10);
    for (Eigen::Index i = 0; i < 6; ++i) {
        x(i, 0) = 100.0 + rng.next_double();
        x(i, 1) = 1.0 + 0.01 * rng.next_double();
    }
    for (Eigen::Index i = 6; i < 12; ++i) {
        x(i, 0) = 1.0 + 0.01 * rng.next_double();
        x(i, 1) = 100.0 + rng.next_double();
    }
    const graph::NeighborGraph g = graph::knn_cosine(x, 2);
    const Vector sigma = graph::local_scales(g, nullptr);
    const graph::TransitionMatrix tm = graph::transition_matrix(g, sigma, {});
    REQUIRE(tm.components == 2);
}

TEST_CASE("transition_matrix supports density normalization") {
    const Matrix x = random_points(40, 5, 12);
    const graph::NeighborGraph g = graph::knn_cosine(x, 6);
    const Vector sigma = graph::local_scales(g, nullptr);

    graph::TransitionOptions opts;
    opts.alpha = 1;
    const graph::TransitionMatrix tm = graph::transition_matrix(g, sigma, opts);
    REQUIRE(tm.alpha == 1);
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        double row_sum = 0.0;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            row_sum += it.value();
        }
        REQUIRE(row_sum == Catch::Approx(1.0).margin(1e-12));
        REQUIRE(tm.kernel_row_sums[i] > 0.0);
    }

    // Density normalization must keep the kernel symmetric.
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            const double k_ij = it.value() * tm.kernel_row_sums[i];
            const double k_ji = tm.t.coeff(it.col(), i) * tm.kernel_row_sums[it.col()];
            REQUIRE(k_ij == Catch::Approx(k_ji).epsilon(1e-12));
        }
    }

    opts.alpha = 2;
    REQUIRE_THROWS_AS(graph::transition_matrix(g, sigma, opts), InputError);
}

TEST_CASE("transition_matrix without symmetrization keeps directed support") {
    const Matrix x = random_points(30, 4, 13);
    const int k = 5;
    const graph::NeighborGraph g = graph::knn_cosine(x, k);
    const Vector sigma = graph::local_scales(g, nullptr);

    graph::TransitionOptions opts;
    opts.symmetrize = false;
    const graph::TransitionMatrix tm = graph::transition_matrix(g, sigma, opts);
    REQUIRE_FALSE(tm.symmetrized);
    for (Eigen::Index i = 0; i < tm.t.outerSize(); ++i) {
        int nnz = 0;
        double row_sum = 0.0;
        for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(tm.t, i); it; ++it) {
            ++nnz;
            row_sum += it.value();
        }
        REQUIRE(nnz == k);
        REQUIRE(row_sum == Catch::Approx(1.0).margin(1e-12));
    }
}

TEST_CASE("transition_matrix rejects a mismatched scale vector") {
    const Matrix x = random_points(20, 3, 14);
    const graph::NeighborGraph g = graph::knn_cosine(x, 3);
    const Vector sigma = Vector::Ones(7);
    REQUIRE_THROWS_AS(graph::transition_matrix(g, sigma, {}), InputError);
}
