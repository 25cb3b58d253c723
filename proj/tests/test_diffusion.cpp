#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "traject/diffusion.hpp"
#include "traject/graph.hpp"
#include "traject/metrics.hpp"
#include "traject/rng.hpp"
#include "traject/synth.hpp"
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

graph::TransitionMatrix connected_transition(const Matrix& x, int k,
                                             const graph::TransitionOptions& opts = {}) {
    const graph::NeighborGraph g = graph::knn_cosine(x, k);
    const Vector scales = graph::local_scales(g);
    graph::TransitionMatrix tm = graph::transition_matrix(g, scales, opts);
    REQUIRE(tm.components == 1);
    return tm;
}

// Dense symmetric conjugate A = S - phi0 phi0^T rebuilt from the transition
// matrix, without going through the decomposition under test.
Matrix dense_deflated_conjugate(const graph::TransitionMatrix& tm, Vector* phi0_out) {
    const auto n = static_cast<Eigen::Index>(tm.n);
    const Matrix t = Matrix(tm.t);
    Vector sqrt_d(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        sqrt_d[i] = std::sqrt(tm.kernel_row_sums[i]);
    }
    Matrix a(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            a(i, j) = t(i, j) * sqrt_d[i] / sqrt_d[j];
        }
    }
    const Vector phi0 = sqrt_d / sqrt_d.norm();
    a.noalias() -= phi0 * phi0.transpose();
    if (phi0_out != nullptr) {
        *phi0_out = phi0;
    }
    return a;
}

} // namespace

TEST_CASE("decompose returns a verified deflated eigenbasis") {
    const Matrix x = random_points(80, 8, 101);
    const graph::TransitionMatrix tm = connected_transition(x, 10);

    diffusion::DecomposeOptions opts;
    opts.n_dc = 79;
    const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts);

    REQUIRE(dec.eigenvalues.size() == 79);
    REQUIRE(dec.eigenvectors.rows() == 80);
    REQUIRE(dec.eigenvectors.cols() == 79);
    REQUIRE(dec.symmetric_basis);
    REQUIRE(dec.max_residual <= 1e-8);

    Vector phi0;
    const Matrix a = dense_deflated_conjugate(tm, &phi0);

    // The stationary direction is sqrt of the kernel row sums, unit norm.
    REQUIRE((dec.stationary - phi0).lpNorm<Eigen::Infinity>() <= 1e-14);

    // Orthonormal basis, orthogonal to the removed stationary direction.
    const Matrix gram = dec.eigenvectors.transpose() * dec.eigenvectors;
    REQUIRE((gram - Matrix::Identity(79, 79)).lpNorm<Eigen::Infinity>() <= 1e-10);
    REQUIRE((dec.eigenvectors.transpose() * phi0).lpNorm<Eigen::Infinity>() <= 1e-10);

    for (Eigen::Index l = 0; l < dec.eigenvalues.size(); ++l) {
        REQUIRE(dec.eigenvalues[l] < 1.0 - 1e-12);
        REQUIRE(std::abs(dec.eigenvalues[l]) <= 1.0 + 1e-8);
        if (l > 0) {
            REQUIRE(std::abs(dec.eigenvalues[l]) <= std::abs(dec.eigenvalues[l - 1]) + 1e-14);
        }
        const Vector v = dec.eigenvectors.col(l);
        REQUIRE((a * v - dec.eigenvalues[l] * v).lpNorm<Eigen::Infinity>() <= 1e-8);
    }
}

TEST_CASE("dpt distances match dense inversion of the accumulated operator") {
    for (std::uint64_t seed : {11u, 12u, 13u}) {
        const Eigen::Index n = 24 + static_cast<Eigen::Index>(seed % 3) * 28;
        const Matrix x = random_points(n, 6, seed);
        const graph::TransitionMatrix tm =
            connected_transition(x, std::max<int>(8, static_cast<int>(n) / 3));

        diffusion::DecomposeOptions opts;
        opts.n_dc = static_cast<int>(n) - 1;
        const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts);

        const Matrix m_classic = oracles::dense_accumulated_operator(tm, false);
        const Matrix m_paper = oracles::dense_accumulated_operator(tm, true);

        double worst = 0.0;
        for (std::size_t i = 0; i < tm.n; ++i) {
            for (std::size_t j = i + 1; j < tm.n; ++j) {
                const double dc = diffusion::dpt_distance(dec, i, j, diffusion::DptWeights::classic);
                const double dp = diffusion::dpt_distance(dec, i, j, diffusion::DptWeights::paper);
                worst = std::max(worst, std::abs(dc - oracles::operator_row_distance(m_classic, i, j)));
                worst = std::max(worst, std::abs(dp - oracles::operator_row_distance(m_paper, i, j)));
            }
        }
        INFO("n = " << n << ", worst pairwise gap = " << worst);
        REQUIRE(worst <= 1e-6);
    }
}

TEST_CASE("iterative and dense solvers agree beyond the dense cutoff") {
    const Matrix x = random_points(700, 10, 21);
    const graph::TransitionMatrix tm = connected_transition(x, 12);

    diffusion::DecomposeOptions iter_opts;
    iter_opts.n_dc = 10;
    diffusion::DecomposeOptions dense_opts = iter_opts;
    dense_opts.force_dense = true;

    const diffusion::DiffusionDecomposition it = diffusion::decompose(tm, iter_opts);
    const diffusion::DiffusionDecomposition dn = diffusion::decompose(tm, dense_opts);

    REQUIRE(it.eigenvalues.size() == 10);
    REQUIRE((it.eigenvalues - dn.eigenvalues).lpNorm<Eigen::Infinity>() <= 1e-8);

    SplitRng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        const auto i = static_cast<std::size_t>(rng.next_below(700));
        const auto j = static_cast<std::size_t>(rng.next_below(700));
        const double a = diffusion::dpt_distance(it, i, j);
        const double b = diffusion::dpt_distance(dn, i, j);
        REQUIRE(a == Catch::Approx(b).margin(1e-6));
    }
}

TEST_CASE("decompose is bitwise repeatable") {
    const Matrix x = random_points(60, 5, 31);
    const graph::TransitionMatrix tm = connected_transition(x, 8);
    diffusion::DecomposeOptions opts;
    opts.n_dc = 6;
    const diffusion::DiffusionDecomposition a = diffusion::decompose(tm, opts);
    const diffusion::DiffusionDecomposition b = diffusion::decompose(tm, opts);
    REQUIRE((a.eigenvalues - b.eigenvalues).lpNorm<Eigen::Infinity>() == 0.0);
    REQUIRE((a.eigenvectors - b.eigenvectors).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("decompose rejects disconnected and degenerate inputs") {
    SECTION("two far clusters") {
        Matrix x(12, 2);
        SplitRng rng(41);
        for (Eigen::Index i = 0; i < 12; ++i) {
            const double cx = i < 6 ? 100.0 : 1.0;
            const double cy = i < 6 ? 1.0 : 100.0;
            x(i, 0) = cx + 0.01 * rng.next_gaussian();
            x(i, 1) = cy + 0.01 * rng.next_gaussian();
        }
        const graph::NeighborGraph g = graph::knn_cosine(x, 2);
        const graph::TransitionMatrix tm = graph::transition_matrix(g, graph::local_scales(g));
        REQUIRE(tm.components == 2);
        REQUIRE_THROWS_WITH(diffusion::decompose(tm),
                            Catch::Matchers::ContainsSubstring("connected components"));
    }
    SECTION("n_dc must be positive") {
        const Matrix x = random_points(20, 3, 42);
        const graph::TransitionMatrix tm = connected_transition(x, 4);
        diffusion::DecomposeOptions opts;
        opts.n_dc = 0;
        REQUIRE_THROWS_AS(diffusion::decompose(tm, opts), InputError);
    }
    SECTION("n_dc above n-1 clamps with a warning") {
        const Matrix x = random_points(10, 3, 43);
        const graph::TransitionMatrix tm = connected_transition(x, 4);
        diffusion::DecomposeOptions opts;
        opts.n_dc = 20;
        Warnings warnings;
        const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts, &warnings);
        REQUIRE(dec.eigenvalues.size() == 9);
        REQUIRE(warnings.size() == 1);
        REQUIRE(warnings[0].find("clamped from 20 to 9") != std::string::npos);
    }
    SECTION("single point") {
        graph::TransitionMatrix tm;
        tm.n = 1;
        tm.t.resize(1, 1);
        tm.kernel_row_sums = Vector::Ones(1);
        tm.components = 1;
        REQUIRE_THROWS_WITH(diffusion::decompose(tm),
                            Catch::Matchers::ContainsSubstring("need at least 2 points"));
    }
}

TEST_CASE("non-symmetrized mode keeps a real spectrum on small data") {
    const Matrix x = random_points(40, 4, 51);
    graph::TransitionOptions topts;
    topts.symmetrize = false;
    const graph::NeighborGraph g = graph::knn_cosine(x, 6);
    const graph::TransitionMatrix tm = graph::transition_matrix(g, graph::local_scales(g), topts);
    REQUIRE_FALSE(tm.symmetrized);

    diffusion::DecomposeOptions opts;
    opts.n_dc = 5;
    const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts);
    REQUIRE_FALSE(dec.symmetric_basis);
    REQUIRE(dec.eigenvalues.size() == 5);
    REQUIRE(dec.max_residual <= 1e-6);
    // The deflated stationary direction of the row-stochastic operator is the
    // constant vector.
    REQUIRE((dec.stationary - Vector::Constant(40, 1.0 / std::sqrt(40.0)))
                .lpNorm<Eigen::Infinity>() <= 1e-14);
    for (Eigen::Index l = 0; l < 5; ++l) {
        REQUIRE(std::abs(dec.eigenvalues[l]) < 1.0);
    }
}

TEST_CASE("non-symmetrized mode is capped at n = 2000") {
    graph::TransitionMatrix tm;
    tm.n = 2001;
    tm.t.resize(2001, 2001);
    tm.kernel_row_sums = Vector::Ones(2001);
    tm.components = 1;
    tm.symmetrized = false;
    REQUIRE_THROWS_WITH(diffusion::decompose(tm),
                        Catch::Matchers::ContainsSubstring("capped at n = 2000"));
}

TEST_CASE("dpt component weights follow the two variants") {
    diffusion::DiffusionDecomposition dec;
    dec.eigenvalues = Vector(2);
    dec.eigenvalues << 0.5, -0.25;
    dec.eigenvectors = Matrix::Identity(2, 2);

    const Vector paper = diffusion::dpt_component_weights(dec, diffusion::DptWeights::paper);
    REQUIRE(paper[0] == 2.0);
    REQUIRE(paper[1] == 0.8);

    const Vector classic = diffusion::dpt_component_weights(dec, diffusion::DptWeights::classic);
    REQUIRE(classic[0] == 1.0);
    REQUIRE(classic[1] == -0.2);

    dec.eigenvalues[1] = 1.0 - 1e-13;
    REQUIRE_THROWS_AS(diffusion::dpt_component_weights(dec, diffusion::DptWeights::paper),
                      AnalysisError);
}

TEST_CASE("diffusion coordinates reproduce dpt distances") {
    const Matrix x = random_points(50, 4, 61);
    const graph::TransitionMatrix tm = connected_transition(x, 8);
    diffusion::DecomposeOptions opts;
    opts.n_dc = 7;
    const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts);

    for (auto variant : {diffusion::DptWeights::paper, diffusion::DptWeights::classic}) {
        const Matrix coords = diffusion::diffusion_coordinates(dec, variant);
        REQUIRE(coords.rows() == 50);
        REQUIRE(coords.cols() == 7);
        for (std::size_t i : {0u, 13u, 49u}) {
            for (std::size_t j : {5u, 28u}) {
                const double direct = diffusion::dpt_distance(dec, i, j, variant);
                const double via = (coords.row(static_cast<Eigen::Index>(i)) -
                                    coords.row(static_cast<Eigen::Index>(j)))
                                       .norm();
                REQUIRE(direct == Catch::Approx(via).margin(1e-12));
            }
        }
    }
    REQUIRE_THROWS_AS(diffusion::dpt_distance(dec, 0, 50), InputError);
}

TEST_CASE("select_root picks the cosine medoid") {
    Matrix x = Matrix::Zero(8, 2);
    for (Eigen::Index i = 0; i < 8; ++i) {
        const double theta = 0.15 * static_cast<double>(i);
        x(i, 0) = std::cos(theta);
        x(i, 1) = std::sin(theta);
    }
    // Candidates at angles 0.0, 0.45 and 0.9: the middle one is the medoid.
    REQUIRE(diffusion::select_root(x, {0, 3, 6}) == 3);

    SECTION("symmetric tie keeps the first candidate") {
        Matrix y(4, 2);
        y.setZero();
        y(1, 0) = std::cos(0.2);
        y(1, 1) = -std::sin(0.2);
        y(3, 0) = std::cos(0.2);
        y(3, 1) = std::sin(0.2);
        y(0, 0) = 1.0;
        y(2, 0) = 1.0;
        REQUIRE(diffusion::select_root(y, {1, 3}) == 1);
        REQUIRE(diffusion::select_root(y, {3, 1}) == 3);
    }
    SECTION("validation") {
        REQUIRE_THROWS_AS(diffusion::select_root(x, {}), InputError);
        REQUIRE_THROWS_AS(diffusion::select_root(x, {99}), InputError);
        Matrix z = Matrix::Zero(2, 2);
        REQUIRE_THROWS_WITH(diffusion::select_root(z, {0}),
                            Catch::Matchers::ContainsSubstring("zero-norm"));
    }
}

TEST_CASE("pseudotime is anchored at the root and min-max normalized") {
    const Matrix x = random_points(60, 5, 71);
    const graph::TransitionMatrix tm = connected_transition(x, 10);
    diffusion::DecomposeOptions opts;
    opts.n_dc = 8;
    const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm, opts);

    const diffusion::PseudotimeResult res = diffusion::pseudotime(dec, 17);
    REQUIRE(res.root == 17);
    REQUIRE(res.t_raw[17] == 0.0);
    REQUIRE(res.t_norm.minCoeff() == 0.0);
    REQUIRE(res.t_norm.maxCoeff() == 1.0);
    REQUIRE(res.spectral_gap == dec.eigenvalues[0] - dec.eigenvalues[1]);
    for (Eigen::Index i = 0; i < 60; ++i) {
        REQUIRE(res.t_raw[i] >= 0.0);
        REQUIRE(std::isfinite(res.t_norm[i]));
    }
    REQUIRE_THROWS_AS(diffusion::pseudotime(dec, 60), InputError);

    SECTION("single retained component warns about the spectral gap") {
        diffusion::DecomposeOptions one;
        one.n_dc = 1;
        const diffusion::DiffusionDecomposition d1 = diffusion::decompose(tm, one);
        Warnings warnings;
        const diffusion::PseudotimeResult r1 = diffusion::pseudotime(
            d1, 0, diffusion::DptWeights::paper, &warnings);
        REQUIRE(std::isnan(r1.spectral_gap));
        REQUIRE(warnings.size() == 1);
        REQUIRE(warnings[0].find("spectral gap undefined") != std::string::npos);
    }
}

TEST_CASE("pseudotime rejects degenerate coordinates") {
    diffusion::DiffusionDecomposition dec;
    dec.eigenvalues = Vector::Constant(1, 0.5);
    dec.eigenvectors = Matrix::Constant(4, 1, 0.5);
    dec.stationary = Vector::Constant(4, 0.5);
    REQUIRE_THROWS_WITH(diffusion::pseudotime(dec, 0),
                        Catch::Matchers::ContainsSubstring("constant"));
}

TEST_CASE("pseudotime orders a noiseless synthetic progression") {
    synth::SyntheticConfig cfg;
    cfg.classes = 4;
    cfg.per_class = 50;
    cfg.dim = 16;
    cfg.noise_sigma = 0.0;
    cfg.slides_per_class = 4;
    cfg.seed = 3;
    const synth::SyntheticSet set = synth::generate(cfg);

    const graph::TransitionMatrix tm = connected_transition(set.embeddings, 15);
    const diffusion::DiffusionDecomposition dec = diffusion::decompose(tm);

    std::vector<std::size_t> earliest;
    for (std::size_t i = 0; i < set.class_ranks.size(); ++i) {
        if (set.class_ranks[i] == 0) {
            earliest.push_back(i);
        }
    }
    const std::size_t root = diffusion::select_root(set.embeddings, earliest);
    const diffusion::PseudotimeResult res = diffusion::pseudotime(dec, root);

    std::vector<double> t(res.t_norm.data(), res.t_norm.data() + res.t_norm.size());
    const double tau = metrics::kendall_tau_b(t, set.class_ranks);
    INFO("tau = " << tau << ", ceiling = " << set.tau_ceiling);
    REQUIRE(tau >= 0.8 * set.tau_ceiling);
}
