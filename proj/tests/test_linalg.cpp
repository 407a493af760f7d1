#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "sdlora/linalg.hpp"

using namespace sdlora;

namespace {

Matrix random_matrix(int r, int c, RngStream& rng, double scale = 1.0) {
    return gaussian_matrix(r, c, scale, rng);
}

} // namespace

TEST_CASE("matrix basics") {
    CHECK_THROWS_AS(Matrix(0, 3), DimensionError);
    CHECK_THROWS_AS(Matrix(2, -1), DimensionError);
    Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
    CHECK(m(1, 0) == 3.0);
    Matrix t = m.transposed();
    CHECK(t(0, 1) == 3.0);
    Matrix i = Matrix::identity(2);
    Matrix p = matmul(m, i);
    CHECK(p == m);
    CHECK_THROWS_AS(matmul(m, Matrix(3, 2)), DimensionError);

    Matrix z(2, 2);
    z.add_scaled(m, 2.0);
    CHECK(z(1, 1) == 8.0);
    CHECK(frobenius_dot(m, Matrix::identity(2)) == doctest::Approx(5.0));

    Matrix g = Matrix::from_rows({{1, 2}});
    g.append_zero_rows(2);
    CHECK(g.rows() == 3);
    CHECK(g(2, 1) == 0.0);
    CHECK(g(0, 1) == 2.0);
}

TEST_CASE("rng determinism and stream advance") {
    RngStream a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    RngStream r(7);
    Matrix m1 = gaussian_matrix(3, 3, 1.0, r);
    Matrix m2 = gaussian_matrix(3, 3, 1.0, r);
    CHECK(!(m1 == m2));  // the stream advances between calls

    CHECK(derive_seed(1, 2) != derive_seed(1, 3));
    CHECK(derive_seed(1, 2) == derive_seed(1, 2));
}

TEST_CASE("gaussian sample statistics") {
    RngStream rng(123);
    Matrix m = gaussian_matrix(100, 100, 1.0, rng);
    double mean = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) mean += m.data()[i];
    mean /= static_cast<double>(m.size());
    double var = 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double d = m.data()[i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(m.size() - 1);
    CHECK(var > 0.9);
    CHECK(var < 1.1);

    RngStream rng2(5);
    Matrix z = gaussian_matrix(4, 4, 0.0, rng2);
    CHECK(frobenius_norm(z) == 0.0);
}

TEST_CASE("frobenius norm") {
    CHECK(frobenius_norm(Matrix(2, 2)) == 0.0);
    CHECK(frobenius_norm(Matrix::identity(3)) == doctest::Approx(std::sqrt(3.0)));
    Matrix m = Matrix::from_rows({{3, 4}, {0, 0}});
    CHECK(frobenius_norm(m) == doctest::Approx(5.0));
    CHECK_THROWS_AS(frobenius_norm(Matrix()), DimensionError);
}

TEST_CASE("operator norm") {
    Matrix d = Matrix::from_rows({{3, 0}, {0, 1}});
    CHECK(operator_norm(d) == doctest::Approx(3.0).epsilon(1e-9));
    CHECK(operator_norm(Matrix(4, 3)) == 0.0);
    Matrix nil = Matrix::from_rows({{0, 2}, {0, 0}});
    CHECK(operator_norm(nil) == doctest::Approx(2.0).epsilon(1e-9));

    // Non-convergence carries the last iterate.
    Matrix hard = Matrix::from_rows({{1.0, 0.0}, {0.0, 0.999999}});
    try {
        operator_norm(hard, 1e-16, 2);
        CHECK(false);
    } catch (const ConvergenceError& e) {
        CHECK(e.last_estimate > 0.9);
    }
}

TEST_CASE("operator norm bounded by frobenius") {
    RngStream rng(99);
    for (int i = 0; i < 20; ++i) {
        Matrix m = random_matrix(5 + static_cast<int>(rng.uniform_below(6)),
                                 3 + static_cast<int>(rng.uniform_below(8)), rng);
        CHECK(operator_norm(m) <= frobenius_norm(m) + 1e-10);
    }
}

TEST_CASE("truncated svd on diagonal and identity") {
    Matrix d = Matrix::from_rows({{3, 0}, {0, 1}});
    SvdResult r = truncated_svd(d, 1);
    REQUIRE(r.s.size() == 1);
    CHECK(r.s[0] == doctest::Approx(3.0));
    Matrix rec = rank_k_truncation(d, 1);
    CHECK(rec(0, 0) == doctest::Approx(3.0));
    CHECK(std::abs(rec(1, 1)) < 1e-12);

    SvdResult ri = truncated_svd(Matrix::identity(2), 2);
    CHECK(ri.s[0] == doctest::Approx(1.0));
    CHECK(ri.s[1] == doctest::Approx(1.0));
    Matrix reci = rank_k_truncation(Matrix::identity(2), 2);
    CHECK(frobenius_norm(reci - Matrix::identity(2)) < 1e-12);

    CHECK_THROWS_AS(truncated_svd(d, 0), DimensionError);
    CHECK_THROWS_AS(truncated_svd(d, 3), DimensionError);
}

TEST_CASE("svd reconstruction error matches tail singular values") {
    RngStream rng(2024);
    Matrix m = random_matrix(6, 4, rng);
    SvdResult full = truncated_svd(m, 4);
    Matrix rec2 = rank_k_truncation(m, 2);
    const double tail = std::sqrt(full.s[2] * full.s[2] + full.s[3] * full.s[3]);
    CHECK(frobenius_norm(m - rec2) == doctest::Approx(tail).epsilon(1e-8));

    // Orthonormal columns.
    SvdResult r2 = truncated_svd(m, 2);
    for (int a = 0; a < 2; ++a) {
        for (int b = 0; b < 2; ++b) {
            double du = 0.0, dv = 0.0;
            for (int i = 0; i < r2.u.rows(); ++i) du += r2.u(i, a) * r2.u(i, b);
            for (int i = 0; i < r2.v.rows(); ++i) dv += r2.v(i, a) * r2.v(i, b);
            CHECK(du == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-10));
            CHECK(dv == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-10));
        }
    }
}

TEST_CASE("eckart-young against random rank-k candidates") {
    RngStream rng(31337);
    Matrix m = random_matrix(8, 6, rng);
    const int k = 2;
    const double best = frobenius_norm(m - rank_k_truncation(m, k));
    for (int trial = 0; trial < 100; ++trial) {
        Matrix a = random_matrix(8, k, rng);
        Matrix b = random_matrix(k, 6, rng);
        Matrix cand = matmul(a, b);
        // Scale the candidate toward m for a fair fight.
        const double sc = frobenius_dot(cand, m) /
                          std::max(frobenius_dot(cand, cand), 1e-30);
        cand *= sc;
        CHECK(best <= frobenius_norm(m - cand) + 1e-9);
    }
}

TEST_CASE("svd_complete produces orthogonal square factors") {
    RngStream rng(55);
    Matrix m = random_matrix(5, 3, rng);
    FullSvd f = svd_complete(m);
    CHECK(f.u.rows() == 5);
    CHECK(f.u.cols() == 5);
    CHECK(f.v.rows() == 3);
    CHECK(f.v.cols() == 3);
    Matrix utu = matmul(f.u.transposed(), f.u);
    Matrix vtv = matmul(f.v.transposed(), f.v);
    CHECK(frobenius_norm(utu - Matrix::identity(5)) < 1e-9);
    CHECK(frobenius_norm(vtv - Matrix::identity(3)) < 1e-9);

    // Reconstruction through the full factors.
    Matrix us(5, 3);
    for (int j = 0; j < 3; ++j)
        for (int i = 0; i < 5; ++i) us(i, j) = f.u(i, j) * f.s[j];
    CHECK(frobenius_norm(matmul(us, f.v.transposed()) - m) < 1e-9);

    // Rank-deficient input still yields complete orthogonal bases.
    Matrix lowrank = matmul(random_matrix(6, 2, rng), random_matrix(2, 4, rng));
    FullSvd g = svd_complete(lowrank);
    CHECK(frobenius_norm(matmul(g.u.transposed(), g.u) - Matrix::identity(6)) < 1e-9);
    CHECK(g.s[2] < 1e-10);
}

TEST_CASE("lstsq over orthonormal basis") {
    Matrix d1 = Matrix::from_rows({{1, 0}, {0, 0}});
    Matrix d2 = Matrix::from_rows({{0, 1}, {0, 0}});
    Matrix target = d1 * 0.6 + d2 * 0.8;
    std::vector<Matrix> basis = {d1, d2};
    LstSqSolution s = lstsq_over_basis(basis, target, 0.0);
    REQUIRE(s.coefficients.size() == 2);
    CHECK(s.coefficients[0] == doctest::Approx(0.6));
    CHECK(s.coefficients[1] == doctest::Approx(0.8));
    CHECK(s.residual_norm < 1e-12);
}

TEST_CASE("lstsq orthogonal target and hand-computed case") {
    Matrix d1 = Matrix::from_rows({{1, 0}, {0, 0}});
    Matrix orth = Matrix::from_rows({{0, 0}, {1, 0}});
    std::vector<Matrix> basis = {d1};
    LstSqSolution s = lstsq_over_basis(basis, orth, 0.0);
    CHECK(std::abs(s.coefficients[0]) < 1e-12);
    CHECK(s.residual_norm == doctest::Approx(1.0));

    // ||d1|| = ||target|| = 1, <d1, target> = 0.5
    const double a = 0.5, b = std::sqrt(0.75);
    Matrix target = Matrix::from_rows({{a, b}, {0, 0}});
    LstSqSolution s2 = lstsq_over_basis(basis, target, 0.0);
    CHECK(s2.coefficients[0] == doctest::Approx(0.5));
    CHECK(s2.residual_norm == doctest::Approx(std::sqrt(0.75)).epsilon(1e-10));
}

TEST_CASE("lstsq empty basis and singular gram") {
    Matrix target = Matrix::from_rows({{3, 4}, {0, 0}});
    LstSqSolution s = lstsq_over_basis({}, target, 0.0);
    CHECK(s.coefficients.empty());
    CHECK(s.residual_norm == doctest::Approx(5.0));

    Matrix d = Matrix::from_rows({{1, 0}, {0, 0}});
    std::vector<Matrix> dup = {d, d};
    CHECK_THROWS_AS(lstsq_over_basis(dup, target, 0.0), SingularSystemError);
    // A positive ridge makes the same system solvable.
    LstSqSolution ridged = lstsq_over_basis(dup, target, 1e-8);
    CHECK(ridged.coefficients[0] == doctest::Approx(1.5).epsilon(1e-4));
}

TEST_CASE("lstsq residual orthogonal to basis") {
    RngStream rng(77);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<Matrix> basis;
        for (int i = 0; i < 3; ++i) basis.push_back(random_matrix(4, 5, rng));
        Matrix target = random_matrix(4, 5, rng);
        LstSqSolution s = lstsq_over_basis(basis, target, 1e-12);
        Matrix resid = target;
        for (int i = 0; i < 3; ++i) resid.add_scaled(basis[i], -s.coefficients[i]);
        for (const Matrix& b : basis) {
            CHECK(std::abs(frobenius_dot(resid, b)) <= 1e-8 * frobenius_norm(target));
        }
    }
}

TEST_CASE("warm operator norm tracks a drifting matrix") {
    RngStream rng(11);
    Matrix m = random_matrix(6, 5, rng);
    WarmOperatorNorm warm;
    for (int step = 0; step < 10; ++step) {
        m.add_scaled(random_matrix(6, 5, rng, 0.01), 1.0);
        const double est = warm.update(m);
        CHECK(est == doctest::Approx(operator_norm(m)).epsilon(1e-6));
    }
}
