#include "sdlora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace sdlora {

namespace {

void require_nonempty(const Matrix& m, const char* op) {
    if (m.empty()) throw DimensionError(std::string(op) + ": empty matrix");
}

// y = M x
void matvec(const Matrix& m, const std::vector<double>& x, std::vector<double>& y) {
    const int r = m.rows(), c = m.cols();
    y.assign(r, 0.0);
    const double* p = m.data();
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        const double* row = p + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) s += row[j] * x[j];
        y[i] = s;
    }
}

// y = M^T x
void matvec_t(const Matrix& m, const std::vector<double>& x, std::vector<double>& y) {
    const int r = m.rows(), c = m.cols();
    y.assign(c, 0.0);
    const double* p = m.data();
    for (int i = 0; i < r; ++i) {
        const double xi = x[i];
        if (xi == 0.0) continue;
        const double* row = p + static_cast<std::size_t>(i) * c;
        for (int j = 0; j < c; ++j) y[j] += row[j] * xi;
    }
}

double norm2(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

void seeded_unit_vector(std::vector<double>& v, std::size_t n, std::uint64_t seed) {
    RngStream rng(derive_seed(seed, 0x5eedu));
    v.resize(n);
    for (auto& x : v) x = rng.normal();
    const double nn = norm2(v);
    if (nn > 0) {
        for (auto& x : v) x /= nn;
    } else {
        v.assign(n, 0.0);
        v[0] = 1.0;
    }
}

// Power iteration on m^T m over the right singular vector. Returns sigma_1
// estimate; `v` is the evolving unit vector (resized/seeded when stale).
double power_norm(const Matrix& m, std::vector<double>& v, double tol, int max_iter,
                  bool throw_on_stall) {
    const std::size_t n = static_cast<std::size_t>(m.cols());
    if (v.size() != n) {
        seeded_unit_vector(v, n, static_cast<std::uint64_t>(m.rows()) * 1315423911u + n);
    }
    std::vector<double> w, u;
    double lambda_prev = -1.0;
    double sigma = 0.0;
    for (int it = 0; it < max_iter; ++it) {
        matvec(m, v, w);            // w = M v
        const double lambda = std::inner_product(w.begin(), w.end(), w.begin(), 0.0);
        sigma = std::sqrt(lambda);
        if (lambda == 0.0) {
            // v landed in the null space; reseed once, else the matrix is zero.
            if (it == 0) {
                seeded_unit_vector(v, n, 0x9e3779b9u + it);
                continue;
            }
            return 0.0;
        }
        if (lambda_prev >= 0.0 &&
            std::abs(lambda - lambda_prev) <= tol * std::max(lambda, 1e-300)) {
            return sigma;
        }
        lambda_prev = lambda;
        matvec_t(m, w, u);          // u = M^T w
        const double un = norm2(u);
        if (un == 0.0) return 0.0;
        for (std::size_t i = 0; i < n; ++i) v[i] = u[i] / un;
    }
    if (throw_on_stall) {
        throw ConvergenceError("operator_norm: power iteration did not converge in " +
                                   std::to_string(max_iter) + " iterations",
                               sigma);
    }
    return sigma;
}

constexpr double kJacobiTol = 1e-14;
constexpr int kJacobiMaxSweeps = 60;

// One-sided Jacobi: right-rotates g until its columns are orthogonal,
// accumulating the rotations into v (so g_in = g_out * v^T at exit).
void jacobi_orthogonalize(Matrix& g, Matrix& v) {
    const int rows = g.rows(), n = g.cols();
    for (int sweep = 0; sweep < kJacobiMaxSweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (int i = 0; i < rows; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    alpha += gp * gp;
                    beta += gq * gq;
                    gamma += gp * gq;
                }
                if (std::abs(gamma) <= kJacobiTol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (int i = 0; i < rows; ++i) {
                    const double gp = g(i, p), gq = g(i, q);
                    g(i, p) = cs * gp - sn * gq;
                    g(i, q) = sn * gp + cs * gq;
                }
                for (int i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = cs * vp - sn * vq;
                    v(i, q) = sn * vp + cs * vq;
                }
            }
        }
        if (!rotated) return;
    }
}

// Appends to `cols` (each of length dim) orthonormal vectors completing the
// set, chosen deterministically from the canonical basis.
void gram_schmidt_complete(std::vector<std::vector<double>>& cols, int dim, int want) {
    for (int e = 0; e < dim && static_cast<int>(cols.size()) < want; ++e) {
        std::vector<double> cand(dim, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (const auto& c : cols) {
                double d = std::inner_product(c.begin(), c.end(), cand.begin(), 0.0);
                for (int i = 0; i < dim; ++i) cand[i] -= d * c[i];
            }
        }
        const double n = norm2(cand);
        if (n > 1e-8) {
            for (auto& x : cand) x /= n;
            cols.push_back(std::move(cand));
        }
    }
}

struct SortedJacobi {
    Matrix g;                 // tall orientation, columns orthogonal
    Matrix v;                 // square rotation accumulator
    std::vector<double> sigma;
    std::vector<int> order;   // column indices by nonincreasing sigma
    bool transposed = false;
};

SortedJacobi jacobi_svd(const Matrix& m) {
    SortedJacobi r;
    r.transposed = m.rows() < m.cols();
    r.g = r.transposed ? m.transposed() : m;
    r.v = Matrix::identity(r.g.cols());
    jacobi_orthogonalize(r.g, r.v);
    const int n = r.g.cols();
    r.sigma.resize(n);
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < r.g.rows(); ++i) s += r.g(i, j) * r.g(i, j);
        r.sigma[j] = std::sqrt(s);
    }
    r.order.resize(n);
    std::iota(r.order.begin(), r.order.end(), 0);
    std::stable_sort(r.order.begin(), r.order.end(),
                     [&](int a, int b) { return r.sigma[a] > r.sigma[b]; });
    return r;
}

// Left singular vectors for the chosen columns; zero-sigma columns are
// completed orthonormally.
std::vector<std::vector<double>> left_vectors(const SortedJacobi& j, int k) {
    const int rows = j.g.rows();
    std::vector<std::vector<double>> us;
    us.reserve(k);
    for (int t = 0; t < k; ++t) {
        const int c = j.order[t];
        if (j.sigma[c] > 1e-300) {
            std::vector<double> u(rows);
            for (int i = 0; i < rows; ++i) u[i] = j.g(i, c) / j.sigma[c];
            us.push_back(std::move(u));
        } else {
            gram_schmidt_complete(us, rows, static_cast<int>(us.size()) + 1);
        }
    }
    return us;
}

Matrix columns_to_matrix(const std::vector<std::vector<double>>& cols, int dim) {
    Matrix m(dim, static_cast<int>(cols.size()));
    for (int j = 0; j < static_cast<int>(cols.size()); ++j)
        for (int i = 0; i < dim; ++i) m(i, j) = cols[j][i];
    return m;
}

} // namespace

double frobenius_norm(const Matrix& m) {
    require_nonempty(m, "frobenius_norm");
    double s = 0.0;
    const double* p = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) s += p[i] * p[i];
    return std::sqrt(s);
}

double operator_norm(const Matrix& m, double tol, int max_iter) {
    require_nonempty(m, "operator_norm");
    if (tol <= 0) throw Error("operator_norm: tol must be positive");
    if (max_iter < 1) throw Error("operator_norm: max_iter must be >= 1");
    if (frobenius_norm(m) == 0.0) return 0.0;
    std::vector<double> v;
    return power_norm(m, v, tol, max_iter, /*throw_on_stall=*/true);
}

SvdResult truncated_svd(const Matrix& m, int k) {
    require_nonempty(m, "truncated_svd");
    const int kmax = std::min(m.rows(), m.cols());
    if (k < 1 || k > kmax) {
        throw DimensionError("truncated_svd: k = " + std::to_string(k) +
                             " out of range [1, " + std::to_string(kmax) + "]");
    }
    SortedJacobi j = jacobi_svd(m);

    SvdResult out;
    out.s.resize(k);
    for (int t = 0; t < k; ++t) out.s[t] = j.sigma[j.order[t]];

    auto us = left_vectors(j, k);
    std::vector<std::vector<double>> vs;
    vs.reserve(k);
    for (int t = 0; t < k; ++t) {
        const int c = j.order[t];
        std::vector<double> col(j.v.rows());
        for (int i = 0; i < j.v.rows(); ++i) col[i] = j.v(i, c);
        vs.push_back(std::move(col));
    }

    Matrix left = columns_to_matrix(us, j.g.rows());
    Matrix right = columns_to_matrix(vs, j.v.rows());
    if (j.transposed) std::swap(left, right);
    out.u = std::move(left);
    out.v = std::move(right);
    return out;
}

FullSvd svd_complete(const Matrix& m) {
    require_nonempty(m, "svd_complete");
    SortedJacobi j = jacobi_svd(m);
    const int n = j.g.cols();   // small side
    const int rows = j.g.rows();

    FullSvd out;
    out.s.resize(n);
    for (int t = 0; t < n; ++t) out.s[t] = j.sigma[j.order[t]];

    auto us = left_vectors(j, n);
    gram_schmidt_complete(us, rows, rows);

    std::vector<std::vector<double>> vs;
    vs.reserve(n);
    for (int t = 0; t < n; ++t) {
        const int c = j.order[t];
        std::vector<double> col(n);
        for (int i = 0; i < n; ++i) col[i] = j.v(i, c);
        vs.push_back(std::move(col));
    }

    Matrix left = columns_to_matrix(us, rows);
    Matrix right = columns_to_matrix(vs, n);
    if (j.transposed) std::swap(left, right);
    out.u = std::move(left);
    out.v = std::move(right);
    return out;
}

Matrix rank_k_truncation(const Matrix& m, int k) {
    SvdResult svd = truncated_svd(m, k);
    Matrix us = svd.u;
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < us.rows(); ++i) us(i, j) *= svd.s[j];
    return matmul(us, svd.v.transposed());
}

LstSqSolution lstsq_over_basis(std::span<const Matrix> basis, const Matrix& target,
                               double ridge) {
    require_nonempty(target, "lstsq_over_basis");
    if (ridge < 0) throw Error("lstsq_over_basis: ridge must be nonnegative");
    LstSqSolution sol;
    if (basis.empty()) {
        sol.residual_norm = frobenius_norm(target);
        return sol;
    }
    const int n = static_cast<int>(basis.size());
    for (const Matrix& b : basis) {
        if (!b.same_shape(target)) {
            throw DimensionError("lstsq_over_basis: basis element shape differs from target");
        }
    }

    // Gram normal equations with ridge regularization.
    std::vector<double> gram(static_cast<std::size_t>(n) * n);
    std::vector<double> rhs(n);
    for (int i = 0; i < n; ++i) {
        for (int j = i; j < n; ++j) {
            const double d = frobenius_dot(basis[i], basis[j]);
            gram[static_cast<std::size_t>(i) * n + j] = d;
            gram[static_cast<std::size_t>(j) * n + i] = d;
        }
        gram[static_cast<std::size_t>(i) * n + i] += ridge;
        rhs[i] = frobenius_dot(basis[i], target);
    }

    // Cholesky; the Gram matrix is PSD, so a vanishing pivot means rank
    // deficiency rather than indefiniteness.
    double max_diag = 0.0;
    for (int i = 0; i < n; ++i)
        max_diag = std::max(max_diag, gram[static_cast<std::size_t>(i) * n + i]);
    std::vector<double> chol(gram);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j <= i; ++j) {
            double s = chol[static_cast<std::size_t>(i) * n + j];
            for (int p = 0; p < j; ++p)
                s -= chol[static_cast<std::size_t>(i) * n + p] *
                     chol[static_cast<std::size_t>(j) * n + p];
            if (i == j) {
                if (s <= 1e-13 * std::max(max_diag, 1e-300)) {
                    throw SingularSystemError(
                        "lstsq_over_basis: Gram matrix numerically singular; "
                        "retry with a positive ridge");
                }
                chol[static_cast<std::size_t>(i) * n + i] = std::sqrt(s);
            } else {
                chol[static_cast<std::size_t>(i) * n + j] =
                    s / chol[static_cast<std::size_t>(j) * n + j];
            }
        }
    }
    // Forward then backward substitution.
    std::vector<double> y(n), c(n);
    for (int i = 0; i < n; ++i) {
        double s = rhs[i];
        for (int p = 0; p < i; ++p) s -= chol[static_cast<std::size_t>(i) * n + p] * y[p];
        y[i] = s / chol[static_cast<std::size_t>(i) * n + i];
    }
    for (int i = n - 1; i >= 0; --i) {
        double s = y[i];
        for (int p = i + 1; p < n; ++p) s -= chol[static_cast<std::size_t>(p) * n + i] * c[p];
        c[i] = s / chol[static_cast<std::size_t>(i) * n + i];
    }

    Matrix misfit = target;
    for (int i = 0; i < n; ++i) misfit.add_scaled(basis[i], -c[i]);
    sol.coefficients = std::move(c);
    sol.residual_norm = frobenius_norm(misfit);
    return sol;
}

Matrix gaussian_matrix(int rows, int cols, double stddev, RngStream& rng) {
    if (stddev < 0) throw Error("gaussian_matrix: stddev must be nonnegative");
    Matrix m(rows, cols);
    double* p = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) p[i] = rng.normal(0.0, stddev);
    return m;
}

double WarmOperatorNorm::update(const Matrix& m, double tol, int max_iter) {
    if (frobenius_norm(m) == 0.0) return 0.0;
    return power_norm(m, v_, tol, max_iter, /*throw_on_stall=*/false);
}

} // namespace sdlora
