#pragma once

#include <span>
#include <vector>

#include "sdlora/matrix.hpp"
#include "sdlora/rng.hpp"

namespace sdlora {

/// sqrt of the sum of squared entries.
double frobenius_norm(const Matrix& m);

/// Largest singular value by power iteration on m^T m (or m m^T, whichever
/// is smaller). Converged when the relative change of the Rayleigh quotient
/// between successive iterations drops below tol. Throws ConvergenceError
/// carrying the last estimate if max_iter is exhausted.
double operator_norm(const Matrix& m, double tol = 1e-12, int max_iter = 10000);

struct SvdResult {
    Matrix u;               // rows x k, orthonormal columns
    std::vector<double> s;  // nonincreasing
    Matrix v;               // cols x k, orthonormal columns
};

/// Top-k singular triples via one-sided Jacobi. 1 <= k <= min(rows, cols).
SvdResult truncated_svd(const Matrix& m, int k);

struct FullSvd {
    Matrix u;               // rows x rows, orthogonal
    std::vector<double> s;  // length min(rows, cols), nonincreasing
    Matrix v;               // cols x cols, orthogonal
};

/// Complete decomposition; null-space directions are filled in by
/// deterministic Gram-Schmidt against the canonical basis.
FullSvd svd_complete(const Matrix& m);

/// U_k diag(s_k) V_k^T, the best rank-k approximation.
Matrix rank_k_truncation(const Matrix& m, int k);

struct LstSqSolution {
    std::vector<double> coefficients;  // one per basis element
    double residual_norm = 0.0;        // Frobenius norm of the misfit
};

/// Minimizes || target - sum_k c_k basis_k ||_F through the Gram normal
/// equations with ridge regularization. An empty basis yields empty
/// coefficients and residual_norm = ||target||_F. Throws SingularSystemError
/// when the Gram matrix is numerically singular at ridge = 0.
LstSqSolution lstsq_over_basis(std::span<const Matrix> basis, const Matrix& target,
                               double ridge = 1e-10);

/// Entries i.i.d. Normal(0, stddev^2), filled row-major from the stream.
Matrix gaussian_matrix(int rows, int cols, double stddev, RngStream& rng);

/// Incremental operator-norm estimate for a slowly changing matrix. Reuses
/// the previous singular vector as the starting point, so each update needs
/// only a few iterations.
class WarmOperatorNorm {
public:
    double update(const Matrix& m, double tol = 1e-11, int max_iter = 2000);

private:
    std::vector<double> v_;
};

} // namespace sdlora
