#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include <json.hpp>

#include "sdlora/matrix.hpp"

namespace sdlora {

/// Gradient-descent testbed for the two-factor approximation loss
/// 0.5 || A B - target ||_F^2 with small random initialization.
struct FactorizationProblem {
    Matrix target;              // m x n
    int factor_rank = 1;        // r: A is m x r, B is r x n
    double eta = 1e-2;          // step size
    double rho = 1e-4;          // initialization scale
    std::uint64_t seed = 0;
    int max_iters = 200000;
    double tol = 0.05;          // milestone threshold, fraction of sigma_1
    bool record_blocks = false; // per-iteration block diagnostics at j = k_max

    void validate() const;
};

struct BlockDiagnostics {
    double p_op = 0.0;      // || Sigma_j - F F^T + G G^T ||_op
    double q_op = 0.0;      // || F G^T - G F^T ||_op
    double uk_op = 0.0;     // || U K ||_op
    double jv_op = 0.0;     // || J V ||_op
    double jk_op = 0.0;     // || J K - Sigma' ||_op
    double identity_gap = 0.0;  // || (P + Q) - (Sigma_j - U V) ||_op
};

struct TrajectoryRecord {
    std::vector<double> sigma;                 // target singular values, nonincreasing
    std::vector<std::vector<double>> errors;   // [iteration][k-1]: ||AB - trunc_k||_op
    std::vector<int> milestones;               // per k: first iteration within tol, -1 if never
    std::vector<BlockDiagnostics> blocks;      // when recorded, aligned with errors
    bool diverged = false;
    int iters_run = 0;
    Matrix a_final;
    Matrix b_final;

    bool all_milestones_reached() const {
        for (int m : milestones) {
            if (m < 0) return false;
        }
        return true;
    }
};

/// A0 (m x r) and B0 (r x n), entries i.i.d. Normal(0, sigma_1^2) scaled by
/// rho / (3 sqrt(m + n + r)).
std::pair<Matrix, Matrix> init_factors(const FactorizationProblem& p);

/// Simultaneous update from the pre-step factors:
///   A+ = A + eta (target - AB) B^T,   B+ = B + eta A^T (target - AB).
void gd_step(Matrix& a, Matrix& b, const Matrix& target, double eta);

/// Iterates gd_step, recording the operator-norm error against every rank-k
/// truncation of the target (k = 1..k_max) and the first iteration at which
/// each error crosses tol * sigma_1. Stops early once every milestone is
/// reached or the iterates blow up.
TrajectoryRecord run_trajectory(const FactorizationProblem& p, int k_max);

/// Appendix-style block quantities: rotates the factors into the target's
/// singular basis, partitions A = [U; J], B = [V K] at index j and reports
/// operator norms of P, Q, UK, JV, JK - Sigma' together with the identity
/// gap P + Q = Sigma_j - UV.
BlockDiagnostics block_diagnostics(const Matrix& a, const Matrix& b, const Matrix& target,
                                   int j);

nlohmann::json trajectory_summary_json(const TrajectoryRecord& rec, double tol);
void write_trajectory_csv(const TrajectoryRecord& rec, const std::string& path);

} // namespace sdlora
