#include "sdlora/factorization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sdlora/errors.hpp"
#include "sdlora/linalg.hpp"
#include "sdlora/rng.hpp"

namespace sdlora {

namespace {

Matrix truncation_from(const FullSvd& svd, int k) {
    const int m = svd.u.rows();
    const int n = svd.v.rows();
    Matrix us(m, k);
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < m; ++i) us(i, j) = svd.u(i, j) * svd.s[j];
    Matrix vt(k, n);
    for (int j = 0; j < k; ++j)
        for (int i = 0; i < n; ++i) vt(j, i) = svd.v(i, j);
    return matmul(us, vt);
}

Matrix slice_rows(const Matrix& m, int lo, int hi) {
    Matrix out(hi - lo, m.cols());
    for (int i = lo; i < hi; ++i)
        for (int j = 0; j < m.cols(); ++j) out(i - lo, j) = m(i, j);
    return out;
}

Matrix slice_cols(const Matrix& m, int lo, int hi) {
    Matrix out(m.rows(), hi - lo);
    for (int i = 0; i < m.rows(); ++i)
        for (int j = lo; j < hi; ++j) out(i, j - lo) = m(i, j);
    return out;
}

} // namespace

void FactorizationProblem::validate() const {
    if (target.empty()) throw ConfigError("factorization: empty target");
    if (factor_rank < 1 || factor_rank > std::min(target.rows(), target.cols())) {
        throw ConfigError("factorization: factor rank outside [1, min(m, n)]");
    }
    if (eta <= 0) throw ConfigError("factorization: eta must be positive");
    if (rho <= 0) throw ConfigError("factorization: rho must be positive");
    if (max_iters < 1) throw ConfigError("factorization: max_iters must be >= 1");
    if (tol <= 0) throw ConfigError("factorization: tol must be positive");
}

std::pair<Matrix, Matrix> init_factors(const FactorizationProblem& p) {
    p.validate();
    const int m = p.target.rows();
    const int n = p.target.cols();
    const int r = p.factor_rank;
    const double sigma1 = operator_norm(p.target, 1e-12, 20000);
    const double stddev = sigma1 * p.rho / (3.0 * std::sqrt(static_cast<double>(m + n + r)));
    RngStream rng(p.seed);
    Matrix a = gaussian_matrix(m, r, stddev, rng);
    Matrix b = gaussian_matrix(r, n, stddev, rng);
    return {std::move(a), std::move(b)};
}

void gd_step(Matrix& a, Matrix& b, const Matrix& target, double eta) {
    if (a.cols() != b.rows() || a.rows() != target.rows() || b.cols() != target.cols()) {
        throw DimensionError("gd_step: inconsistent factor/target shapes");
    }
    Matrix err = target;
    Matrix ab = matmul(a, b);
    err.add_scaled(ab, -1.0);
    Matrix a_next = a;
    Matrix b_next = b;
    // both updates read the pre-step factors
    Matrix ebt = matmul(err, b.transposed());
    Matrix ate = matmul(a.transposed(), err);
    a_next.add_scaled(ebt, eta);
    b_next.add_scaled(ate, eta);
    a = std::move(a_next);
    b = std::move(b_next);
}

TrajectoryRecord run_trajectory(const FactorizationProblem& p, int k_max) {
    p.validate();
    const int kcap = std::min({p.factor_rank, p.target.rows(), p.target.cols()});
    if (k_max < 1 || k_max > kcap) {
        throw ConfigError("run_trajectory: k_max outside [1, min(r, m, n)]");
    }

    FullSvd svd = svd_complete(p.target);
    TrajectoryRecord rec;
    rec.sigma = svd.s;
    const double sigma1 = svd.s.empty() ? 0.0 : svd.s[0];
    if (sigma1 <= 0) throw ConfigError("run_trajectory: target is zero");
    const double threshold = p.tol * sigma1;

    std::vector<Matrix> truncations;
    truncations.reserve(k_max);
    for (int k = 1; k <= k_max; ++k) truncations.push_back(truncation_from(svd, k));

    auto [a, b] = init_factors(p);
    rec.milestones.assign(k_max, -1);
    std::vector<WarmOperatorNorm> trackers(k_max);

    const double blowup = 100.0 * sigma1 * std::sqrt(static_cast<double>(
                              std::min(p.target.rows(), p.target.cols())));

    for (int iter = 0; iter <= p.max_iters; ++iter) {
        Matrix ab = matmul(a, b);
        if (!ab.all_finite() || frobenius_norm(ab) > blowup) {
            rec.diverged = true;
            break;
        }
        std::vector<double> row(k_max);
        for (int k = 0; k < k_max; ++k) {
            Matrix diff = ab;
            diff.add_scaled(truncations[k], -1.0);
            row[k] = trackers[k].update(diff);
            if (rec.milestones[k] < 0 && row[k] <= threshold) rec.milestones[k] = iter;
        }
        if (p.record_blocks) {
            rec.blocks.push_back(block_diagnostics(a, b, p.target, k_max));
        }
        rec.errors.push_back(std::move(row));
        rec.iters_run = iter;
        if (rec.all_milestones_reached()) break;
        if (iter == p.max_iters) break;
        gd_step(a, b, p.target, p.eta);
    }
    rec.a_final = std::move(a);
    rec.b_final = std::move(b);
    return rec;
}

BlockDiagnostics block_diagnostics(const Matrix& a, const Matrix& b, const Matrix& target,
                                   int j) {
    const int m = target.rows();
    const int n = target.cols();
    const int r = a.cols();
    if (a.rows() != m || b.cols() != n || b.rows() != r) {
        throw DimensionError("block_diagnostics: inconsistent shapes");
    }
    if (j < 1 || j > std::min({r, m, n})) {
        throw DimensionError("block_diagnostics: j outside [1, min(r, m, n)]");
    }

    FullSvd svd = svd_complete(target);
    Matrix a_rot = matmul(svd.u.transposed(), a);  // m x r
    Matrix b_rot = matmul(b, svd.v);               // r x n

    Matrix u = slice_rows(a_rot, 0, j);            // j x r
    Matrix v = slice_cols(b_rot, 0, j);            // r x j
    Matrix f = u;                                   // (U + V^T) / 2
    f.add_scaled(v.transposed(), 1.0);
    f *= 0.5;
    Matrix g = u;                                   // (U - V^T) / 2
    g.add_scaled(v.transposed(), -1.0);
    g *= 0.5;

    Matrix sigma_j(j, j);
    for (int i = 0; i < j; ++i) sigma_j(i, i) = svd.s[i];

    Matrix p_mat = sigma_j;
    p_mat.add_scaled(matmul(f, f.transposed()), -1.0);
    p_mat.add_scaled(matmul(g, g.transposed()), 1.0);
    Matrix q_mat = matmul(f, g.transposed());
    q_mat.add_scaled(matmul(g, f.transposed()), -1.0);

    BlockDiagnostics d;
    d.p_op = operator_norm(p_mat, 1e-11, 20000);
    d.q_op = frobenius_norm(q_mat) == 0.0 ? 0.0 : operator_norm(q_mat, 1e-11, 20000);

    Matrix identity_gap = p_mat;
    identity_gap.add_scaled(q_mat, 1.0);
    identity_gap.add_scaled(sigma_j, -1.0);
    matmul_add(u, v, identity_gap);  // (P + Q) - Sigma_j + U V
    d.identity_gap = frobenius_norm(identity_gap) == 0.0
                         ? 0.0
                         : operator_norm(identity_gap, 1e-11, 20000);

    if (j < m && j < n) {
        Matrix k_blk = slice_cols(b_rot, j, n);    // r x (n - j)
        Matrix j_blk = slice_rows(a_rot, j, m);    // (m - j) x r
        Matrix uk = matmul(u, k_blk);
        Matrix jv = matmul(j_blk, v);
        d.uk_op = frobenius_norm(uk) == 0.0 ? 0.0 : operator_norm(uk, 1e-11, 20000);
        d.jv_op = frobenius_norm(jv) == 0.0 ? 0.0 : operator_norm(jv, 1e-11, 20000);
        Matrix jk = matmul(j_blk, k_blk);
        const int tail = static_cast<int>(svd.s.size());
        for (int i = 0; i + j < tail && i < jk.rows() && i < jk.cols(); ++i) {
            jk(i, i) -= svd.s[i + j];
        }
        d.jk_op = frobenius_norm(jk) == 0.0 ? 0.0 : operator_norm(jk, 1e-11, 20000);
    }
    return d;
}

nlohmann::json trajectory_summary_json(const TrajectoryRecord& rec, double tol) {
    nlohmann::json j;
    j["schema_version"] = 1;
    j["sigma"] = rec.sigma;
    j["tol"] = tol;
    j["milestones"] = rec.milestones;
    j["diverged"] = rec.diverged;
    j["iters_run"] = rec.iters_run;
    bool ordered = rec.all_milestones_reached();
    for (std::size_t k = 1; ordered && k < rec.milestones.size(); ++k) {
        ordered = rec.milestones[k - 1] <= rec.milestones[k];
    }
    j["ordered"] = ordered;
    if (!rec.errors.empty()) j["final_errors"] = rec.errors.back();
    return j;
}

void write_trajectory_csv(const TrajectoryRecord& rec, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot open " + path);
    out << "iteration";
    for (std::size_t k = 0; k < rec.milestones.size(); ++k) out << ",err_k" << (k + 1);
    if (!rec.blocks.empty()) out << ",p_op,q_op,uk_op,jv_op,jk_op";
    out << "\n";
    for (std::size_t i = 0; i < rec.errors.size(); ++i) {
        out << i;
        for (double e : rec.errors[i]) out << "," << e;
        if (!rec.blocks.empty()) {
            const BlockDiagnostics& bd = rec.blocks[i];
            out << "," << bd.p_op << "," << bd.q_op << "," << bd.uk_op << "," << bd.jv_op
                << "," << bd.jk_op;
        }
        out << "\n";
    }
}

} // namespace sdlora
