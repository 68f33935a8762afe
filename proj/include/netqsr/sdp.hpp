#pragma once

// =============================================================================
// Native semidefinite feasibility solver
// =============================================================================
// Solves   min c'x   s.t.  F_l(x) = F_l0 + sum_k x_k F_lk  >= 0  (per block),
//                          E x = f,
// for the small dense problems the certification steps produce (tens of
// variables, blocks of dimension <= ~30). Equalities are eliminated through
// a nullspace parametrization; a phase-1 barrier maximizes the common
// normalized margin t (deciding feasibility), and a phase-2 barrier
// minimizes the objective over a margin-floored interior so returned points
// keep a healthy distance from the boundary. Deterministic throughout.
// =============================================================================

#include "netqsr/linalg.hpp"

#include <map>
#include <string>
#include <utility>
#include <vector>

namespace netqsr {

// =============================================================================
// Affine matrix expressions
// =============================================================================

class VariablePool {
public:
    [[nodiscard]] int allocate(int count = 1) {
        int first = count_;
        count_ += count;
        return first;
    }
    [[nodiscard]] int size() const { return count_; }

private:
    int count_ = 0;
};

/// Matrix-valued affine expression constant + sum_k x_k coeff_k.
struct AffineMatrix {
    int rows = 0, cols = 0;
    Matrix constant;
    std::map<int, Matrix> coeffs;

    AffineMatrix() = default;
    AffineMatrix(int r, int c) : rows(r), cols(c), constant(Matrix::Zero(r, c)) {}

    static AffineMatrix of_constant(const Matrix& m) {
        AffineMatrix out(static_cast<int>(m.rows()), static_cast<int>(m.cols()));
        out.constant = m;
        return out;
    }

    /// Fresh fully-free matrix variable.
    static AffineMatrix variable(VariablePool& pool, int r, int c) {
        AffineMatrix out(r, c);
        int base = pool.allocate(r * c);
        for (int i = 0; i < r; ++i) {
            for (int j = 0; j < c; ++j) {
                Matrix e = Matrix::Zero(r, c);
                e(i, j) = 1.0;
                out.coeffs[base + i * c + j] = e;
            }
        }
        return out;
    }

    /// Fresh symmetric matrix variable (packed lower-triangular storage).
    static AffineMatrix variable_symmetric(VariablePool& pool, int n) {
        AffineMatrix out(n, n);
        int base = pool.allocate(n * (n + 1) / 2);
        int k = 0;
        for (int i = 0; i < n; ++i) {
            for (int j = 0; j <= i; ++j) {
                Matrix e = Matrix::Zero(n, n);
                e(i, j) = 1.0;
                e(j, i) = 1.0;
                out.coeffs[base + k] = e;
                ++k;
            }
        }
        return out;
    }

    /// Fresh scalar variable times a fixed matrix (e.g. g * I).
    static AffineMatrix variable_scaled(VariablePool& pool, const Matrix& base_matrix) {
        AffineMatrix out(static_cast<int>(base_matrix.rows()), static_cast<int>(base_matrix.cols()));
        out.coeffs[pool.allocate(1)] = base_matrix;
        return out;
    }

    [[nodiscard]] Matrix eval(const Vector& x) const {
        Matrix out = constant;
        for (const auto& [k, coeff] : coeffs) {
            out += x(k) * coeff;
        }
        return out;
    }

    [[nodiscard]] AffineMatrix transpose() const {
        AffineMatrix out(cols, rows);
        out.constant = constant.transpose();
        for (const auto& [k, coeff] : coeffs) {
            out.coeffs[k] = coeff.transpose();
        }
        return out;
    }

    [[nodiscard]] AffineMatrix scaled(double s) const {
        AffineMatrix out = *this;
        out.constant *= s;
        for (auto& [k, coeff] : out.coeffs) {
            coeff *= s;
        }
        return out;
    }

    AffineMatrix& operator+=(const AffineMatrix& other) {
        constant += other.constant;
        for (const auto& [k, coeff] : other.coeffs) {
            auto it = coeffs.find(k);
            if (it == coeffs.end()) {
                coeffs[k] = coeff;
            } else {
                it->second += coeff;
            }
        }
        return *this;
    }

    [[nodiscard]] AffineMatrix operator+(const AffineMatrix& other) const {
        AffineMatrix out = *this;
        out += other;
        return out;
    }

    [[nodiscard]] AffineMatrix operator-(const AffineMatrix& other) const {
        return *this + other.scaled(-1.0);
    }

    friend AffineMatrix operator*(const Matrix& lhs, const AffineMatrix& rhs) {
        AffineMatrix out(static_cast<int>(lhs.rows()), rhs.cols);
        out.constant = lhs * rhs.constant;
        for (const auto& [k, coeff] : rhs.coeffs) {
            out.coeffs[k] = lhs * coeff;
        }
        return out;
    }

    friend AffineMatrix operator*(const AffineMatrix& lhs, const Matrix& rhs) {
        AffineMatrix out(lhs.rows, static_cast<int>(rhs.cols()));
        out.constant = lhs.constant * rhs;
        for (const auto& [k, coeff] : lhs.coeffs) {
            out.coeffs[k] = coeff * rhs;
        }
        return out;
    }

    /// Adds `part` into this expression at block position (r0, c0).
    void add_block(int r0, int c0, const AffineMatrix& part) {
        constant.block(r0, c0, part.rows, part.cols) += part.constant;
        for (const auto& [k, coeff] : part.coeffs) {
            auto it = coeffs.find(k);
            if (it == coeffs.end()) {
                coeffs[k] = Matrix::Zero(rows, cols);
                it = coeffs.find(k);
            }
            it->second.block(r0, c0, part.rows, part.cols) += coeff;
        }
    }

    [[nodiscard]] AffineMatrix symmetrized_expr() const {
        return (*this + this->transpose()).scaled(0.5);
    }
};

// =============================================================================
// Problem / result types
// =============================================================================

struct SdpProblem {
    int num_vars = 0;
    Vector objective;                     // min objective' x; empty means pure feasibility
    std::vector<AffineMatrix> constraints; // each must be >= 0 (square symmetric exprs)
    std::vector<AffineMatrix> equalities;  // each must be == 0 elementwise

    void add_psd(const AffineMatrix& expr) { constraints.push_back(expr.symmetrized_expr()); }
    void add_zero(const AffineMatrix& expr) { equalities.push_back(expr); }
};

struct SdpOptions {
    double margin_goal = 5e-2;      // phase-1 early exit at this normalized margin
    double margin_cap = 10.0;
    double interior_fraction = 0.5; // phase-2 margin floor as fraction of attained margin
    /// After minimizing the objective, margins are re-maximized subject to
    /// objective <= optimum + budget; returned points are as well-centered
    /// as the objective budget allows.
    double objective_budget_rel = 0.05;
    double polish_goal = 0.4;
    int max_outer = 60;
    int max_newton = 60;
    double mu_shrink = 0.2;
    double newton_tol = 1e-11;
    double drift_regularization = 1e-10;
};

struct SdpSolution {
    enum class Status { Feasible, Infeasible, NumericalFailure };
    Status status = Status::NumericalFailure;
    Vector x;
    double margin = 0.0; // attained normalized phase-1 margin
    int newton_iterations = 0;
    std::string detail;

    [[nodiscard]] bool feasible() const { return status == Status::Feasible; }
};

// =============================================================================
// Solver internals
// =============================================================================

namespace sdp_detail {

struct ReducedBlock {
    Matrix constant;            // after substituting x = x0 + N xi, normalized
    std::vector<Matrix> coeffs; // one per reduced variable
    int dim = 0;
};

struct BarrierState {
    std::vector<ReducedBlock> blocks;
    int dim = 0; // number of reduced variables

    /// Gradient of the trace tether sum_l tr(A_l(xi)).
    [[nodiscard]] Vector tether_gradient() const {
        Vector g = Vector::Zero(dim);
        for (const auto& blk : blocks) {
            for (int j = 0; j < dim; ++j) {
                if (blk.coeffs[static_cast<std::size_t>(j)].size() > 0) {
                    g(j) += blk.coeffs[static_cast<std::size_t>(j)].trace();
                }
            }
        }
        return g;
    }
};

inline bool cholesky_all(const BarrierState& st, const Vector& xi, double shift,
                         std::vector<Eigen::LLT<Matrix>>& out) {
    out.clear();
    out.reserve(st.blocks.size());
    for (const auto& blk : st.blocks) {
        Matrix A = blk.constant;
        for (int j = 0; j < st.dim; ++j) {
            if (blk.coeffs[static_cast<std::size_t>(j)].size() > 0 && xi(j) != 0.0) {
                A += xi(j) * blk.coeffs[static_cast<std::size_t>(j)];
            }
        }
        if (shift != 0.0) {
            A -= shift * Matrix::Identity(blk.dim, blk.dim);
        }
        Eigen::LLT<Matrix> llt(A);
        if (llt.info() != Eigen::Success) {
            return false;
        }
        out.push_back(std::move(llt));
    }
    return true;
}

/// Tethered barrier -logdet(A) + tr(A) per block: bounded below with its
/// minimum near A = I, so the centering subproblems cannot run away along
/// directions that merely inflate a block.
inline double barrier_value(const std::vector<Eigen::LLT<Matrix>>& llts) {
    double value = 0.0;
    for (const auto& llt : llts) {
        Matrix L = llt.matrixL();
        for (Eigen::Index i = 0; i < L.rows(); ++i) {
            value -= 2.0 * std::log(L(i, i));
        }
        value += L.squaredNorm(); // tr(A) = ||L||_F^2
    }
    return value;
}

/// Gradient and Hessian of -sum logdet(A_l(xi) - shift I).
inline void barrier_derivatives(const BarrierState& st,
                                const std::vector<Eigen::LLT<Matrix>>& llts, Vector& grad,
                                Matrix& hess) {
    grad = Vector::Zero(st.dim);
    hess = Matrix::Zero(st.dim, st.dim);
    for (std::size_t l = 0; l < st.blocks.size(); ++l) {
        const auto& blk = st.blocks[l];
        const auto& llt = llts[l];
        std::vector<Matrix> whitened(static_cast<std::size_t>(st.dim));
        for (int j = 0; j < st.dim; ++j) {
            const Matrix& Fj = blk.coeffs[static_cast<std::size_t>(j)];
            if (Fj.size() == 0) continue;
            Matrix W = llt.matrixL().solve(Fj);
            W = llt.matrixL().solve(W.transpose()); // L^-1 F L^-T (symmetric)
            whitened[static_cast<std::size_t>(j)] = W;
            grad(j) -= W.trace();
        }
        for (int j = 0; j < st.dim; ++j) {
            if (whitened[static_cast<std::size_t>(j)].size() == 0) continue;
            for (int k = j; k < st.dim; ++k) {
                if (whitened[static_cast<std::size_t>(k)].size() == 0) continue;
                double v = whitened[static_cast<std::size_t>(j)]
                               .cwiseProduct(whitened[static_cast<std::size_t>(k)])
                               .sum();
                hess(j, k) += v;
                if (k != j) hess(k, j) += v;
            }
        }
    }
}

/// Newton minimization of c'xi / mu - sum logdet(A_l(xi)) for a fixed mu.
/// Returns false on an unrecoverable numerical problem.
inline bool center(const BarrierState& st, const Vector& c_over_mu, Vector& xi, int max_newton,
                   double newton_tol, double reg, int& newton_count) {
    std::vector<Eigen::LLT<Matrix>> llts;
    if (!cholesky_all(st, xi, 0.0, llts)) {
        return false;
    }
    const Vector tether = st.tether_gradient();
    for (int it = 0; it < max_newton; ++it) {
        Vector grad;
        Matrix hess;
        barrier_derivatives(st, llts, grad, hess);
        grad += tether;
        grad += c_over_mu;
        grad += 2.0 * reg * xi;
        hess += 2.0 * reg * Matrix::Identity(st.dim, st.dim);

        Vector step;
        double ridge = 0.0;
        for (int attempt = 0; attempt < 8; ++attempt) {
            Eigen::LDLT<Matrix> ldlt(hess + ridge * Matrix::Identity(st.dim, st.dim));
            if (ldlt.info() == Eigen::Success) {
                step = ldlt.solve(-grad);
                if (step.allFinite()) break;
            }
            ridge = ridge == 0.0 ? 1e-12 * (1.0 + hess.trace()) : ridge * 100.0;
            step.resize(0);
        }
        if (step.size() == 0) {
            return false;
        }

        double decrement = -grad.dot(step);
        if (decrement * 0.5 < newton_tol) {
            return true;
        }

        double phi0 = barrier_value(llts) + c_over_mu.dot(xi) + reg * xi.squaredNorm();
        double alpha = 1.0;
        bool moved = false;
        std::vector<Eigen::LLT<Matrix>> trial_llts;
        while (alpha > 1e-16) {
            Vector trial = xi + alpha * step;
            if (cholesky_all(st, trial, 0.0, trial_llts)) {
                double phi = barrier_value(trial_llts) + c_over_mu.dot(trial) +
                             reg * trial.squaredNorm();
                if (phi <= phi0 - 1e-4 * alpha * decrement) {
                    xi = trial;
                    llts = std::move(trial_llts);
                    moved = true;
                    break;
                }
            }
            alpha *= 0.5;
        }
        ++newton_count;
        if (!moved) {
            return true; // stalled at (numerical) optimum for this mu
        }
    }
    return true;
}

} // namespace sdp_detail

// =============================================================================
// solve_sdp
// =============================================================================

[[nodiscard]] inline SdpSolution solve_sdp(const SdpProblem& problem, const SdpOptions& opt = {}) {
    SdpSolution sol;
    const int n = problem.num_vars;

    // ---- flatten equalities into E x = f and eliminate them -----------------
    int eq_rows = 0;
    for (const auto& eq : problem.equalities) {
        eq_rows += eq.rows * eq.cols;
    }
    Vector x0 = Vector::Zero(n);
    Matrix null_basis = Matrix::Identity(n, n);
    if (eq_rows > 0) {
        Matrix E = Matrix::Zero(eq_rows, n);
        Vector f = Vector::Zero(eq_rows);
        int row = 0;
        for (const auto& eq : problem.equalities) {
            for (int i = 0; i < eq.rows; ++i) {
                for (int j = 0; j < eq.cols; ++j) {
                    f(row) = -eq.constant(i, j);
                    for (const auto& [k, coeff] : eq.coeffs) {
                        E(row, k) = coeff(i, j);
                    }
                    ++row;
                }
            }
        }
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(E);
        x0 = cod.solve(f);
        if ((E * x0 - f).norm() > 1e-8 * (1.0 + f.norm())) {
            sol.status = SdpSolution::Status::Infeasible;
            sol.detail = "equality constraints are inconsistent";
            return sol;
        }
        Eigen::FullPivLU<Matrix> lu(E);
        lu.setThreshold(1e-10);
        null_basis = lu.kernel();
        if (null_basis.cols() == 1 && null_basis.norm() == 0.0) {
            null_basis = Matrix::Zero(n, 0); // unique solution, nothing free
        }
    }
    const int m = static_cast<int>(null_basis.cols());

    // ---- reduce constraint blocks to xi-space and normalize them ------------
    sdp_detail::BarrierState state;
    state.dim = m;
    for (const auto& con : problem.constraints) {
        if (con.rows == 0) continue;
        sdp_detail::ReducedBlock blk;
        blk.dim = con.rows;
        blk.constant = con.eval(x0);
        blk.coeffs.assign(static_cast<std::size_t>(m), Matrix());
        for (int j = 0; j < m; ++j) {
            Matrix cj = Matrix::Zero(con.rows, con.cols);
            bool nonzero = false;
            for (const auto& [k, coeff] : con.coeffs) {
                double w = null_basis(k, j);
                if (w != 0.0) {
                    cj += w * coeff;
                    nonzero = true;
                }
            }
            if (nonzero && cj.norm() > 0.0) {
                blk.coeffs[static_cast<std::size_t>(j)] = cj;
            }
        }
        double scale = std::max(1.0, blk.constant.norm());
        for (const auto& cj : blk.coeffs) {
            if (cj.size() > 0) scale = std::max(scale, cj.norm());
        }
        blk.constant /= scale;
        for (auto& cj : blk.coeffs) {
            if (cj.size() > 0) cj /= scale;
        }
        state.blocks.push_back(std::move(blk));
    }

    if (state.blocks.empty()) {
        sol.status = SdpSolution::Status::Feasible;
        sol.x = x0;
        sol.margin = opt.margin_cap;
        return sol;
    }

    Vector xi = Vector::Zero(m);

    // ---- phase 1: maximize the common margin t ------------------------------
    // Augment with variable t: blocks A_l(xi) - t I >= 0 and t <= cap.
    {
        sdp_detail::BarrierState ph1;
        ph1.dim = m + 1;
        for (const auto& blk : state.blocks) {
            sdp_detail::ReducedBlock aug;
            aug.dim = blk.dim;
            aug.constant = blk.constant;
            aug.coeffs = blk.coeffs;
            aug.coeffs.push_back(-Matrix::Identity(blk.dim, blk.dim));
            ph1.blocks.push_back(std::move(aug));
        }
        sdp_detail::ReducedBlock cap;
        cap.dim = 1;
        cap.constant = Matrix::Constant(1, 1, opt.margin_cap);
        cap.coeffs.assign(static_cast<std::size_t>(m), Matrix());
        cap.coeffs.push_back(-Matrix::Identity(1, 1));
        ph1.blocks.push_back(std::move(cap));

        double t0 = std::numeric_limits<double>::infinity();
        for (const auto& blk : state.blocks) {
            t0 = std::min(t0, min_eigenvalue(blk.constant));
        }
        t0 = std::min(t0 - 1.0, opt.margin_cap - 1.0);

        Vector z = Vector::Zero(m + 1);
        z(m) = t0;
        Vector cost = Vector::Zero(m + 1);
        cost(m) = -1.0; // maximize t

        double mu = std::max(1.0, std::abs(t0));
        for (int outer = 0; outer < opt.max_outer; ++outer) {
            if (!sdp_detail::center(ph1, Vector(cost / mu), z, opt.max_newton, opt.newton_tol,
                                    opt.drift_regularization, sol.newton_iterations)) {
                sol.status = SdpSolution::Status::NumericalFailure;
                sol.detail = "phase-1 centering failed";
                return sol;
            }
            if (z(m) >= opt.margin_goal) {
                break; // comfortably feasible
            }
            mu *= opt.mu_shrink;
            if (mu < 1e-12 * std::max(1.0, std::abs(z(m)))) {
                break;
            }
        }
        sol.margin = z(m);
        if (sol.margin <= 0.0) {
            sol.status = SdpSolution::Status::Infeasible;
            sol.detail = "phase-1 margin " + std::to_string(sol.margin);
            sol.x = x0 + null_basis * z.head(m);
            return sol;
        }
        xi = z.head(m);
    }

    // ---- phase 2: minimize the objective over a margin-floored interior -----
    Vector c_reduced = Vector::Zero(m);
    if (problem.objective.size() == n) {
        c_reduced = null_basis.transpose() * problem.objective;
    }
    if (c_reduced.norm() > 0.0 && m > 0) {
        const double floor = opt.interior_fraction * std::min(sol.margin, opt.margin_goal);
        sdp_detail::BarrierState ph2;
        ph2.dim = m;
        for (const auto& blk : state.blocks) {
            sdp_detail::ReducedBlock shifted = blk;
            shifted.constant -= floor * Matrix::Identity(blk.dim, blk.dim);
            ph2.blocks.push_back(std::move(shifted));
        }
        double total_dim = 0;
        for (const auto& blk : ph2.blocks) total_dim += blk.dim;

        Vector best = xi;
        double mu = std::max(1.0, std::abs(c_reduced.dot(xi))) / std::max(1.0, total_dim);
        for (int outer = 0; outer < opt.max_outer; ++outer) {
            if (!sdp_detail::center(ph2, Vector(c_reduced / mu), xi, opt.max_newton,
                                    opt.newton_tol, opt.drift_regularization,
                                    sol.newton_iterations)) {
                xi = best; // keep the last good point
                break;
            }
            best = xi;
            mu *= opt.mu_shrink;
            // stop once the barrier suboptimality is negligible at the
            // objective's current scale
            if (mu * total_dim < 1e-9 * std::max(1.0, std::abs(c_reduced.dot(xi)))) {
                break;
            }
        }
        xi = best;

        // ---- phase 3: re-maximize the margin within the objective budget ----
        double margin_now = std::numeric_limits<double>::infinity();
        for (const auto& blk : state.blocks) {
            Matrix A = blk.constant;
            for (int j = 0; j < m; ++j) {
                if (blk.coeffs[static_cast<std::size_t>(j)].size() > 0) {
                    A += xi(j) * blk.coeffs[static_cast<std::size_t>(j)];
                }
            }
            margin_now = std::min(margin_now, min_eigenvalue(A));
        }
        const double c_star = c_reduced.dot(xi);
        const double budget = opt.objective_budget_rel * (1.0 + std::abs(c_star));

        sdp_detail::BarrierState ph3;
        ph3.dim = m + 1;
        for (const auto& blk : state.blocks) {
            sdp_detail::ReducedBlock aug;
            aug.dim = blk.dim;
            aug.constant = blk.constant;
            aug.coeffs = blk.coeffs;
            aug.coeffs.push_back(-Matrix::Identity(blk.dim, blk.dim));
            ph3.blocks.push_back(std::move(aug));
        }
        {
            sdp_detail::ReducedBlock budget_blk; // c'xi <= c* + budget
            budget_blk.dim = 1;
            budget_blk.constant = Matrix::Constant(1, 1, c_star + budget);
            budget_blk.coeffs.assign(static_cast<std::size_t>(m + 1), Matrix());
            for (int j = 0; j < m; ++j) {
                if (c_reduced(j) != 0.0) {
                    budget_blk.coeffs[static_cast<std::size_t>(j)] =
                        Matrix::Constant(1, 1, -c_reduced(j));
                }
            }
            ph3.blocks.push_back(std::move(budget_blk));

            sdp_detail::ReducedBlock cap_blk; // t <= cap
            cap_blk.dim = 1;
            cap_blk.constant = Matrix::Constant(1, 1, opt.margin_cap);
            cap_blk.coeffs.assign(static_cast<std::size_t>(m + 1), Matrix());
            cap_blk.coeffs[static_cast<std::size_t>(m)] = Matrix::Constant(1, 1, -1.0);
            ph3.blocks.push_back(std::move(cap_blk));
        }

        Vector z = Vector::Zero(m + 1);
        z.head(m) = xi;
        z(m) = 0.5 * std::min(margin_now, opt.margin_cap);
        Vector cost = Vector::Zero(m + 1);
        cost(m) = -1.0;
        double mu3 = std::max(1.0, std::abs(z(m)));
        Vector best3 = z;
        for (int outer = 0; outer < opt.max_outer; ++outer) {
            if (!sdp_detail::center(ph3, Vector(cost / mu3), z, opt.max_newton, opt.newton_tol,
                                    opt.drift_regularization, sol.newton_iterations)) {
                z = best3;
                break;
            }
            best3 = z;
            if (z(m) >= opt.polish_goal) {
                break;
            }
            mu3 *= opt.mu_shrink;
            if (mu3 < 1e-10 * std::max(1.0, std::abs(z(m)))) {
                break;
            }
        }
        xi = best3.head(m);
        sol.margin = std::max(sol.margin, best3(m));
    }

    // ---- final verification of the returned point ---------------------------
    double final_margin = std::numeric_limits<double>::infinity();
    for (const auto& blk : state.blocks) {
        Matrix A = blk.constant;
        for (int j = 0; j < m; ++j) {
            if (blk.coeffs[static_cast<std::size_t>(j)].size() > 0) {
                A += xi(j) * blk.coeffs[static_cast<std::size_t>(j)];
            }
        }
        final_margin = std::min(final_margin, min_eigenvalue(A));
    }
    if (final_margin < -1e-9) {
        sol.status = SdpSolution::Status::NumericalFailure;
        sol.detail = "returned point violates a constraint (normalized margin " +
                     std::to_string(final_margin) + ")";
        sol.x = x0 + null_basis * xi;
        return sol;
    }

    sol.status = SdpSolution::Status::Feasible;
    sol.x = x0 + null_basis * xi;
    return sol;
}

} // namespace netqsr
