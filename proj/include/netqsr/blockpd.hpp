#pragma once

// =============================================================================
// Sequential block positive-definiteness machinery
// =============================================================================
// A symmetric block matrix W is positive definite exactly when its row-wise
// Schur pivots
//
//   M_1 = W_{1,1},   M_i = W_{i,i} - sum_{k<i} W_{i,k} M_k^{-1} W_{k,i}
//
// are all positive definite. Everything in this header builds on that fact:
// the pivot recursion itself, the block Cholesky factor it induces, the
// permutation that rearranges a network-level certificate into per-subsystem
// blocks, and the centralized dissipativity test used as an oracle.
// =============================================================================

#include "netqsr/linalg.hpp"
#include "netqsr/model.hpp"

#include <numeric>
#include <vector>

namespace netqsr {

// =============================================================================
// Block partitions
// =============================================================================

struct BlockPartition {
    std::vector<int> sizes;

    [[nodiscard]] int total() const {
        return std::accumulate(sizes.begin(), sizes.end(), 0);
    }

    [[nodiscard]] std::vector<int> offsets() const {
        std::vector<int> off(sizes.size());
        int acc = 0;
        for (std::size_t i = 0; i < sizes.size(); ++i) {
            off[i] = acc;
            acc += sizes[i];
        }
        return off;
    }
};

// =============================================================================
// Sequential positivity (pivot recursion)
// =============================================================================

struct SequentialPositivityResult {
    bool positive = false;
    std::vector<Matrix> pivots;
    /// Worst margin over all pivots: min over blocks of lambda_min(pivot).
    double min_margin = 0.0;
    /// First block whose pivot failed its test, or -1.
    int failed_block = -1;
};

namespace detail {

/// Inverse used by the pivot recursion. A strict pivot is inverted in full;
/// a pivot with a semidefinite tail of size t is inverted on its leading
/// block only, with zeros elsewhere.
inline Matrix pivot_inverse(const Matrix& pivot, int tail, const char* what) {
    const int d = static_cast<int>(pivot.rows());
    const int lead = d - tail;
    if (lead < 0) {
        throw std::invalid_argument(std::string(what) + ": semidefinite tail exceeds block size");
    }
    Matrix leading = pivot.topLeftCorner(lead, lead);
    Eigen::FullPivLU<Matrix> lu(leading);
    if (!lu.isInvertible()) {
        throw std::runtime_error(std::string(what) + ": singular pivot where an inverse is required");
    }
    if (tail == 0) {
        return lu.inverse();
    }
    Matrix inv = Matrix::Zero(d, d);
    inv.topLeftCorner(lead, lead) = lu.inverse();
    return inv;
}

} // namespace detail

/// Runs the pivot recursion on a symmetric matrix partitioned into blocks.
/// Implemented as symmetric block elimination: after block i is eliminated,
/// every remaining block row is updated, so the pivots are the exact Schur
/// complements of the leading principal block submatrices.
/// semidefinite_tail[i] > 0 marks the trailing t rows/cols of block i as a
/// semidefinite tail: that pivot is tested >= -eps_pd instead of > eps_pd
/// and only its leading sub-block is inverted during elimination. The tail
/// form assumes the rows connecting to the tail are zero (the certificate
/// structure that produces such blocks guarantees this).
[[nodiscard]] inline SequentialPositivityResult sequential_positivity(
    const Matrix& W, const BlockPartition& part,
    const std::vector<int>& semidefinite_tail = {}, const Tolerances& tol = {}) {
    if (part.total() != W.rows()) {
        throw std::invalid_argument("sequential_positivity: partition does not cover the matrix");
    }
    if (!semidefinite_tail.empty() && semidefinite_tail.size() != part.sizes.size()) {
        throw std::invalid_argument("sequential_positivity: tail flags do not match the partition");
    }
    Matrix work = symmetrized(W, tol.symmetry_rel, "sequential_positivity input");
    const double eps_pd = tol.eps_pd(work.norm());

    const auto off = part.offsets();
    const int N = static_cast<int>(part.sizes.size());

    SequentialPositivityResult result;
    result.positive = true;
    result.min_margin = std::numeric_limits<double>::infinity();

    for (int i = 0; i < N; ++i) {
        const int di = part.sizes[i];
        Matrix pivot = work.block(off[i], off[i], di, di);
        pivot = 0.5 * (pivot + pivot.transpose());
        result.pivots.push_back(pivot);

        const int tail = semidefinite_tail.empty() ? 0 : semidefinite_tail[static_cast<std::size_t>(i)];
        const double margin = min_eigenvalue(pivot);
        result.min_margin = std::min(result.min_margin, margin);
        const bool pass = tail > 0 ? margin >= -eps_pd : margin > eps_pd;
        if (!pass && result.failed_block < 0) {
            result.positive = false;
            result.failed_block = i;
        }
        if (i + 1 == N) {
            break;
        }
        Matrix inv = detail::pivot_inverse(pivot, tail, "sequential_positivity");
        for (int r = i + 1; r < N; ++r) {
            Matrix Wri = work.block(off[r], off[i], part.sizes[r], di);
            for (int c = i + 1; c < N; ++c) {
                work.block(off[r], off[c], part.sizes[r], part.sizes[c]) -=
                    Wri * inv * work.block(off[i], off[c], di, part.sizes[c]);
            }
        }
    }
    return result;
}

// =============================================================================
// Block Cholesky factor
// =============================================================================

/// Block lower-triangular L with W = L L', built from the pivot recursion:
/// the diagonal blocks are the dense Cholesky factors of the pivots and
/// L_{i,j} = W_{i,j} L_{j,j}'^{-1} below them. Requires W positive definite.
[[nodiscard]] inline Matrix block_cholesky(const Matrix& W, const BlockPartition& part,
                                           const Tolerances& tol = {}) {
    if (part.total() != W.rows()) {
        throw std::invalid_argument("block_cholesky: partition does not cover the matrix");
    }
    Matrix Ws = symmetrized(W, tol.symmetry_rel, "block_cholesky input");
    const auto off = part.offsets();
    const int N = static_cast<int>(part.sizes.size());
    const int dim = part.total();

    Matrix L = Matrix::Zero(dim, dim);
    std::vector<Matrix> diag_factors;
    diag_factors.reserve(static_cast<std::size_t>(N));

    for (int i = 0; i < N; ++i) {
        const int di = part.sizes[i];
        Matrix pivot = Ws.block(off[i], off[i], di, di);
        for (int k = 0; k < i; ++k) {
            Matrix Lik = L.block(off[i], off[k], di, part.sizes[k]);
            pivot -= Lik * Lik.transpose();
        }
        pivot = 0.5 * (pivot + pivot.transpose());
        Eigen::LLT<Matrix> llt(pivot);
        if (llt.info() != Eigen::Success) {
            throw std::runtime_error("block_cholesky: matrix is not positive definite");
        }
        Matrix Lii = llt.matrixL();
        L.block(off[i], off[i], di, di) = Lii;
        diag_factors.push_back(Lii);
        for (int r = i + 1; r < N; ++r) {
            Matrix Wri = Ws.block(off[r], off[i], part.sizes[r], di);
            for (int k = 0; k < i; ++k) {
                Wri -= L.block(off[r], off[k], part.sizes[r], part.sizes[k]) *
                       L.block(off[i], off[k], di, part.sizes[k]).transpose();
            }
            // Solve X * Lii' = Wri for X.
            L.block(off[r], off[i], part.sizes[r], di) =
                Lii.transpose().triangularView<Eigen::Upper>().solve<Eigen::OnTheRight>(Wri);
        }
    }
    return L;
}

// =============================================================================
// Interleaving permutation
// =============================================================================

/// Permutation matrix E that reorders a stacked (state-stack, disturbance-
/// stack) coordinate vector into per-subsystem (state, disturbance) blocks,
/// so E Gamma E' carries the block structure the pivot recursion expects.
[[nodiscard]] inline Matrix interleaving_permutation(const std::vector<int>& state_dims,
                                                     const std::vector<int>& dist_dims) {
    if (state_dims.size() != dist_dims.size()) {
        throw std::invalid_argument("interleaving_permutation: dimension lists differ in length");
    }
    const int N = static_cast<int>(state_dims.size());
    int n_total = std::accumulate(state_dims.begin(), state_dims.end(), 0);
    int l_total = std::accumulate(dist_dims.begin(), dist_dims.end(), 0);

    Matrix E = Matrix::Zero(n_total + l_total, n_total + l_total);
    int row = 0, n_off = 0, l_off = 0;
    for (int i = 0; i < N; ++i) {
        for (int k = 0; k < state_dims[static_cast<std::size_t>(i)]; ++k) {
            E(row++, n_off + k) = 1.0;
        }
        for (int k = 0; k < dist_dims[static_cast<std::size_t>(i)]; ++k) {
            E(row++, n_total + l_off + k) = 1.0;
        }
        n_off += state_dims[static_cast<std::size_t>(i)];
        l_off += dist_dims[static_cast<std::size_t>(i)];
    }
    return E;
}

// =============================================================================
// Centralized dissipativity test
// =============================================================================

struct CentralizedVerdict {
    Matrix gamma;
    double min_eigenvalue = 0.0;
    bool dissipative = false;
};

/// Network-level dissipativity certificate check: with Ahat = A + B1 H + B3 K
/// and storage matrix P = diag(P_i),
///
///   Gamma = [ -(Ahat' P + P Ahat) + C' Q C    -P B2 + C' S ]
///           [      (-P B2 + C' S)'                 R       ]
///
/// must be positive semidefinite. This is the whole-network test the
/// sequential machinery decomposes; it doubles as the independent oracle for
/// every certificate the step-wise pipeline produces.
[[nodiscard]] inline CentralizedVerdict centralized_gamma(const NetworkModel& net,
                                                          const ControllerSet& controllers,
                                                          const std::vector<Matrix>& P_blocks,
                                                          const std::vector<int>& mode_combo,
                                                          const Tolerances& tol = {}) {
    const int N = net.size();
    if (static_cast<int>(P_blocks.size()) != N) {
        throw std::invalid_argument("centralized_gamma: expected one P block per subsystem");
    }
    for (int i = 0; i < N; ++i) {
        const auto dims = net.subsystems[i].dims();
        if (P_blocks[i].rows() != dims.n || P_blocks[i].cols() != dims.n) {
            throw std::invalid_argument("centralized_gamma: P block dimension mismatch");
        }
        if (min_eigenvalue(symmetrized(P_blocks[i], tol.symmetry_rel, "P block")) <= 0.0) {
            throw std::invalid_argument("centralized_gamma: P block is not positive definite");
        }
        if (net.supplies[i].gamma_variable) {
            throw std::invalid_argument("centralized_gamma: unresolved L2 gain in supply " +
                                        std::to_string(i + 1));
        }
    }

    StackedNetwork st = stack_network(net, mode_combo);
    Dims total = net.stacked_dims();
    StackOffsets off = stack_offsets(net);

    Matrix P = Matrix::Zero(total.n, total.n);
    for (int i = 0; i < N; ++i) {
        P.block(off.n[i], off.n[i], P_blocks[i].rows(), P_blocks[i].cols()) = P_blocks[i];
    }
    Matrix K = stack_gains(net, controllers);
    Matrix Ahat = st.A + st.B1 * st.H + st.B3 * K;

    Matrix gamma(total.n + total.l, total.n + total.l);
    gamma.topLeftCorner(total.n, total.n) =
        -(Ahat.transpose() * P + P * Ahat) + st.C.transpose() * st.Q * st.C;
    gamma.topRightCorner(total.n, total.l) = -P * st.B2 + st.C.transpose() * st.S;
    gamma.bottomLeftCorner(total.l, total.n) = gamma.topRightCorner(total.n, total.l).transpose();
    gamma.bottomRightCorner(total.l, total.l) = st.R;
    gamma = 0.5 * (gamma + gamma.transpose());

    CentralizedVerdict verdict;
    verdict.gamma = gamma;
    verdict.min_eigenvalue = min_eigenvalue(gamma);
    verdict.dissipative = verdict.min_eigenvalue >= -tol.eps_pd(gamma.norm());
    return verdict;
}

/// LTI convenience overload (every subsystem in mode 1).
[[nodiscard]] inline CentralizedVerdict centralized_gamma(const NetworkModel& net,
                                                          const ControllerSet& controllers,
                                                          const std::vector<Matrix>& P_blocks,
                                                          const Tolerances& tol = {}) {
    return centralized_gamma(net, controllers, P_blocks,
                             std::vector<int>(static_cast<std::size_t>(net.size()), 0), tol);
}

} // namespace netqsr
