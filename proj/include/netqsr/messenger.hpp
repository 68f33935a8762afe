#pragma once

// =============================================================================
// Messenger-matrix computations
// =============================================================================
// The certified object every subsystem produces and shares is the pair
// (M_i, P_i). The messenger matrix splits into
//
//   M_i = self_dissipation(i) - neighbor_energy_flow(i)
//
// where the self term measures the subsystem's own dissipativity under its
// supply rate and the coupling term aggregates the energy exchanged with
// already-processed neighbors through their records. Positivity of every
// messenger matrix certifies dissipativity of the whole network; the terms
// here are exactly the Schur pivots of the permuted network-level
// certificate, which is what the tests pin down.
// =============================================================================

#include "netqsr/linalg.hpp"
#include "netqsr/model.hpp"

#include <functional>
#include <vector>

namespace netqsr {

// =============================================================================
// Inputs
// =============================================================================

/// How a feedthrough term D modifies the R block of the self term.
enum class FeedthroughVariant {
    ReplaceR, // R -> -D'QD - (D'S + S'D)
    AugmentR, // R -> R - D'QD - (D'S + S'D)
};

/// Per-mode products a processed neighbor shares. Only aggregates appear:
/// the neighbor's raw (A,B,C) never leave it.
struct NeighborModeData {
    Matrix coupling_term; // P_j B1_j H_{j,i}   (n_j x n_i)
    Matrix gain_factor;   // P_j B3_j          (n_j x p_j)
};

/// Everything subsystem i holds about one already-processed node j. The
/// incoming list of a step must be ordered by processing position
/// (earliest-certified first); the energy-flow recursion depends on it.
struct IncomingNeighbor {
    int index = -1;                      // j, identifies rows between records
    Matrix M;                            // node's (selected) messenger matrix
    Matrix P;                            // node's energy matrix
    bool structured = false;             // R_j == 0 record form
    std::vector<NeighborModeData> modes; // one entry per mode of j
    Matrix H_ij;                         // own coupling row toward j (z_i x n_j, zero if absent)
    Matrix K_ij;                         // own gain on x_j (p_i x n_j, zero until designed)
    Matrix K_ji;                         // neighbor's gain on x_i (p_j x n_i, zero until designed)
    /// Eliminated row blocks of j toward nodes processed before j, keyed by
    /// node id. These carry the indirect energy paths through the certified
    /// prefix; without them the coupling term would miss the interaction
    /// between two processed nodes that are coupled to each other.
    std::map<int, Matrix> rows;

    [[nodiscard]] int state_dim() const { return static_cast<int>(P.rows()); }
};

/// One subsystem's data for a single messenger evaluation. `self` is the
/// active mode of the subsystem; switched enumeration happens above this.
struct MessengerInputs {
    SubsystemDynamics self;
    SupplyRate supply; // concrete (gamma resolved)
    Matrix P;
    Matrix H_ii; // self-coupling block (z x n), zero if absent
    Matrix K_ii; // self gain (p x n), zero if none
    std::vector<IncomingNeighbor> incoming;
    FeedthroughVariant feedthrough = FeedthroughVariant::ReplaceR;
};

// =============================================================================
// Record positivity and structured inverse
// =============================================================================

/// Effective R block after the feedthrough substitution.
[[nodiscard]] inline Matrix effective_r(const SubsystemDynamics& dyn, const SupplyRate& supply,
                                        FeedthroughVariant variant) {
    if (!dyn.D) {
        return supply.R;
    }
    const Matrix& D = *dyn.D;
    Matrix corr = -D.transpose() * supply.Q * D -
                  (D.transpose() * supply.S + supply.S.transpose() * D);
    return variant == FeedthroughVariant::ReplaceR ? corr : Matrix(supply.R + corr);
}

/// Inverse of a messenger matrix as used inside the coupling term: the full
/// inverse for a strict record, or the inverse of the leading state block
/// padded with zeros for a structured (R = 0) record.
[[nodiscard]] inline Matrix record_inverse(const Matrix& M, bool structured, int state_dim) {
    if (!structured) {
        Eigen::FullPivLU<Matrix> lu(M);
        if (!lu.isInvertible()) {
            throw std::runtime_error("record_inverse: messenger matrix is singular");
        }
        return lu.inverse();
    }
    Matrix leading = M.topLeftCorner(state_dim, state_dim);
    Eigen::FullPivLU<Matrix> lu(leading);
    if (!lu.isInvertible()) {
        throw std::runtime_error("record_inverse: leading block of structured record is singular");
    }
    Matrix inv = Matrix::Zero(M.rows(), M.cols());
    inv.topLeftCorner(state_dim, state_dim) = lu.inverse();
    return inv;
}

struct RecordCheck {
    bool pass = false;
    double margin = 0.0; // minimum eigenvalue of M
};

/// Positivity test of a record: strict records need lambda_min > eps_pd,
/// structured records are accepted at lambda_min >= -eps_pd (their trailing
/// block is exactly zero, so zero eigenvalues are part of the form).
[[nodiscard]] inline RecordCheck check_record_positivity(const MessengerRecord& rec,
                                                         const Tolerances& tol = {}) {
    RecordCheck check;
    check.margin = min_eigenvalue(rec.M);
    const double eps_pd = tol.eps_pd(rec.M.norm());
    check.pass = rec.structured ? check.margin >= -eps_pd : check.margin > eps_pd;
    return check;
}

// =============================================================================
// Core terms
// =============================================================================

/// Self-dissipation term: the subsystem's own contribution
///
///   [ -(A'P + PA) - (Hh + Hh') + C'QC    -P B2 + C'S ]
///   [          (-P B2 + C'S)'                 R      ]
///
/// with Hh = P (B1 H_{i,i} + B3 K_{i,i}). Zero gain reduces this to the
/// open-loop form.
[[nodiscard]] inline Matrix self_dissipation(const MessengerInputs& in) {
    const Dims d = in.self.dims();
    if (in.P.rows() != d.n || in.P.cols() != d.n) {
        throw std::invalid_argument("self_dissipation: P dimension mismatch");
    }
    Matrix H_ii = in.H_ii.size() > 0 ? in.H_ii : Matrix::Zero(d.z, d.n);
    Matrix K_ii = in.K_ii.size() > 0 ? in.K_ii : Matrix::Zero(d.p, d.n);
    if (H_ii.rows() != d.z || H_ii.cols() != d.n || K_ii.rows() != d.p || K_ii.cols() != d.n) {
        throw std::invalid_argument("self_dissipation: H_ii or K_ii dimension mismatch");
    }

    Matrix Hh = in.P * (in.self.B1 * H_ii + in.self.B3 * K_ii);
    Matrix R = effective_r(in.self, in.supply, in.feedthrough);

    Matrix mu(d.n + d.l, d.n + d.l);
    mu.topLeftCorner(d.n, d.n) = -(in.self.A.transpose() * in.P + in.P * in.self.A) -
                                 (Hh + Hh.transpose()) +
                                 in.self.C.transpose() * in.supply.Q * in.self.C;
    mu.topRightCorner(d.n, d.l) = -in.P * in.self.B2 + in.self.C.transpose() * in.supply.S;
    mu.bottomLeftCorner(d.l, d.n) = mu.topRightCorner(d.n, d.l).transpose();
    mu.bottomRightCorner(d.l, d.l) = R;
    return 0.5 * (mu + mu.transpose());
}

struct EnergyFlowResult {
    Matrix mu_c; // (n+l) x (n+l), nonzero only on the state block
    /// Own eliminated row blocks toward each processed node, keyed by node
    /// id: the data this step shares with later steps.
    std::map<int, Matrix> rows;
};

/// Energy-flow term from the processed prefix. With
///
///   G_a = -(Hh_{j_a,i}' + Hh_{i,j_a}),
///   Hh_{j,i} = P_j B1_j H_{j,i} + P_j B3_j K_{j,i}  (neighbor-side products),
///   Hh_{i,j} = P (B1 H_{i,j} + B3 K_{i,j}),
///
/// the term eliminates the processed nodes in order:
///
///   N_a  = G_a - sum_{b<a} N_b V_b X_{b,a},      X_{b,a} = rows_a[j_b]',
///   mu_c = sum_a N_a V_a N_a'  (on the state block),
///
/// where V_a is the state-restricted inverse of the record M_a (the full
/// inverse's leading block for a strict record, the leading-block inverse
/// for a structured R = 0 record). The correction terms route energy flow
/// through indirect paths in the certified prefix; they vanish exactly when
/// no two processed nodes interact, which recovers the plain per-neighbor
/// sum. neighbor_modes selects the active mode per node (first modes when
/// empty). An empty incoming list yields zero.
[[nodiscard]] inline EnergyFlowResult neighbor_energy_flow_detailed(
    const MessengerInputs& in, const std::vector<int>& neighbor_modes = {}) {
    const Dims d = in.self.dims();
    if (!neighbor_modes.empty() && neighbor_modes.size() != in.incoming.size()) {
        throw std::invalid_argument("neighbor_energy_flow: mode selection size mismatch");
    }

    EnergyFlowResult result;
    result.mu_c = Matrix::Zero(d.n + d.l, d.n + d.l);

    const std::size_t t = in.incoming.size();
    std::vector<Matrix> eliminated(t); // N_a
    std::vector<Matrix> restricted_inv(t);

    for (std::size_t a = 0; a < t; ++a) {
        const auto& nb = in.incoming[a];
        const int mode = neighbor_modes.empty() ? 0 : neighbor_modes[a];
        const auto& nb_mode = nb.modes.at(static_cast<std::size_t>(mode));
        const int nj = nb.state_dim();

        Matrix K_ij = nb.K_ij.size() > 0 ? nb.K_ij : Matrix::Zero(d.p, nj);
        Matrix H_ij = nb.H_ij.size() > 0 ? nb.H_ij : Matrix::Zero(d.z, nj);
        Matrix K_ji = nb.K_ji.size() > 0 ? nb.K_ji : Matrix::Zero(nb_mode.gain_factor.cols(), d.n);

        Matrix Hh_ji = nb_mode.coupling_term + nb_mode.gain_factor * K_ji; // n_j x n_i
        Matrix Hh_ij = in.P * (in.self.B1 * H_ij + in.self.B3 * K_ij);     // n_i x n_j
        Matrix N = -(Hh_ji.transpose() + Hh_ij);                           // n_i x n_j

        for (std::size_t b = 0; b < a; ++b) {
            auto it = nb.rows.find(in.incoming[b].index);
            if (it == nb.rows.end()) continue;
            // X_{b,a} = (row of j_a toward j_b)' has shape n_b x n_a
            N -= eliminated[b] * restricted_inv[b] * it->second.transpose();
        }

        restricted_inv[a] = record_inverse(nb.M, nb.structured, nj).topLeftCorner(nj, nj);
        eliminated[a] = N;
        result.rows[nb.index] = N;
        result.mu_c.topLeftCorner(d.n, d.n) += N * restricted_inv[a] * N.transpose();
    }
    result.mu_c = 0.5 * (result.mu_c + result.mu_c.transpose());
    return result;
}

[[nodiscard]] inline Matrix neighbor_energy_flow(const MessengerInputs& in,
                                                 const std::vector<int>& neighbor_modes = {}) {
    return neighbor_energy_flow_detailed(in, neighbor_modes).mu_c;
}

struct MessengerEvaluation {
    MessengerRecord record;
    std::map<int, Matrix> rows; // eliminated rows to pass along to later steps
};

/// Messenger matrix M = self term minus energy-flow term, paired with the
/// candidate P. Positivity is not asserted here; the feasibility layer and
/// record checks decide.
[[nodiscard]] inline MessengerEvaluation messenger_matrix_detailed(
    const MessengerInputs& in, const std::vector<int>& neighbor_modes = {}) {
    MessengerEvaluation eval;
    EnergyFlowResult flow = neighbor_energy_flow_detailed(in, neighbor_modes);
    eval.record.M = self_dissipation(in) - flow.mu_c;
    eval.record.M = 0.5 * (eval.record.M + eval.record.M.transpose());
    eval.record.P = in.P;
    eval.record.structured = effective_r(in.self, in.supply, in.feedthrough).norm() == 0.0;
    eval.rows = std::move(flow.rows);
    return eval;
}

[[nodiscard]] inline MessengerRecord messenger_matrix(const MessengerInputs& in,
                                                      const std::vector<int>& neighbor_modes = {}) {
    return messenger_matrix_detailed(in, neighbor_modes).record;
}

/// Messenger matrix of a subsystem joining an existing certified network.
/// Identical to a last-in-sequence step: every neighbor of the new node is
/// already processed, so the sum runs over the full neighbor set.
[[nodiscard]] inline MessengerRecord compositional_messenger(const MessengerInputs& in) {
    return messenger_matrix(in);
}

// =============================================================================
// Switched evaluation
// =============================================================================

/// Measure used to pick the record a switched subsystem communicates.
enum class ModeMeasure {
    MinEigenvalue, // least margin = least dissipative mode (default)
    FrobeniusNorm,
};

struct SwitchedCandidate {
    int self_mode = 0;
    std::vector<int> neighbor_modes;
    Matrix M;
};

struct SwitchedMessengerResult {
    std::vector<SwitchedCandidate> candidates;
    MessengerRecord selected;
    int selected_index = 0;
    /// Eliminated rows belonging to the selected combination.
    std::map<int, Matrix> selected_rows;
};

/// Enumerates every (own-mode, neighbor-mode...) combination, evaluates the
/// messenger matrix of each, and selects the record by the configured
/// measure (ties break on the lowest combination index). Fails loudly when
/// the combination count exceeds the cap rather than sampling.
[[nodiscard]] inline SwitchedMessengerResult switched_messenger(
    const Subsystem& self, const SupplyRate& supply, const Matrix& P, const Matrix& H_ii,
    const Matrix& K_ii, const std::vector<IncomingNeighbor>& incoming,
    ModeMeasure measure = ModeMeasure::MinEigenvalue, long combination_cap = 10000,
    FeedthroughVariant feedthrough = FeedthroughVariant::ReplaceR) {
    long combos = self.mode_count();
    for (const auto& nb : incoming) {
        combos *= static_cast<long>(nb.modes.size());
        if (combos > combination_cap) {
            throw std::runtime_error("switched_messenger: combination budget exceeded");
        }
    }
    if (combos > combination_cap) {
        throw std::runtime_error("switched_messenger: combination budget exceeded");
    }

    SwitchedMessengerResult result;
    std::vector<int> nb_modes(incoming.size(), 0);
    double best = std::numeric_limits<double>::infinity();
    bool structured = false;

    for (int self_mode = 0; self_mode < self.mode_count(); ++self_mode) {
        MessengerInputs in;
        in.self = self.mode(self_mode);
        in.supply = supply;
        in.P = P;
        in.H_ii = H_ii;
        in.K_ii = K_ii;
        in.incoming = incoming;
        in.feedthrough = feedthrough;

        std::fill(nb_modes.begin(), nb_modes.end(), 0);
        bool done = false;
        while (!done) {
            MessengerEvaluation eval = messenger_matrix_detailed(in, nb_modes);
            structured = eval.record.structured;
            double value = measure == ModeMeasure::MinEigenvalue ? min_eigenvalue(eval.record.M)
                                                                 : eval.record.M.norm();
            result.candidates.push_back({self_mode, nb_modes, eval.record.M});
            if (value < best) {
                best = value;
                result.selected_index = static_cast<int>(result.candidates.size()) - 1;
                result.selected_rows = eval.rows;
            }

            // advance the neighbor-mode odometer
            done = true;
            for (std::size_t k = 0; k < nb_modes.size(); ++k) {
                if (++nb_modes[k] < static_cast<int>(incoming[k].modes.size())) {
                    done = false;
                    break;
                }
                nb_modes[k] = 0;
            }
        }
    }

    result.selected.M = result.candidates[static_cast<std::size_t>(result.selected_index)].M;
    result.selected.P = P;
    result.selected.structured = structured;
    return result;
}

// =============================================================================
// Robustness margin
// =============================================================================

/// Lower-bound matrix for norm-bounded additive state-matrix uncertainty:
/// with ||dA|| < eps, requiring M - [[2 eps P, 0],[0,0]] > 0 keeps the
/// certificate valid for every admissible perturbation.
[[nodiscard]] inline Matrix robust_margin(const Matrix& P, double eps, int dist_dim) {
    if (eps < 0.0) {
        throw std::invalid_argument("robust_margin: eps must be nonnegative");
    }
    const int n = static_cast<int>(P.rows());
    Matrix bound = Matrix::Zero(n + dist_dim, n + dist_dim);
    bound.topLeftCorner(n, n) = 2.0 * eps * P;
    return bound;
}

} // namespace netqsr
