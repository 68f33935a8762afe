#pragma once

// =============================================================================
// Domain model: subsystems, couplings, supply rates, networks
// =============================================================================
// A networked system is an ordered collection of (possibly switched) linear
// subsystems
//
//   x_i' = A x_i + B1 v_i + B2 w_i + B3 u_i,   y_i = C x_i (+ D w_i),
//   v_i  = sum_j H_{i,j} x_j,
//
// together with one quadratic supply rate (Q,S,R) per subsystem and an
// explicit processing sequence for the sequential certification algorithms.
// All types are plain immutable value types; construction is validated
// through validate_network / loader code rather than throwing constructors.
// =============================================================================

#include "netqsr/linalg.hpp"

#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

namespace netqsr {

// =============================================================================
// Subsystems
// =============================================================================

/// Per-subsystem signal dimensions.
struct Dims {
    int n = 0; // state
    int z = 0; // coupling input
    int l = 0; // disturbance input
    int p = 0; // control input
    int m = 0; // output

    bool operator==(const Dims&) const = default;
};

/// One mode of a subsystem's state-space dynamics.
struct SubsystemDynamics {
    Matrix A;  // n x n
    Matrix B1; // n x z   coupling input
    Matrix B2; // n x l   disturbance input
    Matrix B3; // n x p   control input
    Matrix C;  // m x n
    std::optional<Matrix> D; // m x l feedthrough, usually absent

    [[nodiscard]] Dims dims() const {
        return Dims{static_cast<int>(A.rows()), static_cast<int>(B1.cols()),
                    static_cast<int>(B2.cols()), static_cast<int>(B3.cols()),
                    static_cast<int>(C.rows())};
    }
};

/// A named subsystem: one or more modes sharing identical dimensions.
/// A single-mode subsystem is plain LTI; more modes make it switched under
/// an arbitrary (unknown a priori) switching signal.
struct Subsystem {
    std::string name;
    std::vector<SubsystemDynamics> modes;

    [[nodiscard]] int mode_count() const { return static_cast<int>(modes.size()); }
    [[nodiscard]] bool switched() const { return modes.size() > 1; }
    [[nodiscard]] const SubsystemDynamics& mode(int s) const { return modes.at(static_cast<std::size_t>(s)); }
    [[nodiscard]] Dims dims() const { return modes.front().dims(); }
};

// =============================================================================
// Coupling
// =============================================================================

/// Sparse block map (i,j) -> H_{i,j} of size z_i x n_j. Self blocks H_{i,i}
/// are stored in the same map but excluded from the neighbor set.
struct CouplingMap {
    std::map<std::pair<int, int>, Matrix> blocks;

    [[nodiscard]] bool has(int i, int j) const { return blocks.count({i, j}) > 0; }

    /// H_{i,j}, or a zero matrix of the given shape when absent.
    [[nodiscard]] Matrix block_or_zero(int i, int j, int rows, int cols) const {
        auto it = blocks.find({i, j});
        return it != blocks.end() ? it->second : Matrix::Zero(rows, cols);
    }

    /// Out-neighbors of i: { j != i : H_{i,j} stored }.
    [[nodiscard]] std::set<int> neighbors(int i) const {
        std::set<int> out;
        for (const auto& [key, H] : blocks) {
            if (key.first == i && key.second != i) {
                out.insert(key.second);
            }
        }
        return out;
    }

    /// Nodes coupled to i in either direction. The sequential certification
    /// exchanges records along this set: a one-directional block H_{j,i}
    /// still contributes an off-diagonal term that step i must account for.
    [[nodiscard]] std::set<int> communication_neighbors(int i) const {
        std::set<int> out = neighbors(i);
        for (const auto& [key, H] : blocks) {
            if (key.second == i && key.first != i) {
                out.insert(key.first);
            }
        }
        return out;
    }
};

// =============================================================================
// Supply rates
// =============================================================================

/// Quadratic supply rate (Q,S,R) on one subsystem's (y,w) pair.
/// When gamma_variable is set, the supply encodes an L2 target
/// Q=-I, S=0, R=g*I where g = gamma^2 is decided by the synthesis layer;
/// Q/S/R then hold the g=1 template.
struct SupplyRate {
    Matrix Q; // m x m, symmetric
    Matrix S; // m x l
    Matrix R; // l x l, symmetric
    bool gamma_variable = false;

    /// R == 0 exactly: certification switches to the structured
    /// positive-semidefinite record form.
    [[nodiscard]] bool zero_r() const { return R.size() == 0 || R.norm() == 0.0; }

    /// Copy of this supply with the L2 variable resolved to gamma.
    [[nodiscard]] SupplyRate with_gamma(double gamma) const {
        SupplyRate out = *this;
        out.R = (gamma * gamma) * Matrix::Identity(R.rows(), R.cols());
        out.gamma_variable = false;
        return out;
    }
};

enum class SupplyPreset { Passive, StrictlyPassive, L2, Conic, Sector, L2Auto };

[[nodiscard]] inline SupplyPreset supply_preset_from_string(const std::string& kind) {
    if (kind == "passive") return SupplyPreset::Passive;
    if (kind == "strictly-passive") return SupplyPreset::StrictlyPassive;
    if (kind == "l2") return SupplyPreset::L2;
    if (kind == "conic") return SupplyPreset::Conic;
    if (kind == "sector") return SupplyPreset::Sector;
    if (kind == "l2-auto") return SupplyPreset::L2Auto;
    throw std::invalid_argument("unknown supply preset: " + kind);
}

/// Standard (Q,S,R) choices for the common dissipativity targets.
///   passive:               Q = 0,        S = I/2,        R = 0          (m == l)
///   strictly-passive(rho,nu): Q = -rho I, S = I/2,        R = -nu I      (m == l, rho,nu > 0)
///   l2(gamma):             Q = -I/gamma, S = 0,          R = gamma I    (gamma > 0)
///   conic(c,r):            Q = -I,       S = c I,        R = (r^2-c^2)I (m == l, r > 0)
///   sector(a,b):           Q = -I,       S = (a+b)/2 I,  R = -ab I      (m == l)
///   l2-auto:               L2 with gamma decided during synthesis
[[nodiscard]] inline SupplyRate supply_preset(SupplyPreset kind, const std::vector<double>& params,
                                              int m, int l) {
    auto need_square = [&](const char* name) {
        if (m != l) {
            throw std::invalid_argument(std::string(name) + " preset requires m == l");
        }
    };
    auto need_params = [&](std::size_t count, const char* name) {
        if (params.size() != count) {
            throw std::invalid_argument(std::string(name) + " preset: wrong parameter count");
        }
    };
    SupplyRate s;
    switch (kind) {
        case SupplyPreset::Passive:
            need_square("passive");
            need_params(0, "passive");
            s.Q = Matrix::Zero(m, m);
            s.S = 0.5 * Matrix::Identity(m, l);
            s.R = Matrix::Zero(l, l);
            return s;
        case SupplyPreset::StrictlyPassive: {
            need_square("strictly-passive");
            need_params(2, "strictly-passive");
            double rho = params[0], nu = params[1];
            if (rho <= 0 || nu <= 0) {
                throw std::invalid_argument("strictly-passive preset: rho and nu must be positive");
            }
            s.Q = -rho * Matrix::Identity(m, m);
            s.S = 0.5 * Matrix::Identity(m, l);
            s.R = -nu * Matrix::Identity(l, l);
            return s;
        }
        case SupplyPreset::L2: {
            need_params(1, "l2");
            double gamma = params[0];
            if (gamma <= 0) {
                throw std::invalid_argument("l2 preset: gamma must be positive");
            }
            s.Q = (-1.0 / gamma) * Matrix::Identity(m, m);
            s.S = Matrix::Zero(m, l);
            s.R = gamma * Matrix::Identity(l, l);
            return s;
        }
        case SupplyPreset::Conic: {
            need_square("conic");
            need_params(2, "conic");
            double c = params[0], r = params[1];
            if (r <= 0) {
                throw std::invalid_argument("conic preset: r must be positive");
            }
            s.Q = -Matrix::Identity(m, m);
            s.S = c * Matrix::Identity(m, l);
            s.R = (r * r - c * c) * Matrix::Identity(l, l);
            return s;
        }
        case SupplyPreset::Sector: {
            need_square("sector");
            need_params(2, "sector");
            double a = params[0], b = params[1];
            s.Q = -Matrix::Identity(m, m);
            s.S = 0.5 * (a + b) * Matrix::Identity(m, l);
            s.R = -(a * b) * Matrix::Identity(l, l);
            return s;
        }
        case SupplyPreset::L2Auto:
            need_params(0, "l2-auto");
            s.Q = -Matrix::Identity(m, m);
            s.S = Matrix::Zero(m, l);
            s.R = Matrix::Identity(l, l);
            s.gamma_variable = true;
            return s;
    }
    throw std::invalid_argument("unknown supply preset");
}

// =============================================================================
// Certificates and controllers
// =============================================================================

/// One subsystem's certified pair: the messenger matrix M ((n+l) x (n+l))
/// and the energy matrix P (n x n, positive definite). This is the only
/// data a subsystem shares with the rest of the network.
struct MessengerRecord {
    Matrix M;
    Matrix P;
    /// R == 0 record: M = [[a1, a2],[a2', 0]] is only required to be
    /// positive semidefinite with a1 > 0, and its inverse is taken on the
    /// leading block alone.
    bool structured = false;
};

/// Sparse map of state-feedback gain blocks: u_i += K_{i,j} x_j.
/// Absent entries mean zero gain.
struct ControllerSet {
    std::map<std::pair<int, int>, Matrix> gains;

    [[nodiscard]] bool has(int i, int j) const { return gains.count({i, j}) > 0; }

    [[nodiscard]] Matrix gain_or_zero(int i, int j, int rows, int cols) const {
        auto it = gains.find({i, j});
        return it != gains.end() ? it->second : Matrix::Zero(rows, cols);
    }
};

// =============================================================================
// Network
// =============================================================================

struct NetworkModel {
    std::vector<Subsystem> subsystems;
    CouplingMap coupling;
    std::vector<SupplyRate> supplies;   // one per subsystem
    std::vector<int> sequence;          // processing order (0-based permutation)

    [[nodiscard]] int size() const { return static_cast<int>(subsystems.size()); }

    [[nodiscard]] std::vector<int> default_sequence() const {
        std::vector<int> seq(subsystems.size());
        for (std::size_t i = 0; i < seq.size(); ++i) seq[i] = static_cast<int>(i);
        return seq;
    }

    [[nodiscard]] const std::vector<int>& effective_sequence() const {
        return sequence;
    }

    [[nodiscard]] int index_of(const std::string& name) const {
        for (std::size_t i = 0; i < subsystems.size(); ++i) {
            if (subsystems[i].name == name) return static_cast<int>(i);
        }
        return -1;
    }

    /// Total stacked dimensions over all subsystems.
    [[nodiscard]] Dims stacked_dims() const {
        Dims total;
        for (const auto& sub : subsystems) {
            Dims d = sub.dims();
            total.n += d.n;
            total.z += d.z;
            total.l += d.l;
            total.p += d.p;
            total.m += d.m;
        }
        return total;
    }
};

// =============================================================================
// Validation
// =============================================================================

struct ValidationIssue {
    std::string where;
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;

    [[nodiscard]] bool ok() const { return issues.empty(); }

    void add(std::string where, std::string message) {
        issues.push_back({std::move(where), std::move(message)});
    }

    [[nodiscard]] std::string to_string() const {
        std::string out;
        for (const auto& issue : issues) {
            out += issue.where + ": " + issue.message + "\n";
        }
        return out;
    }
};

namespace detail {

inline void validate_dynamics(const SubsystemDynamics& d, const std::string& where,
                              ValidationReport& report) {
    Dims dim = d.dims();
    if (d.A.rows() != d.A.cols()) {
        report.add(where, "A is not square");
    }
    auto check = [&](const Matrix& mat, int rows, int cols, const char* name) {
        if (mat.rows() != rows || mat.cols() != cols) {
            report.add(where, std::string(name) + " has inconsistent dimensions");
        }
        if (!is_finite(mat)) {
            report.add(where, std::string(name) + " has non-finite entries");
        }
    };
    check(d.A, dim.n, dim.n, "A");
    check(d.B1, dim.n, dim.z, "B1");
    check(d.B2, dim.n, dim.l, "B2");
    check(d.B3, dim.n, dim.p, "B3");
    check(d.C, dim.m, dim.n, "C");
    if (d.D) {
        check(*d.D, dim.m, dim.l, "D");
    }
}

} // namespace detail

/// Collects every structural problem in the network: dimension mismatches,
/// asymmetric Q/R, dangling coupling indices, invalid sequences. An empty
/// report means the network is proper (all interconnections well-defined).
[[nodiscard]] inline ValidationReport validate_network(const NetworkModel& net,
                                                       const Tolerances& tol = {}) {
    ValidationReport report;
    const int N = net.size();

    for (int i = 0; i < N; ++i) {
        const auto& sub = net.subsystems[i];
        std::string where = "subsystem " + (sub.name.empty() ? std::to_string(i + 1) : sub.name);
        if (sub.modes.empty()) {
            report.add(where, "no modes declared");
            continue;
        }
        Dims dim = sub.dims();
        for (int s = 0; s < sub.mode_count(); ++s) {
            std::string mode_where = sub.mode_count() > 1 ? where + " mode " + std::to_string(s + 1) : where;
            detail::validate_dynamics(sub.mode(s), mode_where, report);
            if (sub.mode(s).dims() != dim) {
                report.add(mode_where, "mode dimensions differ from mode 1");
            }
        }
    }

    for (const auto& [key, H] : net.coupling.blocks) {
        auto [i, j] = key;
        std::string where = "coupling H(" + std::to_string(i + 1) + "," + std::to_string(j + 1) + ")";
        if (i < 0 || i >= N || j < 0 || j >= N) {
            report.add(where, "references an unknown subsystem");
            continue;
        }
        if (H.size() == 0 || H.norm() == 0.0) {
            report.add(where, "stored block is zero; omit it instead");
        }
        if (H.rows() != net.subsystems[i].dims().z || H.cols() != net.subsystems[j].dims().n) {
            report.add(where, "block size does not match (z_i x n_j)");
        }
        if (!is_finite(H)) {
            report.add(where, "block has non-finite entries");
        }
    }

    if (static_cast<int>(net.supplies.size()) != N) {
        report.add("supplies", "expected one supply rate per subsystem");
    } else {
        for (int i = 0; i < N; ++i) {
            const auto& s = net.supplies[i];
            Dims dim = net.subsystems[i].dims();
            std::string where = "supply " + std::to_string(i + 1);
            if (s.Q.rows() != dim.m || s.Q.cols() != dim.m) {
                report.add(where, "Q must be m x m");
            } else if (!is_symmetric(s.Q, tol.symmetry_rel)) {
                report.add(where, "Q is not symmetric");
            }
            if (s.S.rows() != dim.m || s.S.cols() != dim.l) {
                report.add(where, "S must be m x l");
            }
            if (s.R.rows() != dim.l || s.R.cols() != dim.l) {
                report.add(where, "R must be l x l");
            } else if (!is_symmetric(s.R, tol.symmetry_rel)) {
                report.add(where, "R is not symmetric");
            }
        }
    }

    if (!net.sequence.empty()) {
        std::vector<bool> seen(static_cast<std::size_t>(N), false);
        bool valid = static_cast<int>(net.sequence.size()) == N;
        for (int idx : net.sequence) {
            if (idx < 0 || idx >= N || seen[static_cast<std::size_t>(idx)]) {
                valid = false;
                break;
            }
            seen[static_cast<std::size_t>(idx)] = true;
        }
        if (!valid) {
            report.add("sequence", "not a permutation of the subsystem indices");
        }
    } else if (N > 0) {
        report.add("sequence", "empty; expected a permutation of the subsystem indices");
    }

    return report;
}

// =============================================================================
// Compositional extension
// =============================================================================

/// New-subsystem description for extending an existing network.
struct NetworkExtension {
    Subsystem subsystem;
    SupplyRate supply;
    /// Coupling into the new node: H_{N+1,j} indexed by existing j (or N+1 for self).
    std::map<int, Matrix> coupling_in;
    /// Coupling from the new node into existing nodes: H_{j,N+1}.
    std::map<int, Matrix> coupling_out;
};

/// Returns the network obtained by appending the new subsystem last in the
/// sequence. Records of pre-existing subsystems are copied untouched.
[[nodiscard]] inline NetworkModel extend_network(const NetworkModel& net, const NetworkExtension& ext) {
    NetworkModel out = net;
    const int new_index = net.size();
    out.subsystems.push_back(ext.subsystem);
    out.supplies.push_back(ext.supply);
    for (const auto& [j, H] : ext.coupling_in) {
        out.coupling.blocks[{new_index, j}] = H; // j == new_index stores the self block
    }
    for (const auto& [j, H] : ext.coupling_out) {
        out.coupling.blocks[{j, new_index}] = H;
    }
    out.sequence = net.sequence.empty() ? out.default_sequence() : net.sequence;
    if (!net.sequence.empty()) {
        out.sequence.push_back(new_index);
    }

    ValidationReport report = validate_network(out);
    if (!report.ok()) {
        throw std::invalid_argument("extend_network produced an invalid network:\n" + report.to_string());
    }
    return out;
}

// =============================================================================
// Stacked (network-level) matrices
// =============================================================================

/// Block offsets of each subsystem inside the stacked vectors.
struct StackOffsets {
    std::vector<int> n, z, l, p, m;
};

[[nodiscard]] inline StackOffsets stack_offsets(const NetworkModel& net) {
    StackOffsets off;
    int n = 0, z = 0, l = 0, p = 0, m = 0;
    for (const auto& sub : net.subsystems) {
        off.n.push_back(n);
        off.z.push_back(z);
        off.l.push_back(l);
        off.p.push_back(p);
        off.m.push_back(m);
        Dims d = sub.dims();
        n += d.n;
        z += d.z;
        l += d.l;
        p += d.p;
        m += d.m;
    }
    return off;
}

/// Stacked network matrices for one mode combination (one mode index per
/// subsystem; all zeros for a plain LTI network).
struct StackedNetwork {
    Matrix A, B1, B2, B3, C, H;
    Matrix D;       // zero when no subsystem declares feedthrough
    Matrix Q, S, R; // block-diagonal supply
    bool has_feedthrough = false;
};

[[nodiscard]] inline StackedNetwork stack_network(const NetworkModel& net,
                                                  const std::vector<int>& mode_combo) {
    const int N = net.size();
    if (static_cast<int>(mode_combo.size()) != N) {
        throw std::invalid_argument("stack_network: mode combination size mismatch");
    }
    Dims total = net.stacked_dims();
    StackOffsets off = stack_offsets(net);

    StackedNetwork st;
    st.A = Matrix::Zero(total.n, total.n);
    st.B1 = Matrix::Zero(total.n, total.z);
    st.B2 = Matrix::Zero(total.n, total.l);
    st.B3 = Matrix::Zero(total.n, total.p);
    st.C = Matrix::Zero(total.m, total.n);
    st.D = Matrix::Zero(total.m, total.l);
    st.H = Matrix::Zero(total.z, total.n);
    st.Q = Matrix::Zero(total.m, total.m);
    st.S = Matrix::Zero(total.m, total.l);
    st.R = Matrix::Zero(total.l, total.l);

    for (int i = 0; i < N; ++i) {
        const auto& dyn = net.subsystems[i].mode(mode_combo[i]);
        Dims d = dyn.dims();
        st.A.block(off.n[i], off.n[i], d.n, d.n) = dyn.A;
        st.B1.block(off.n[i], off.z[i], d.n, d.z) = dyn.B1;
        st.B2.block(off.n[i], off.l[i], d.n, d.l) = dyn.B2;
        st.B3.block(off.n[i], off.p[i], d.n, d.p) = dyn.B3;
        st.C.block(off.m[i], off.n[i], d.m, d.n) = dyn.C;
        if (dyn.D) {
            st.D.block(off.m[i], off.l[i], d.m, d.l) = *dyn.D;
            st.has_feedthrough = true;
        }
        st.Q.block(off.m[i], off.m[i], d.m, d.m) = net.supplies[i].Q;
        st.S.block(off.m[i], off.l[i], d.m, d.l) = net.supplies[i].S;
        st.R.block(off.l[i], off.l[i], d.l, d.l) = net.supplies[i].R;
    }
    for (const auto& [key, H] : net.coupling.blocks) {
        auto [i, j] = key;
        st.H.block(off.z[i], off.n[j], H.rows(), H.cols()) = H;
    }
    return st;
}

/// Stacked gain matrix assembled from the sparse controller set.
[[nodiscard]] inline Matrix stack_gains(const NetworkModel& net, const ControllerSet& controllers) {
    Dims total = net.stacked_dims();
    StackOffsets off = stack_offsets(net);
    Matrix K = Matrix::Zero(total.p, total.n);
    for (const auto& [key, gain] : controllers.gains) {
        auto [i, j] = key;
        K.block(off.p[i], off.n[j], gain.rows(), gain.cols()) = gain;
    }
    return K;
}

} // namespace netqsr
