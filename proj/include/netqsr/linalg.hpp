#pragma once

// =============================================================================
// Small dense linear-algebra helpers shared across the library
// =============================================================================

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>

namespace netqsr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

/// Shared numeric tolerances. All thresholds scale with the data so that
/// certification verdicts do not depend on the unit system of the model.
struct Tolerances {
    double symmetry_rel = 1e-9;   // accepted asymmetry: max|X-X'| <= rel*(1+max|X|)
    double eps_pd_rel = 1e-8;     // definiteness threshold: eps_pd = rel*(1+||W||_F)
    double lmi_slack_rel = 1e-6;  // strictness slack: eps = rel*(1+||data||)
    double audit_rel = 1e-4;      // trajectory audit: tol = rel*(1+max V)

    [[nodiscard]] double eps_pd(double scale) const { return eps_pd_rel * (1.0 + scale); }
    [[nodiscard]] double lmi_slack(double scale) const { return lmi_slack_rel * (1.0 + scale); }
};

[[nodiscard]] inline bool is_finite(const Matrix& x) {
    return x.allFinite();
}

/// Largest absolute asymmetry max|X - X'|; zero for a symmetric matrix.
[[nodiscard]] inline double asymmetry(const Matrix& x) {
    if (x.rows() != x.cols()) {
        throw std::invalid_argument("asymmetry: matrix is not square");
    }
    return (x - x.transpose()).cwiseAbs().maxCoeff();
}

[[nodiscard]] inline bool is_symmetric(const Matrix& x, double symmetry_rel = 1e-9) {
    double mag = x.size() > 0 ? x.cwiseAbs().maxCoeff() : 0.0;
    return asymmetry(x) <= symmetry_rel * (1.0 + mag);
}

/// Returns (X + X')/2 when X is symmetric within tolerance, throws otherwise.
/// File round-trips may perturb symmetric inputs; this restores them exactly.
[[nodiscard]] inline Matrix symmetrized(const Matrix& x, double symmetry_rel = 1e-9,
                                        const std::string& what = "matrix") {
    if (!is_symmetric(x, symmetry_rel)) {
        throw std::invalid_argument(what + " is not symmetric within tolerance");
    }
    return 0.5 * (x + x.transpose());
}

/// Minimum eigenvalue of a symmetric matrix (0x0 counts as vacuously +inf).
[[nodiscard]] inline double min_eigenvalue(const Matrix& sym) {
    if (sym.rows() == 0) {
        return std::numeric_limits<double>::infinity();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) {
        throw std::runtime_error("min_eigenvalue: eigen-decomposition failed");
    }
    return es.eigenvalues().minCoeff();
}

[[nodiscard]] inline double max_eigenvalue(const Matrix& sym) {
    if (sym.rows() == 0) {
        return -std::numeric_limits<double>::infinity();
    }
    Eigen::SelfAdjointEigenSolver<Matrix> es(sym, Eigen::EigenvaluesOnly);
    if (es.info() != Eigen::Success) {
        throw std::runtime_error("max_eigenvalue: eigen-decomposition failed");
    }
    return es.eigenvalues().maxCoeff();
}

/// Moore-Penrose pseudo-inverse via SVD with relative rank cutoff.
[[nodiscard]] inline Matrix pseudo_inverse(const Matrix& x, double rel_cutoff = 1e-12) {
    if (x.size() == 0) {
        return Matrix(x.cols(), x.rows());
    }
    Eigen::JacobiSVD<Matrix> svd(x, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    double cutoff = rel_cutoff * (sv.size() > 0 ? sv(0) : 0.0);
    Vector inv = sv;
    for (Eigen::Index i = 0; i < sv.size(); ++i) {
        inv(i) = sv(i) > cutoff ? 1.0 / sv(i) : 0.0;
    }
    return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Spectral (operator 2-) norm.
[[nodiscard]] inline double spectral_norm(const Matrix& x) {
    if (x.size() == 0) {
        return 0.0;
    }
    return Eigen::JacobiSVD<Matrix>(x).singularValues()(0);
}

/// FNV-1a 64-bit hash of a byte string; used for file-integrity fields.
[[nodiscard]] inline std::uint64_t fnv1a64(const std::string& bytes) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= static_cast<std::uint64_t>(c);
        h *= 1099511628211ull;
    }
    return h;
}

} // namespace netqsr
