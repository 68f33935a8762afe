#include <catch2/catch_amalgamated.hpp>

#include "netqsr/sdp.hpp"

#include <random>

using namespace netqsr;
using Catch::Approx;

TEST_CASE("scalar bound with linear objective") {
    // min x  s.t.  x - 1 >= 0
    VariablePool pool;
    AffineMatrix x = AffineMatrix::variable(pool, 1, 1);
    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.objective = Vector::Zero(1);
    prob.objective(0) = 1.0;
    prob.add_psd(x - AffineMatrix::of_constant(Matrix::Constant(1, 1, 1.0)));

    SdpSolution sol = solve_sdp(prob);
    REQUIRE(sol.feasible());
    CHECK(sol.x(0) >= 1.0);
    CHECK(sol.x(0) <= 1.2); // objective pulls toward the floored boundary
}

TEST_CASE("arrow matrix feasibility") {
    // min x  s.t.  [[x, 1], [1, x]] >= 0, optimum at x = 1
    VariablePool pool;
    int xv = pool.allocate();
    AffineMatrix con(2, 2);
    con.constant << 0, 1, 1, 0;
    Matrix coeff = Matrix::Identity(2, 2);
    con.coeffs[xv] = coeff;

    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.objective = Vector::Zero(1);
    prob.objective(0) = 1.0;
    prob.add_psd(con);

    SdpSolution sol = solve_sdp(prob);
    REQUIRE(sol.feasible());
    Matrix value = con.eval(sol.x);
    CHECK(min_eigenvalue(value) >= 0.0);
    CHECK(sol.x(0) <= 1.5);
}

TEST_CASE("contradictory scalar constraints are infeasible") {
    VariablePool pool;
    AffineMatrix x = AffineMatrix::variable(pool, 1, 1);
    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.add_psd(x - AffineMatrix::of_constant(Matrix::Constant(1, 1, 1.0)));  // x >= 1
    prob.add_psd(x.scaled(-1.0) - AffineMatrix::of_constant(Matrix::Constant(1, 1, 1.0))); // -x >= 1

    SdpSolution sol = solve_sdp(prob);
    CHECK(sol.status == SdpSolution::Status::Infeasible);
    CHECK(sol.margin <= 0.0);
}

TEST_CASE("equality constraints pin matrix entries") {
    VariablePool pool;
    AffineMatrix P = AffineMatrix::variable_symmetric(pool, 2);
    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.objective = Vector::Zero(pool.size());
    // minimize trace P
    for (const auto& [k, coeff] : P.coeffs) {
        prob.objective(k) = coeff.trace();
    }
    prob.add_psd(P - AffineMatrix::of_constant(Matrix::Identity(2, 2)));

    AffineMatrix corner(1, 1);
    corner.constant(0, 0) = -3.0;
    for (const auto& [k, coeff] : P.coeffs) {
        if (coeff(0, 0) != 0.0) {
            Matrix c(1, 1);
            c << coeff(0, 0);
            corner.coeffs[k] = c;
        }
    }
    prob.add_zero(corner); // P(0,0) == 3

    SdpSolution sol = solve_sdp(prob);
    REQUIRE(sol.feasible());
    Matrix value = P.eval(sol.x);
    CHECK(value(0, 0) == Approx(3.0).margin(1e-9));
    CHECK(min_eigenvalue(Matrix(value - Matrix::Identity(2, 2))) >= -1e-9);
    CHECK(value(1, 1) <= 2.0); // objective keeps the free diagonal small
}

TEST_CASE("inconsistent equalities are reported infeasible") {
    VariablePool pool;
    AffineMatrix x = AffineMatrix::variable(pool, 1, 1);
    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.add_psd(x);
    prob.add_zero(x - AffineMatrix::of_constant(Matrix::Constant(1, 1, 1.0)));
    prob.add_zero(x - AffineMatrix::of_constant(Matrix::Constant(1, 1, 2.0)));
    SdpSolution sol = solve_sdp(prob);
    CHECK(sol.status == SdpSolution::Status::Infeasible);
}

TEST_CASE("randomly generated feasible problems are solved and verified") {
    std::mt19937_64 rng(314159);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < 30; ++trial) {
        const int nvars = 4;
        const int dim = 4;
        VariablePool pool;
        int base = pool.allocate(nvars);

        // Construct F(x) = F0 + sum x_k S_k with F(x*) = I for a random x*.
        Vector xstar(nvars);
        std::vector<Matrix> S;
        for (int k = 0; k < nvars; ++k) {
            Matrix raw(dim, dim);
            for (int r = 0; r < dim; ++r)
                for (int c = 0; c < dim; ++c) raw(r, c) = gauss(rng);
            S.push_back(0.5 * (raw + raw.transpose()));
            xstar(k) = gauss(rng);
        }
        Matrix F0 = Matrix::Identity(dim, dim);
        for (int k = 0; k < nvars; ++k) {
            F0 -= xstar(k) * S[static_cast<std::size_t>(k)];
        }
        AffineMatrix con(dim, dim);
        con.constant = F0;
        for (int k = 0; k < nvars; ++k) {
            con.coeffs[base + k] = S[static_cast<std::size_t>(k)];
        }

        SdpProblem prob;
        prob.num_vars = pool.size();
        prob.add_psd(con);
        SdpSolution sol = solve_sdp(prob);
        REQUIRE(sol.feasible());
        CHECK(min_eigenvalue(con.eval(sol.x)) >= -1e-9);
    }
}

TEST_CASE("solver output is deterministic") {
    VariablePool pool;
    AffineMatrix P = AffineMatrix::variable_symmetric(pool, 3);
    SdpProblem prob;
    prob.num_vars = pool.size();
    prob.objective = Vector::Zero(pool.size());
    for (const auto& [k, coeff] : P.coeffs) {
        prob.objective(k) = coeff.trace();
    }
    prob.add_psd(P - AffineMatrix::of_constant(0.5 * Matrix::Identity(3, 3)));

    SdpSolution a = solve_sdp(prob);
    SdpSolution b = solve_sdp(prob);
    REQUIRE(a.feasible());
    REQUIRE(b.feasible());
    CHECK(a.x == b.x);
}

TEST_CASE("affine matrix algebra building blocks") {
    VariablePool pool;
    AffineMatrix X = AffineMatrix::variable(pool, 2, 2);
    Matrix L(2, 2), R(2, 2);
    L << 1, 2, 3, 4;
    R << 0, 1, 1, 0;
    AffineMatrix prod = L * X + X * R;
    Vector x = Vector::Zero(pool.size());
    x << 1, 2, 3, 4; // X = [[1,2],[3,4]]
    Matrix Xv(2, 2);
    Xv << 1, 2, 3, 4;
    CHECK(prod.eval(x).isApprox(Matrix(L * Xv + Xv * R), 1e-14));

    AffineMatrix big(4, 4);
    big.add_block(0, 2, X);
    big.add_block(2, 0, X.transpose());
    Matrix expected = Matrix::Zero(4, 4);
    expected.block(0, 2, 2, 2) = Xv;
    expected.block(2, 0, 2, 2) = Xv.transpose();
    CHECK(big.eval(x).isApprox(expected, 1e-14));

    AffineMatrix g_eye = AffineMatrix::variable_scaled(pool, Matrix::Identity(2, 2));
    Vector y = Vector::Zero(pool.size());
    y(4) = 2.5;
    CHECK(g_eye.eval(y).isApprox(Matrix(2.5 * Matrix::Identity(2, 2)), 1e-14));
}
