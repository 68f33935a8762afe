#include <catch2/catch_amalgamated.hpp>

#include "netqsr/blockpd.hpp"
#include "netqsr/messenger.hpp"
#include "test_networks.hpp"

#include <random>

using namespace netqsr;
using netqsr::testing::mat;
using Catch::Approx;

namespace {

MessengerInputs standalone_node3() {
    // Stable scalar with self-coupling 0.2 under a passivity target.
    MessengerInputs in;
    in.self.A = mat({{-1}});
    in.self.B1 = mat({{1}});
    in.self.B2 = mat({{1}});
    in.self.B3 = mat({{1}});
    in.self.C = mat({{1}});
    in.supply = supply_preset(SupplyPreset::Passive, {}, 1, 1);
    in.P = mat({{0.5}});
    in.H_ii = mat({{0.2}});
    return in;
}

} // namespace

TEST_CASE("self term of the stable scalar node") {
    Matrix mu = self_dissipation(standalone_node3());
    CHECK(mu.isApprox(mat({{0.8, 0.0}, {0.0, 0.0}}), 1e-12));
}

TEST_CASE("self term with vanishing dynamics reduces to the supply") {
    MessengerInputs in;
    in.self.A = Matrix::Zero(2, 2);
    in.self.B1 = Matrix::Zero(2, 1);
    in.self.B2 = Matrix::Zero(2, 2);
    in.self.B3 = Matrix::Zero(2, 1);
    in.self.C = Matrix::Zero(2, 2);
    in.supply.Q = Matrix::Zero(2, 2);
    in.supply.S = Matrix::Zero(2, 2);
    in.supply.R = Matrix::Identity(2, 2);
    in.P = mat({{0.7, 0.0}, {0.0, 1.3}});
    Matrix mu = self_dissipation(in);
    Matrix expected = Matrix::Zero(4, 4);
    expected.bottomRightCorner(2, 2) = Matrix::Identity(2, 2);
    CHECK(mu.isApprox(expected, 1e-14));
}

TEST_CASE("zero self gain equals the open-loop form") {
    MessengerInputs open = standalone_node3();
    MessengerInputs closed = standalone_node3();
    closed.K_ii = Matrix::Zero(1, 1);
    CHECK(self_dissipation(open).isApprox(self_dissipation(closed), 1e-15));
}

TEST_CASE("closed-loop self term folds the gain into the coupling block") {
    MessengerInputs in = standalone_node3();
    in.K_ii = mat({{-2.0}});
    // Hh = P (B1 H + B3 K) = 0.5 (0.2 - 2.0) = -0.9, so the state block gains +1.8.
    Matrix mu = self_dissipation(in);
    CHECK(mu(0, 0) == Approx(1.0 + 1.8));
}

TEST_CASE("energy flow with no processed neighbors is zero") {
    MessengerInputs in = standalone_node3();
    CHECK(neighbor_energy_flow(in).norm() == 0.0);
    MessengerRecord rec = messenger_matrix(in);
    CHECK(rec.M.isApprox(self_dissipation(in), 1e-14));
}

TEST_CASE("energy flow through one structured scalar neighbor") {
    const double h = 0.7;
    const double a = 2.0;
    MessengerInputs in = standalone_node3();
    in.H_ii = Matrix::Zero(1, 1);

    IncomingNeighbor nb;
    nb.index = 0;
    nb.M = mat({{a, 0.0}, {0.0, 0.0}});
    nb.P = mat({{1.0}});
    nb.structured = true;
    NeighborModeData md;
    md.coupling_term = mat({{h}}); // makes G = h with H_ij = 0
    md.gain_factor = mat({{1.0}});
    nb.modes = {md};
    nb.H_ij = Matrix::Zero(1, 1);
    in.incoming = {nb};

    Matrix mu = neighbor_energy_flow(in);
    CHECK(mu.isApprox(mat({{h * h / a, 0.0}, {0.0, 0.0}}), 1e-12));
}

TEST_CASE("energy flow is symmetric PSD for valid strict records") {
    std::mt19937_64 rng(99);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        MessengerInputs in;
        in.self.A = testing::random_spd(rng, 2);
        in.self.B1 = mat({{gauss(rng)}, {gauss(rng)}});
        in.self.B2 = mat({{gauss(rng)}, {gauss(rng)}});
        in.self.B3 = Matrix::Identity(2, 2);
        in.self.C = mat({{gauss(rng), gauss(rng)}});
        in.supply = supply_preset(SupplyPreset::L2, {1.0}, 1, 1);
        in.P = testing::random_spd(rng, 2);

        for (int k = 0; k < 2; ++k) {
            IncomingNeighbor nb;
            nb.index = k;
            nb.M = testing::random_spd(rng, 3, 0.5, 2.0); // strictly positive record
            nb.P = testing::random_spd(rng, 2);
            NeighborModeData md;
            md.coupling_term = mat({{gauss(rng), gauss(rng)}, {gauss(rng), gauss(rng)}});
            md.gain_factor = nb.P;
            nb.modes = {md};
            nb.H_ij = mat({{gauss(rng), gauss(rng)}});
            in.incoming.push_back(nb);
        }

        Matrix mu = neighbor_energy_flow(in);
        CHECK(asymmetry(mu) < 1e-12);
        CHECK(min_eigenvalue(mu) >= -1e-10);
    }
}

TEST_CASE("standalone stable node is certified by its own record") {
    MessengerRecord rec = messenger_matrix(standalone_node3());
    CHECK(rec.M.isApprox(mat({{0.8, 0.0}, {0.0, 0.0}}), 1e-12));
    CHECK(rec.structured);
    auto check = check_record_positivity(rec);
    CHECK(check.pass);
}

TEST_CASE("messenger matrices equal the pivots of the permuted certificate") {
    std::mt19937_64 rng(20240812);
    int accepted = 0;
    while (accepted < 100) {
        NetworkModel net = testing::random_network(rng);
        std::vector<Matrix> P_blocks;
        std::vector<int> state_dims, dist_dims, part_sizes;
        for (const auto& sub : net.subsystems) {
            P_blocks.push_back(testing::random_spd(rng, sub.dims().n));
            state_dims.push_back(sub.dims().n);
            dist_dims.push_back(sub.dims().l);
            part_sizes.push_back(sub.dims().n + sub.dims().l);
        }

        Matrix gamma = centralized_gamma(net, ControllerSet{}, P_blocks).gamma;
        Matrix E = interleaving_permutation(state_dims, dist_dims);
        Matrix W = E * gamma * E.transpose();

        // skip draws whose pivots are near-singular (the recursion needs inverses)
        bool usable = true;
        std::vector<Matrix> pivots;
        try {
            pivots = sequential_positivity(W, BlockPartition{part_sizes}).pivots;
        } catch (const std::runtime_error&) {
            usable = false;
        }
        if (usable) {
            for (const auto& piv : pivots) {
                Eigen::JacobiSVD<Matrix> svd(piv);
                if (svd.singularValues().minCoeff() < 1e-6 * svd.singularValues().maxCoeff()) {
                    usable = false;
                }
            }
        }
        if (!usable) continue;

        auto records = testing::messenger_chain(net, P_blocks);
        for (int i = 0; i < net.size(); ++i) {
            const Matrix& piv = pivots[static_cast<std::size_t>(i)];
            INFO("network " << accepted << " subsystem " << i);
            CHECK((records[static_cast<std::size_t>(i)].M - piv).norm() <= 1e-9 * (1.0 + piv.norm()));
        }
        ++accepted;
    }
}

TEST_CASE("pivot identity also holds with one-directional couplings") {
    std::mt19937_64 rng(4242);
    testing::RandomNetworkOptions opt;
    opt.symmetric_support = false;
    int accepted = 0;
    while (accepted < 30) {
        NetworkModel net = testing::random_network(rng, opt);
        std::vector<Matrix> P_blocks;
        std::vector<int> state_dims, dist_dims, part_sizes;
        for (const auto& sub : net.subsystems) {
            P_blocks.push_back(testing::random_spd(rng, sub.dims().n));
            state_dims.push_back(sub.dims().n);
            dist_dims.push_back(sub.dims().l);
            part_sizes.push_back(sub.dims().n + sub.dims().l);
        }
        Matrix gamma = centralized_gamma(net, ControllerSet{}, P_blocks).gamma;
        Matrix E = interleaving_permutation(state_dims, dist_dims);
        Matrix W = E * gamma * E.transpose();
        std::vector<Matrix> pivots;
        try {
            pivots = sequential_positivity(W, BlockPartition{part_sizes}).pivots;
        } catch (const std::runtime_error&) {
            continue;
        }
        auto records = testing::messenger_chain(net, P_blocks);
        for (int i = 0; i < net.size(); ++i) {
            CHECK((records[static_cast<std::size_t>(i)].M - pivots[static_cast<std::size_t>(i)]).norm() <=
                  1e-9 * (1.0 + pivots[static_cast<std::size_t>(i)].norm()));
        }
        ++accepted;
    }
}

TEST_CASE("switched evaluation degenerates to the plain messenger matrix") {
    Subsystem sub;
    sub.name = "node";
    MessengerInputs in = standalone_node3();
    sub.modes = {in.self};
    auto result = switched_messenger(sub, in.supply, in.P, in.H_ii, Matrix(), {});
    REQUIRE(result.candidates.size() == 1);
    CHECK(result.selected.M.isApprox(messenger_matrix(in).M, 1e-14));
}

TEST_CASE("switched evaluation enumerates mode combinations and breaks ties low") {
    MessengerInputs base = standalone_node3();
    Subsystem sub;
    sub.name = "twin";
    sub.modes = {base.self, base.self}; // identical modes

    IncomingNeighbor nb;
    nb.index = 0;
    nb.M = mat({{2.0, 0.0}, {0.0, 1.0}});
    nb.P = mat({{1.0}});
    NeighborModeData md1{mat({{0.4}}), mat({{1.0}})};
    NeighborModeData md2{mat({{0.4}}), mat({{1.0}})};
    nb.modes = {md1, md2};
    nb.H_ij = mat({{0.1}});

    auto result = switched_messenger(sub, base.supply, base.P, base.H_ii, Matrix(), {nb});
    CHECK(result.candidates.size() == 4);
    CHECK(result.selected_index == 0); // all equal, lowest combination wins
    for (const auto& cand : result.candidates) {
        CHECK(cand.M.isApprox(result.candidates[0].M, 1e-14));
    }
}

TEST_CASE("switched evaluation enforces the combination budget") {
    MessengerInputs base = standalone_node3();
    Subsystem sub;
    sub.modes = std::vector<SubsystemDynamics>(20, base.self);
    IncomingNeighbor nb;
    nb.index = 0;
    nb.M = mat({{2.0, 0.0}, {0.0, 1.0}});
    nb.P = mat({{1.0}});
    nb.modes = std::vector<NeighborModeData>(600, NeighborModeData{mat({{0.4}}), mat({{1.0}})});
    nb.H_ij = mat({{0.1}});
    CHECK_THROWS_AS(switched_messenger(sub, base.supply, base.P, base.H_ii, Matrix(), {nb}),
                    std::runtime_error);
}

TEST_CASE("robustness margin matrix") {
    SECTION("zero uncertainty leaves verification unchanged") {
        CHECK(robust_margin(Matrix::Identity(2, 2), 0.0, 1).norm() == 0.0);
    }
    SECTION("direct formula") {
        Matrix bound = robust_margin(Matrix::Identity(2, 2), 0.1, 1);
        Matrix expected = Matrix::Zero(3, 3);
        expected(0, 0) = expected(1, 1) = 0.2;
        CHECK(bound.isApprox(expected, 1e-15));
    }
    SECTION("negative eps is rejected") {
        CHECK_THROWS_AS(robust_margin(Matrix::Identity(2, 2), -0.1, 1), std::invalid_argument);
    }
}

TEST_CASE("feedthrough substitution variants") {
    SubsystemDynamics d;
    d.A = mat({{-1}});
    d.B1 = mat({{1}});
    d.B2 = mat({{1}});
    d.B3 = mat({{1}});
    d.C = mat({{1}});
    d.D = mat({{0.3}});
    SupplyRate s = supply_preset(SupplyPreset::L2, {2.0}, 1, 1);
    // replace: -D'QD - (D'S + S'D) = 0.09/2 = 0.045; augment adds R = 2
    CHECK(effective_r(d, s, FeedthroughVariant::ReplaceR)(0, 0) == Approx(0.045));
    CHECK(effective_r(d, s, FeedthroughVariant::AugmentR)(0, 0) == Approx(2.045));
}
