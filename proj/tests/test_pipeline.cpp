#include <catch2/catch_amalgamated.hpp>

#include "netqsr/pipeline.hpp"
#include "test_networks.hpp"

#include <random>

using namespace netqsr;
using netqsr::testing::mat;
using Catch::Approx;

namespace {

std::vector<Matrix> p_blocks_of(const CertificationReport& report) {
    std::vector<Matrix> out;
    for (const auto& rec : report.records) {
        out.push_back(rec.P);
    }
    return out;
}

void check_bridge(const NetworkModel& net, const CertificationReport& report) {
    NetworkModel resolved = resolved_network(net, report);
    double worst = verify_certificates(resolved, report.controllers, p_blocks_of(report));
    CHECK(worst >= -1e-6);
}

} // namespace

TEST_CASE("decoupled stable passive scalars certify at every step") {
    NetworkModel net = testing::decoupled_passive_network(4);
    CertificationReport report = run_analysis(net);
    REQUIRE(report.certified);
    for (const auto& step : report.steps) {
        CHECK(step.status == StepStatus::AnalysisFeasible);
    }
    check_bridge(net, report);
}

TEST_CASE("analysis of the coupled fixture stops at the saddle node") {
    NetworkModel net = testing::t3_network();
    CertificationReport report = run_analysis(net);
    REQUIRE_FALSE(report.certified);
    REQUIRE(report.steps.size() == 1);
    CHECK(report.steps[0].subsystem == 0);
    CHECK(report.steps[0].status == StepStatus::Infeasible);
}

TEST_CASE("synthesis certifies the three-node fixture with no gain at the stable node") {
    NetworkModel net = testing::t3_network();
    CertificationReport report = run_synthesis(net);
    REQUIRE(report.certified);
    REQUIRE(report.steps.size() == 3);

    CHECK(report.steps[0].status == StepStatus::Synthesized);
    CHECK(report.steps[1].status == StepStatus::Synthesized);
    // the stable node needs no control at all
    CHECK(report.steps[2].status == StepStatus::AnalysisFeasible);
    CHECK(report.steps[2].gains_designed.empty());
    CHECK_FALSE(report.controllers.has(2, 2));
    CHECK_FALSE(report.controllers.has(1, 2));
    CHECK_FALSE(report.controllers.has(2, 1));

    check_bridge(net, report);
}

TEST_CASE("synthesis works for every published processing order") {
    NetworkModel net = testing::t4_network();

    SECTION("declared order") {
        net.sequence = {0, 1, 2, 3};
        CertificationReport report = run_synthesis(net);
        REQUIRE(report.certified);
        CHECK(report.steps[2].gains_designed.empty()); // still nothing at the stable node
        check_bridge(net, report);
    }
    SECTION("stable node first") {
        net.sequence = {2, 1, 0, 3};
        CertificationReport report = run_synthesis(net);
        REQUIRE(report.certified);
        // the coupling gains between nodes 2 and 3 turn out unnecessary
        CHECK_FALSE(report.controllers.has(1, 2));
        CHECK_FALSE(report.controllers.has(2, 1));
        check_bridge(net, report);
    }
    SECTION("uncoupled pair first exchanges no records") {
        net.sequence = {2, 3, 0, 1};
        InProcessChannel channel;
        CertificationReport report = run_synthesis(net, {}, &channel);
        REQUIRE(report.certified);
        for (const auto& entry : channel.log()) {
            // nodes 3 and 4 are uncoupled: no record may travel between them
            CHECK_FALSE((entry.from == 2 && entry.to == 3 && entry.kind == "record"));
            CHECK_FALSE((entry.from == 3 && entry.to == 2 && entry.kind == "record"));
        }
        check_bridge(net, report);
    }
}

TEST_CASE("prefix verification holds at every step of the four-node fixture") {
    NetworkModel net = testing::t4_network();
    PipelineOptions opt;
    opt.verify_prefix = true;
    CHECK_NOTHROW(run_synthesis(net, opt));
}

TEST_CASE("payloads carry record aggregates only") {
    NetworkModel net = testing::t3_network();
    InProcessChannel channel;
    CertificationReport report = run_synthesis(net, {}, &channel);
    REQUIRE(report.certified);

    // reconstruct one payload and inspect its schema
    NeighborPayload p;
    p.from = 0;
    p.M = report.records[0].M;
    p.P = report.records[0].P;
    p.structured = report.records[0].structured;
    p.coupling_term = {Matrix::Zero(2, 1)};
    p.gain_factor = {Matrix::Zero(2, 2)};
    Json j = Json::parse(payload_to_json(p));
    const std::vector<std::string> allowed = {"from", "M", "P", "structured",
                                              "coupling_term", "gain_factor", "rows"};
    for (const auto& [key, value] : j.items()) {
        CHECK(std::find(allowed.begin(), allowed.end(), key) != allowed.end());
    }
    CHECK_FALSE(j.contains("A"));
    CHECK_FALSE(j.contains("B1"));
    CHECK_FALSE(j.contains("B2"));
    CHECK_FALSE(j.contains("B3"));
    CHECK_FALSE(j.contains("C"));

    // payloads survive the serialization round trip
    NeighborPayload q = payload_from_json(payload_to_json(p));
    CHECK(q.from == p.from);
    CHECK(q.M.isApprox(p.M, 1e-15));
    CHECK(q.structured == p.structured);
}

TEST_CASE("compositional join solves only the new node and keeps prior gains") {
    NetworkModel t3 = testing::t3_network();
    CertificationReport base = run_synthesis(t3);
    REQUIRE(base.certified);

    CompositionalResult joined = run_compositional(t3, base, testing::sigma4_extension());
    REQUIRE(joined.report.certified);
    CHECK(joined.network.size() == 4);
    CHECK(joined.report.steps.size() == base.steps.size() + 1);

    // pre-existing gains and records are byte-identical
    for (const auto& [key, K] : base.controllers.gains) {
        REQUIRE(joined.report.controllers.gains.count(key) == 1);
        CHECK(joined.report.controllers.gains.at(key) == K);
    }
    for (std::size_t i = 0; i < base.records.size(); ++i) {
        CHECK(joined.report.records[i].M == base.records[i].M);
        CHECK(joined.report.records[i].P == base.records[i].P);
    }

    check_bridge(joined.network, joined.report);
}

TEST_CASE("compositional join of a disconnected passive node designs nothing") {
    NetworkModel t3 = testing::t3_network();
    CertificationReport base = run_synthesis(t3);
    REQUIRE(base.certified);

    NetworkExtension ext;
    ext.subsystem.name = "island";
    SubsystemDynamics d;
    d.A = mat({{-2}});
    d.B1 = Matrix::Zero(1, 0);
    d.B2 = mat({{1}});
    d.B3 = mat({{1}});
    d.C = mat({{1}});
    ext.subsystem.modes = {d};
    ext.supply = supply_preset(SupplyPreset::Passive, {}, 1, 1);

    CompositionalResult joined = run_compositional(t3, base, ext);
    REQUIRE(joined.report.certified);
    CHECK(joined.report.steps.back().status == StepStatus::AnalysisFeasible);
    CHECK(joined.report.steps.back().gains_designed.empty());
}

TEST_CASE("joining a node that already exists is rejected") {
    NetworkModel t3 = testing::t3_network();
    CertificationReport base = run_synthesis(t3);
    REQUIRE(base.certified);
    NetworkExtension ext = testing::sigma4_extension();
    ext.subsystem.name = "sigma2";
    CHECK_THROWS_AS(run_compositional(t3, base, ext), std::invalid_argument);
}

TEST_CASE("single-mode switched run matches the plain run") {
    NetworkModel net = testing::t3_network();
    CertificationReport a = run_synthesis(net);
    CertificationReport b = run_switched_synthesis(net);
    REQUIRE(a.certified);
    REQUIRE(b.certified);
    REQUIRE(a.controllers.gains.size() == b.controllers.gains.size());
    for (const auto& [key, K] : a.controllers.gains) {
        CHECK(b.controllers.gains.at(key) == K);
    }
}

TEST_CASE("switched node with two modes certifies under a shared storage matrix") {
    NetworkModel net = testing::decoupled_passive_network(2);
    // make node 1 switched: a second mode with different dynamics
    SubsystemDynamics alt = net.subsystems[0].modes[0];
    alt.A = mat({{-4.0}});
    net.subsystems[0].modes.push_back(alt);
    net.supplies[0] = supply_preset(SupplyPreset::L2, {2.0}, 1, 1);
    net.coupling.blocks[{0, 1}] = mat({{0.2}});
    net.coupling.blocks[{1, 0}] = mat({{0.3}});

    CertificationReport report = run_switched_synthesis(net);
    REQUIRE(report.certified);
    check_bridge(net, report);
}

TEST_CASE("random full-authority networks synthesize and pass the bridge") {
    std::mt19937_64 rng(987654);
    testing::RandomNetworkOptions opt;
    opt.square_b3 = true;
    opt.coupling_scale = 0.3;
    int done = 0;
    while (done < 15) {
        NetworkModel net = testing::random_network(rng, opt);
        CertificationReport report = run_synthesis(net);
        INFO("trial " << done << " failure: " << report.failure);
        REQUIRE(report.certified);
        check_bridge(net, report);
        ++done;
    }
}

TEST_CASE("improper networks are rejected up front") {
    NetworkModel net = testing::t3_network();
    net.sequence = {0, 0, 1};
    CHECK_THROWS_AS(run_analysis(net), std::invalid_argument);
}
