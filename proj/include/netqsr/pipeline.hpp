#pragma once

// =============================================================================
// Sequential certification pipeline
// =============================================================================
// Walks the network in its declared sequence. Each step receives record
// payloads from the already-processed nodes it actually interacts with,
// solves an analysis problem (and, when synthesizing, falls back to local
// control design), stores its certified record, and hands gains back to the
// processed nodes they act on. Payloads travel through a channel as
// serialized messages; an agent never sees another subsystem's raw
// state-space matrices, only record aggregates.
// =============================================================================

#include "netqsr/blockpd.hpp"
#include "netqsr/feasibility.hpp"
#include "netqsr/messenger.hpp"
#include "netqsr/model.hpp"
#include "netqsr/serialize.hpp"

#include <chrono>
#include <deque>
#include <memory>
#include <string>
#include <vector>

namespace netqsr {

// =============================================================================
// Message channel
// =============================================================================

/// Point-to-point message transport between subsystem agents. The in-process
/// default queues serialized payloads; the interface allows the same
/// pipeline to run over a socket transport later.
class MessageChannel {
public:
    virtual ~MessageChannel() = default;
    virtual void send(int from, int to, const std::string& kind, const std::string& body) = 0;
    [[nodiscard]] virtual std::string receive(int from, int to, const std::string& kind) = 0;
};

class InProcessChannel final : public MessageChannel {
public:
    struct Entry {
        int from;
        int to;
        std::string kind;
    };

    void send(int from, int to, const std::string& kind, const std::string& body) override {
        queues_[key(from, to, kind)].push_back(body);
        log_.push_back({from, to, kind});
    }

    [[nodiscard]] std::string receive(int from, int to, const std::string& kind) override {
        auto it = queues_.find(key(from, to, kind));
        if (it == queues_.end() || it->second.empty()) {
            throw std::runtime_error("channel: no message from " + std::to_string(from + 1) +
                                     " to " + std::to_string(to + 1) + " of kind " + kind);
        }
        std::string body = it->second.front();
        it->second.pop_front();
        return body;
    }

    /// Full traffic log, used to assert which agents talked to each other.
    [[nodiscard]] const std::vector<Entry>& log() const { return log_; }

private:
    static std::string key(int from, int to, const std::string& kind) {
        return std::to_string(from) + ">" + std::to_string(to) + ":" + kind;
    }
    std::map<std::string, std::deque<std::string>> queues_;
    std::vector<Entry> log_;
};

// =============================================================================
// Reports
// =============================================================================

enum class StepStatus { AnalysisFeasible, Synthesized, Infeasible, NumericalFailure, RecoveryFailure };

[[nodiscard]] inline std::string to_string(StepStatus s) {
    switch (s) {
        case StepStatus::AnalysisFeasible: return "analysis-feasible";
        case StepStatus::Synthesized: return "synthesized";
        case StepStatus::Infeasible: return "infeasible";
        case StepStatus::NumericalFailure: return "numerical-failure";
        case StepStatus::RecoveryFailure: return "recovery-failure";
    }
    return "unknown";
}

struct StepReport {
    int subsystem = -1;
    std::string name;
    StepStatus status = StepStatus::Infeasible;
    double margin_p = 0.0;
    double margin_m = 0.0;
    double gamma = std::numeric_limits<double>::quiet_NaN();
    std::map<std::pair<int, int>, Matrix> gains_designed;
    double wall_seconds = 0.0; // in-memory diagnostics; kept out of serialized reports
    std::string detail;
};

struct CertificationReport {
    bool certified = false;
    std::vector<int> sequence;
    std::vector<StepReport> steps;                 // sequence order
    std::vector<MessengerRecord> records;          // by subsystem index
    std::vector<std::map<int, Matrix>> rows;       // by subsystem index
    std::vector<SupplyRate> resolved_supplies;     // by subsystem index
    ControllerSet controllers;
    std::string failure;
};

struct PipelineOptions {
    StepOptions step;
    std::map<int, double> robust_eps; // per-subsystem uncertainty bounds
    /// Test builds: check the processed prefix against the centralized test
    /// after every step and fail loudly on a violation.
    bool verify_prefix = false;
};

// =============================================================================
// Support pattern (who must talk to whom)
// =============================================================================

namespace pipeline_detail {

/// Processed nodes whose eliminated block toward `node` is structurally
/// nonzero: direct interaction, or an indirect path through nodes that were
/// already needed. `row_support[x]` lists the nodes x's own record rows
/// touch. Only these nodes send payloads to `node`.
[[nodiscard]] inline std::vector<int> needed_nodes(const NetworkModel& net, int node,
                                                   const std::vector<int>& processed,
                                                   const std::vector<std::set<int>>& row_support) {
    std::vector<int> needed;
    std::set<int> needed_set;
    for (std::size_t a = 0; a < processed.size(); ++a) {
        int ka = processed[a];
        bool nz = net.coupling.has(node, ka) || net.coupling.has(ka, node);
        if (!nz) {
            for (int kb : needed) {
                if (row_support[static_cast<std::size_t>(ka)].count(kb)) {
                    nz = true;
                    break;
                }
            }
        }
        if (nz) {
            needed.push_back(ka);
            needed_set.insert(ka);
        }
    }
    return needed;
}

/// Builds and routes the payload node j owes step i through the channel.
inline void send_payload(const NetworkModel& net, int j, int i, const MessengerRecord& record,
                         const std::map<int, Matrix>& record_rows, MessageChannel& channel) {
    const auto& sub_j = net.subsystems[j];
    const Dims dj = sub_j.dims();
    const Dims di = net.subsystems[i].dims();
    NeighborPayload p;
    p.from = j;
    p.M = record.M;
    p.P = record.P;
    p.structured = record.structured;
    Matrix H_ji = net.coupling.block_or_zero(j, i, dj.z, di.n);
    for (int s = 0; s < sub_j.mode_count(); ++s) {
        const auto& dyn = sub_j.mode(s);
        p.coupling_term.push_back(record.P * dyn.B1 * H_ji);
        p.gain_factor.push_back(record.P * dyn.B3);
    }
    p.rows = record_rows;
    channel.send(j, i, "record", payload_to_json(p));
}

[[nodiscard]] inline IncomingNeighbor incoming_from_payload(const NetworkModel& net, int i,
                                                            const std::string& body) {
    NeighborPayload p = payload_from_json(body);
    const Dims di = net.subsystems[i].dims();
    IncomingNeighbor nb;
    nb.index = p.from;
    nb.M = p.M;
    nb.P = p.P;
    nb.structured = p.structured;
    for (std::size_t s = 0; s < p.coupling_term.size(); ++s) {
        nb.modes.push_back({p.coupling_term[s], p.gain_factor[s]});
    }
    nb.H_ij = net.coupling.block_or_zero(i, p.from, di.z,
                                         static_cast<int>(p.P.rows()));
    nb.rows = p.rows;
    return nb;
}

inline StepStatus from_solve_status(SolveStatus s, bool synthesized) {
    switch (s) {
        case SolveStatus::Feasible:
            return synthesized ? StepStatus::Synthesized : StepStatus::AnalysisFeasible;
        case SolveStatus::Infeasible: return StepStatus::Infeasible;
        case SolveStatus::RecoveryFailure: return StepStatus::RecoveryFailure;
        case SolveStatus::NumericalFailure: return StepStatus::NumericalFailure;
    }
    return StepStatus::NumericalFailure;
}

} // namespace pipeline_detail

// =============================================================================
// Prefix verification helpers
// =============================================================================

/// Copy of the network with supplies replaced by the resolved ones from a
/// report (L2 gains made concrete).
[[nodiscard]] inline NetworkModel resolved_network(const NetworkModel& net,
                                                   const CertificationReport& report) {
    NetworkModel out = net;
    for (std::size_t i = 0; i < report.resolved_supplies.size() && i < out.supplies.size(); ++i) {
        if (report.resolved_supplies[i].Q.size() > 0) {
            out.supplies[i] = report.resolved_supplies[i];
        }
    }
    return out;
}

/// Sub-network restricted to `nodes` (reindexed in the given order), with
/// coupling blocks, supplies, and gains restricted accordingly.
[[nodiscard]] inline NetworkModel subnetwork(const NetworkModel& net, const std::vector<int>& nodes,
                                             const ControllerSet& controllers,
                                             ControllerSet& restricted) {
    NetworkModel out;
    std::map<int, int> remap;
    for (std::size_t k = 0; k < nodes.size(); ++k) {
        remap[nodes[k]] = static_cast<int>(k);
        out.subsystems.push_back(net.subsystems[static_cast<std::size_t>(nodes[k])]);
        out.supplies.push_back(net.supplies[static_cast<std::size_t>(nodes[k])]);
    }
    for (const auto& [key, H] : net.coupling.blocks) {
        auto [i, j] = key;
        if (remap.count(i) && remap.count(j)) {
            out.coupling.blocks[{remap[i], remap[j]}] = H;
        }
    }
    restricted.gains.clear();
    for (const auto& [key, K] : controllers.gains) {
        auto [i, j] = key;
        if (remap.count(i) && remap.count(j)) {
            restricted.gains[{remap[i], remap[j]}] = K;
        }
    }
    out.sequence = out.default_sequence();
    return out;
}

/// Centralized check of a (sub)network against a report's certificates over
/// every global mode combination. Returns the worst minimum eigenvalue.
[[nodiscard]] inline double verify_certificates(const NetworkModel& net,
                                                const ControllerSet& controllers,
                                                const std::vector<Matrix>& P_blocks,
                                                const Tolerances& tol = {}) {
    std::vector<int> combo(static_cast<std::size_t>(net.size()), 0);
    double worst = std::numeric_limits<double>::infinity();
    bool done = false;
    while (!done) {
        auto verdict = centralized_gamma(net, controllers, P_blocks, combo, tol);
        worst = std::min(worst, verdict.min_eigenvalue / (1.0 + verdict.gamma.norm()));
        done = true;
        for (std::size_t k = 0; k < combo.size(); ++k) {
            if (++combo[k] < net.subsystems[k].mode_count()) {
                done = false;
                break;
            }
            combo[k] = 0;
        }
    }
    return worst; // normalized: min_eig / (1 + ||Gamma||)
}

// =============================================================================
// Pipeline runs
// =============================================================================

namespace pipeline_detail {

[[nodiscard]] inline CertificationReport run_sequential(const NetworkModel& net,
                                                        const PipelineOptions& opt,
                                                        bool design_controllers,
                                                        MessageChannel* channel_override) {
    ValidationReport validation = validate_network(net, opt.step.tol);
    if (!validation.ok()) {
        throw std::invalid_argument("network is not proper:\n" + validation.to_string());
    }

    InProcessChannel own_channel;
    MessageChannel& channel = channel_override ? *channel_override : own_channel;

    const int N = net.size();
    CertificationReport report;
    report.sequence = net.sequence;
    report.records.resize(static_cast<std::size_t>(N));
    report.rows.resize(static_cast<std::size_t>(N));
    report.resolved_supplies.resize(static_cast<std::size_t>(N));

    std::vector<int> processed;
    std::vector<std::set<int>> row_support(static_cast<std::size_t>(N));

    for (int i : net.sequence) {
        auto t0 = std::chrono::steady_clock::now();
        const auto& sub = net.subsystems[i];
        const Dims di = sub.dims();

        StepReport step;
        step.subsystem = i;
        step.name = sub.name;

        // processed nodes this step must hear from
        std::vector<int> needed = needed_nodes(net, i, processed, row_support);
        for (int j : needed) {
            send_payload(net, j, i, report.records[static_cast<std::size_t>(j)],
                         report.rows[static_cast<std::size_t>(j)], channel);
        }

        StepData data;
        data.self = sub;
        data.supply = net.supplies[i];
        data.H_ii = net.coupling.block_or_zero(i, i, di.z, di.n);
        for (int j : needed) {
            data.incoming.push_back(
                incoming_from_payload(net, i, channel.receive(j, i, "record")));
        }

        StepOptions sopt = opt.step;
        if (auto it = opt.robust_eps.find(i); it != opt.robust_eps.end()) {
            sopt.robust_eps = it->second;
        }

        // try the no-new-gains analysis problem first
        StepOutcome outcome = solve_analysis_step(data, sopt);
        bool synthesized = false;
        if (outcome.status != SolveStatus::Feasible && design_controllers &&
            outcome.status != SolveStatus::NumericalFailure) {
            outcome = solve_synthesis_step(data, sopt);
            synthesized = true;
        }

        step.status = from_solve_status(outcome.status, synthesized);
        step.margin_p = outcome.margin_p;
        step.margin_m = outcome.margin_m;
        step.gamma = outcome.gamma;
        step.detail = outcome.detail;

        if (outcome.status == SolveStatus::Feasible) {
            report.records[static_cast<std::size_t>(i)] = outcome.record;
            report.rows[static_cast<std::size_t>(i)] = outcome.rows;
            report.resolved_supplies[static_cast<std::size_t>(i)] = outcome.resolved_supply;
            for (const auto& [k, row] : outcome.rows) {
                if (row.norm() > 0.0) {
                    row_support[static_cast<std::size_t>(i)].insert(k);
                }
            }
            if (synthesized) {
                if (outcome.K_ii.size() > 0) {
                    report.controllers.gains[{i, i}] = outcome.K_ii;
                    step.gains_designed[{i, i}] = outcome.K_ii;
                }
                for (const auto& [j, K] : outcome.K_ij) {
                    report.controllers.gains[{i, j}] = K;
                    step.gains_designed[{i, j}] = K;
                }
                for (const auto& [j, K] : outcome.K_ji) {
                    report.controllers.gains[{j, i}] = K;
                    step.gains_designed[{j, i}] = K;
                    // the coupling gain acts at subsystem j; hand it back
                    channel.send(i, j, "gain", Json{{"K", matrix_to_json(K)}}.dump());
                }
            }
        }

        step.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        report.steps.push_back(step);

        if (outcome.status != SolveStatus::Feasible) {
            report.certified = false;
            report.failure = "step " + std::to_string(i + 1) + " (" + sub.name +
                             "): " + to_string(step.status) +
                             (step.detail.empty() ? "" : " - " + step.detail);
            return report;
        }

        processed.push_back(i);

        if (opt.verify_prefix) {
            CertificationReport prefix_report = report;
            NetworkModel res = resolved_network(net, prefix_report);
            ControllerSet restricted;
            NetworkModel prefix = subnetwork(res, processed, report.controllers, restricted);
            std::vector<Matrix> P_blocks;
            for (int j : processed) {
                P_blocks.push_back(report.records[static_cast<std::size_t>(j)].P);
            }
            double worst = verify_certificates(prefix, restricted, P_blocks, opt.step.tol);
            if (worst < -1e-6) {
                throw std::runtime_error("prefix verification failed after step " +
                                         std::to_string(i + 1) + ": normalized margin " +
                                         std::to_string(worst));
            }
        }
    }

    report.certified = true;
    return report;
}

} // namespace pipeline_detail

/// Distributed analysis: certify the network as-is; the first step whose
/// conditions cannot be established stops the run.
[[nodiscard]] inline CertificationReport run_analysis(const NetworkModel& net,
                                                      const PipelineOptions& opt = {},
                                                      MessageChannel* channel = nullptr) {
    return pipeline_detail::run_sequential(net, opt, false, channel);
}

/// Distributed synthesis: each step first tries to certify with zero new
/// gains, then designs local controllers. Earlier steps are never re-solved.
[[nodiscard]] inline CertificationReport run_synthesis(const NetworkModel& net,
                                                       const PipelineOptions& opt = {},
                                                       MessageChannel* channel = nullptr) {
    return pipeline_detail::run_sequential(net, opt, true, channel);
}

/// Switched networks run through the same sequential machinery; the step
/// solvers enumerate mode combinations internally.
[[nodiscard]] inline CertificationReport run_switched_synthesis(const NetworkModel& net,
                                                                const PipelineOptions& opt = {},
                                                                MessageChannel* channel = nullptr) {
    return run_synthesis(net, opt, channel);
}

// =============================================================================
// Compositional extension
// =============================================================================

struct CompositionalResult {
    NetworkModel network;        // the extended network
    CertificationReport report;  // base report plus the new node's step
};

/// Joins one new subsystem to an already-certified network, solving only at
/// the new node. Pre-existing records and gains are carried over untouched.
[[nodiscard]] inline CompositionalResult run_compositional(const NetworkModel& base,
                                                           const CertificationReport& base_report,
                                                           const NetworkExtension& ext,
                                                           const PipelineOptions& opt = {},
                                                           MessageChannel* channel_override = nullptr) {
    if (!base_report.certified) {
        throw std::invalid_argument("run_compositional: base network is not certified");
    }
    if (base.index_of(ext.subsystem.name) >= 0) {
        throw std::invalid_argument("run_compositional: subsystem '" + ext.subsystem.name +
                                    "' is already part of the network");
    }

    CompositionalResult result;
    result.network = extend_network(base, ext);
    const NetworkModel& net = result.network;
    const int i = net.size() - 1;
    const Dims di = net.subsystems[i].dims();

    InProcessChannel own_channel;
    MessageChannel& channel = channel_override ? *channel_override : own_channel;

    CertificationReport report = base_report;
    report.sequence = net.sequence;
    report.records.resize(static_cast<std::size_t>(net.size()));
    report.rows.resize(static_cast<std::size_t>(net.size()));
    report.resolved_supplies.resize(static_cast<std::size_t>(net.size()));

    std::vector<std::set<int>> row_support(static_cast<std::size_t>(net.size()));
    for (int j = 0; j < i; ++j) {
        for (const auto& [k, row] : report.rows[static_cast<std::size_t>(j)]) {
            if (row.norm() > 0.0) {
                row_support[static_cast<std::size_t>(j)].insert(k);
            }
        }
    }
    std::vector<int> processed(base_report.sequence);

    std::vector<int> needed = pipeline_detail::needed_nodes(net, i, processed, row_support);
    for (int j : needed) {
        pipeline_detail::send_payload(net, j, i, report.records[static_cast<std::size_t>(j)],
                                      report.rows[static_cast<std::size_t>(j)], channel);
    }

    auto t0 = std::chrono::steady_clock::now();
    StepData data;
    data.self = net.subsystems[i];
    data.supply = net.supplies[i];
    data.H_ii = net.coupling.block_or_zero(i, i, di.z, di.n);
    for (int j : needed) {
        data.incoming.push_back(
            pipeline_detail::incoming_from_payload(net, i, channel.receive(j, i, "record")));
    }

    StepOptions sopt = opt.step;
    if (auto it = opt.robust_eps.find(i); it != opt.robust_eps.end()) {
        sopt.robust_eps = it->second;
    }

    StepOutcome outcome = solve_analysis_step(data, sopt);
    bool synthesized = false;
    if (outcome.status != SolveStatus::Feasible &&
        outcome.status != SolveStatus::NumericalFailure) {
        outcome = solve_compositional_step(data, sopt);
        synthesized = true;
    }

    StepReport step;
    step.subsystem = i;
    step.name = net.subsystems[i].name;
    step.status = pipeline_detail::from_solve_status(outcome.status, synthesized);
    step.margin_p = outcome.margin_p;
    step.margin_m = outcome.margin_m;
    step.gamma = outcome.gamma;
    step.detail = outcome.detail;
    step.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (outcome.status == SolveStatus::Feasible) {
        report.records[static_cast<std::size_t>(i)] = outcome.record;
        report.rows[static_cast<std::size_t>(i)] = outcome.rows;
        report.resolved_supplies[static_cast<std::size_t>(i)] = outcome.resolved_supply;
        if (synthesized) {
            if (outcome.K_ii.size() > 0) {
                report.controllers.gains[{i, i}] = outcome.K_ii;
                step.gains_designed[{i, i}] = outcome.K_ii;
            }
            for (const auto& [j, K] : outcome.K_ij) {
                report.controllers.gains[{i, j}] = K;
                step.gains_designed[{i, j}] = K;
            }
            for (const auto& [j, K] : outcome.K_ji) {
                report.controllers.gains[{j, i}] = K;
                step.gains_designed[{j, i}] = K;
                channel.send(i, j, "gain", Json{{"K", matrix_to_json(K)}}.dump());
            }
        }
        report.certified = true;
    } else {
        report.certified = false;
        report.failure = "joining subsystem " + net.subsystems[i].name + ": " +
                         to_string(step.status) +
                         (step.detail.empty() ? "" : " - " + step.detail);
    }
    report.steps.push_back(step);
    result.report = std::move(report);
    return result;
}

} // namespace netqsr
