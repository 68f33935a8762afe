#pragma once

// =============================================================================
// JSON wire/disk encoding of matrices and record payloads
// =============================================================================
// Matrices are nested row arrays of finite doubles; the same encoding is
// used in network description files, reports, and the payloads exchanged
// between subsystem agents.
// =============================================================================

#include "netqsr/linalg.hpp"

#include <nlohmann/json.hpp>

#include <string>

namespace netqsr {

using Json = nlohmann::ordered_json;

[[nodiscard]] inline Json matrix_to_json(const Matrix& m) {
    Json rows = Json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        Json row = Json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            row.push_back(m(r, c));
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

[[nodiscard]] inline Matrix matrix_from_json(const Json& j, const std::string& what) {
    if (!j.is_array()) {
        throw std::invalid_argument(what + ": expected an array of rows");
    }
    const auto nrows = j.size();
    if (nrows == 0) {
        return Matrix(0, 0);
    }
    if (!j[0].is_array()) {
        throw std::invalid_argument(what + ": expected nested row arrays");
    }
    const auto ncols = j[0].size();
    Matrix m(static_cast<Eigen::Index>(nrows), static_cast<Eigen::Index>(ncols));
    for (std::size_t r = 0; r < nrows; ++r) {
        if (!j[r].is_array() || j[r].size() != ncols) {
            throw std::invalid_argument(what + ": ragged rows");
        }
        for (std::size_t c = 0; c < ncols; ++c) {
            if (!j[r][c].is_number()) {
                throw std::invalid_argument(what + ": non-numeric entry");
            }
            double v = j[r][c].get<double>();
            if (!std::isfinite(v)) {
                throw std::invalid_argument(what + ": non-finite entry");
            }
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = v;
        }
    }
    return m;
}

/// The record payload one subsystem shares with a later step. Only
/// aggregates appear here; there is deliberately no field that could carry
/// another subsystem's raw state-space data.
struct NeighborPayload {
    int from = -1;
    Matrix M;
    Matrix P;
    bool structured = false;
    std::vector<Matrix> coupling_term; // per mode: P_j B1_j H_{j,i}
    std::vector<Matrix> gain_factor;   // per mode: P_j B3_j
    std::map<int, Matrix> rows;        // eliminated rows toward earlier nodes
};

[[nodiscard]] inline std::string payload_to_json(const NeighborPayload& p) {
    Json j;
    j["from"] = p.from;
    j["M"] = matrix_to_json(p.M);
    j["P"] = matrix_to_json(p.P);
    j["structured"] = p.structured;
    j["coupling_term"] = Json::array();
    for (const auto& m : p.coupling_term) {
        j["coupling_term"].push_back(matrix_to_json(m));
    }
    j["gain_factor"] = Json::array();
    for (const auto& m : p.gain_factor) {
        j["gain_factor"].push_back(matrix_to_json(m));
    }
    j["rows"] = Json::object();
    for (const auto& [k, m] : p.rows) {
        j["rows"][std::to_string(k)] = matrix_to_json(m);
    }
    return j.dump();
}

[[nodiscard]] inline NeighborPayload payload_from_json(const std::string& body) {
    Json j = Json::parse(body);
    NeighborPayload p;
    p.from = j.at("from").get<int>();
    p.M = matrix_from_json(j.at("M"), "payload M");
    p.P = matrix_from_json(j.at("P"), "payload P");
    p.structured = j.at("structured").get<bool>();
    for (const auto& m : j.at("coupling_term")) {
        p.coupling_term.push_back(matrix_from_json(m, "payload coupling_term"));
    }
    for (const auto& m : j.at("gain_factor")) {
        p.gain_factor.push_back(matrix_from_json(m, "payload gain_factor"));
    }
    for (const auto& [key, m] : j.at("rows").items()) {
        p.rows[std::stoi(key)] = matrix_from_json(m, "payload row");
    }
    return p;
}

} // namespace netqsr
