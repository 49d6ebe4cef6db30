#pragma once

// Serialization: mixture model JSON files, trajectory JSON-lines dumps, and
// the metrics CSV stream.  Doubles go through the JSON writer's
// shortest-round-trip formatting so files reload bit-for-bit.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmmflow/gmm.hpp"
#include "gmmflow/optimizer.hpp"
#include "gmmflow/rollout_types.hpp"

namespace gmmflow {

using nlohmann::json;

inline json gmm_to_json(const Gmm& g) {
    json j;
    j["d"] = g.dim();
    j["n"] = g.size();
    j["weights"] = std::vector<double>(g.weights().data(), g.weights().data() + g.size());
    json means = json::array();
    json covs = json::array();
    for (int l = 0; l < g.size(); ++l) {
        const auto& c = g.component(l);
        means.push_back(std::vector<double>(c.mean().data(), c.mean().data() + c.mean().size()));
        json rows = json::array();
        for (int r = 0; r < g.dim(); ++r) {
            std::vector<double> row(static_cast<size_t>(g.dim()));
            for (int col = 0; col < g.dim(); ++col) row[static_cast<size_t>(col)] = c.cov()(r, col);
            rows.push_back(row);
        }
        covs.push_back(rows);
    }
    j["means"] = means;
    j["covs"] = covs;
    return j;
}

inline Gmm gmm_from_json(const json& j) {
    if (!j.contains("d") || !j.contains("n") || !j.contains("weights") || !j.contains("means") ||
        !j.contains("covs"))
        throw std::invalid_argument("gmm json: missing required field");
    const int d = j.at("d").get<int>();
    const int n = j.at("n").get<int>();
    const auto& jw = j.at("weights");
    const auto& jm = j.at("means");
    const auto& jc = j.at("covs");
    if (static_cast<int>(jw.size()) != n || static_cast<int>(jm.size()) != n ||
        static_cast<int>(jc.size()) != n)
        throw std::invalid_argument("gmm json: component count mismatch");

    Vector w(n);
    for (int l = 0; l < n; ++l) w[l] = jw.at(static_cast<size_t>(l)).get<double>();
    std::vector<Gaussian> comps;
    comps.reserve(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l) {
        const auto& m = jm.at(static_cast<size_t>(l));
        const auto& c = jc.at(static_cast<size_t>(l));
        if (static_cast<int>(m.size()) != d || static_cast<int>(c.size()) != d)
            throw std::invalid_argument("gmm json: dimension mismatch");
        Vector mean(d);
        for (int i = 0; i < d; ++i) mean[i] = m.at(static_cast<size_t>(i)).get<double>();
        Matrix cov(d, d);
        for (int r = 0; r < d; ++r) {
            const auto& row = c.at(static_cast<size_t>(r));
            if (static_cast<int>(row.size()) != d)
                throw std::invalid_argument("gmm json: covariance row length mismatch");
            for (int col = 0; col < d; ++col) cov(r, col) = row.at(static_cast<size_t>(col)).get<double>();
        }
        comps.emplace_back(std::move(mean), std::move(cov));
    }
    return Gmm(std::move(w), std::move(comps));
}

inline void save_gmm(const std::string& path, const Gmm& g) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for writing: " + path);
    out << gmm_to_json(g).dump(2) << "\n";
    if (!out) throw std::invalid_argument("write failed: " + path);
}

inline Gmm load_gmm(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::invalid_argument("invalid gmm json in " + path + ": " + e.what());
    }
    return gmm_from_json(j);
}

// One rollout per line: {"task", "seed", "steps": [[s..., a..., r], ...],
// "done_reason"}.  The state/action dimension is implied by the step length.
inline void write_trajectories(const std::string& path, const std::vector<Trajectory>& trajs,
                               const std::string& task_name, long seed) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for writing: " + path);
    for (const auto& traj : trajs) {
        json steps = json::array();
        for (const auto& st : traj.steps) {
            std::vector<double> row;
            row.reserve(static_cast<size_t>(st.state.size() + st.action.size()) + 1);
            for (int i = 0; i < st.state.size(); ++i) row.push_back(st.state[i]);
            for (int i = 0; i < st.action.size(); ++i) row.push_back(st.action[i]);
            row.push_back(st.reward);
            steps.push_back(row);
        }
        json line;
        line["task"] = task_name;
        line["seed"] = seed;
        line["steps"] = std::move(steps);
        line["done_reason"] = to_string(traj.done_reason);
        out << line.dump() << "\n";
    }
    if (!out) throw std::invalid_argument("write failed: " + path);
}

struct TrajectoryFile {
    std::vector<Trajectory> trajectories;
    std::string task;
    long seed = 0;
};

inline TrajectoryFile read_trajectories(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open: " + path);
    TrajectoryFile out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                        ": invalid json: " + e.what());
        }
        if (lineno == 1 || out.trajectories.empty()) {
            out.task = j.value("task", std::string{});
            out.seed = j.value("seed", 0L);
        }
        Trajectory traj;
        traj.done_reason = done_reason_from_string(j.value("done_reason", std::string{"horizon"}));
        for (const auto& row : j.at("steps")) {
            const auto len = row.size();
            if (len < 3 || len % 2 == 0)
                throw std::invalid_argument(path + ":" + std::to_string(lineno) +
                                            ": malformed step row");
            const auto d = static_cast<int>((len - 1) / 2);
            Step st;
            st.state.resize(d);
            st.action.resize(d);
            for (int i = 0; i < d; ++i) st.state[i] = row.at(static_cast<size_t>(i)).get<double>();
            for (int i = 0; i < d; ++i)
                st.action[i] = row.at(static_cast<size_t>(d + i)).get<double>();
            st.reward = row.at(len - 1).get<double>();
            traj.steps.push_back(std::move(st));
        }
        out.trajectories.push_back(std::move(traj));
    }
    if (out.trajectories.empty())
        throw std::invalid_argument(path + ": no trajectories");
    return out;
}

// Shortest exact decimal representation, reused from the JSON writer so CSV
// and JSON agree and reload losslessly.
inline std::string format_double(double x) { return json(x).dump(); }

inline constexpr const char* kMetricsHeader =
    "outer_iter,env_steps,J_estimate,success_rate,w2_drift,wallclock_s";

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path);
    if (!out) throw std::invalid_argument("cannot open for writing: " + path);
    out << kMetricsHeader << "\n";
    for (const auto& r : rows)
        out << r.outer_iter << ',' << r.env_steps << ',' << format_double(r.j_estimate) << ','
            << format_double(r.success_rate) << ',' << format_double(r.w2_drift) << ','
            << format_double(r.wallclock_s) << "\n";
    if (!out) throw std::invalid_argument("write failed: " + path);
}

}  // namespace gmmflow
