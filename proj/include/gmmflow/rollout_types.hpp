#pragma once

// Shared trajectory containers passed between the environment, the gradient
// estimators and the optimizer.

#include <string>
#include <vector>

#include "gmmflow/gmm.hpp"

namespace gmmflow {

enum class DoneReason { horizon, collision, divergence };

inline std::string to_string(DoneReason r) {
    switch (r) {
        case DoneReason::horizon: return "horizon";
        case DoneReason::collision: return "collision";
        case DoneReason::divergence: return "divergence";
    }
    return "horizon";
}

inline DoneReason done_reason_from_string(const std::string& s) {
    if (s == "horizon") return DoneReason::horizon;
    if (s == "collision") return DoneReason::collision;
    if (s == "divergence") return DoneReason::divergence;
    throw std::invalid_argument("unknown done reason: " + s);
}

struct Step {
    Vector state;
    Vector action;
    double reward = 0.0;
};

struct Trajectory {
    std::vector<Step> steps;
    DoneReason done_reason = DoneReason::horizon;
};

struct RolloutBatch {
    std::vector<Trajectory> trajectories;
    double gamma = 0.99;  // discount used when accumulating returns
    double beta = 0.0;    // entropy temperature; zero once rewards are augmented
};

inline long batch_env_steps(const RolloutBatch& b) {
    long total = 0;
    for (const auto& t : b.trajectories) total += static_cast<long>(t.steps.size());
    return total;
}

}  // namespace gmmflow
