#pragma once

// Deterministic point-mass environment with velocity actions (explicit Euler,
// dt = 0.01), the three desk-scale adaptation tasks, success metrics, and
// synthetic demonstration generation.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "gmmflow/gmm.hpp"
#include "gmmflow/rollout_types.hpp"

namespace gmmflow {

enum class TaskKind { reaching, collision_avoidance, multi_goal };
enum class RewardKind { dense, sparse };

inline std::string to_string(TaskKind k) {
    switch (k) {
        case TaskKind::reaching: return "reaching";
        case TaskKind::collision_avoidance: return "collision";
        case TaskKind::multi_goal: return "multigoal";
    }
    return "reaching";
}

struct Obstacle {
    Vector center;
    double radius = 0.0;
};

struct TaskSpec {
    TaskKind kind = TaskKind::reaching;
    int d = 2;
    Vector start;
    std::vector<Vector> targets;  // adaptation target(s); errors use the nearest
    std::vector<Obstacle> obstacles;
    int horizon = 200;
    double dt = 0.01;
    double workspace_bound = 0.0;
    double success_threshold = 0.5;   // mean position error, workspace units
    double tail_fraction = 0.25;      // portion of the episode scored by dense success
    double divergence_penalty = -10.0;
    double collision_penalty = -10.0;
    RewardKind reward_kind = RewardKind::dense;

    // demonstration geometry (pre-adaptation skill)
    std::vector<Vector> demo_targets;
    Vector demo_corner;             // elbow of the reaching L-shape; empty otherwise
    double demo_dwell_fraction = 0.2;  // trailing fraction of the horizon spent at the goal
    double demo_noise_rho = 0.9;    // per-step correlation of the fast demo jitter
    double demo_jitter = 0.02;      // stationary scale of the fast jitter
    int default_n_demos = 12;
    int default_n_components = 7;

    void validate() const {
        if (horizon < 1) throw std::invalid_argument("task: horizon must be >= 1");
        if (dt <= 0.0) throw std::invalid_argument("task: dt must be positive");
        if (targets.empty()) throw std::invalid_argument("task: no targets");
        for (const auto& o : obstacles)
            if (o.radius <= 0.0) throw std::invalid_argument("task: obstacle radius must be positive");
    }
};

struct EnvState {
    Vector position;
    int step_index = 0;
    bool done = false;
    DoneReason done_reason = DoneReason::horizon;
};

inline double target_error(const Vector& pos, const TaskSpec& task) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& t : task.targets) best = std::min(best, (pos - t).norm());
    return best;
}

inline EnvState reset(const TaskSpec& task) {
    task.validate();
    EnvState s;
    s.position = task.start;
    return s;
}

inline std::pair<EnvState, double> step(const EnvState& state, const Vector& action,
                                        const TaskSpec& task) {
    if (state.done) throw std::logic_error("step: environment episode already finished");
    if (action.size() != task.d) throw std::invalid_argument("step: action dimension mismatch");

    EnvState next = state;
    next.position = state.position + task.dt * action;
    next.step_index = state.step_index + 1;
    if (!next.position.allFinite()) throw NumericError("step: non-finite position");

    const bool last = next.step_index >= task.horizon;
    double reward = 0.0;
    if (task.reward_kind == RewardKind::dense)
        reward = -target_error(next.position, task);
    else if (last)
        reward = -target_error(next.position, task);

    for (const auto& o : task.obstacles) {
        if ((next.position - o.center).norm() < o.radius) {
            next.done = true;
            next.done_reason = DoneReason::collision;
            return {next, task.collision_penalty};
        }
    }
    if (next.position.norm() > task.workspace_bound) {
        next.done = true;
        next.done_reason = DoneReason::divergence;
        return {next, task.divergence_penalty};
    }
    if (last) {
        next.done = true;
        next.done_reason = DoneReason::horizon;
    }
    return {next, reward};
}

// M episodes under the GMR-conditioned policy; actions sampled per step.
inline RolloutBatch rollout(const Gmm& policy, const BlockSplit& split, const TaskSpec& task,
                            int episodes, std::mt19937_64& rng, double gamma = 0.99,
                            double beta = 0.0) {
    if (episodes < 1) throw std::invalid_argument("rollout: need at least one episode");
    split.check(policy.dim());
    if (split.state_dim != task.d || split.action_dim != task.d)
        throw std::invalid_argument("rollout: policy blocks do not match the task dimension");

    RolloutBatch batch;
    batch.gamma = gamma;
    batch.beta = beta;
    batch.trajectories.reserve(static_cast<size_t>(episodes));
    for (int m = 0; m < episodes; ++m) {
        Trajectory traj;
        traj.steps.reserve(static_cast<size_t>(task.horizon));
        EnvState env = reset(task);
        while (!env.done) {
            const Gmm cond = gmr_condition(policy, split, env.position);
            const Vector action = cond.sample(rng);
            auto [next, reward] = step(env, action, task);
            traj.steps.push_back({env.position, action, reward});
            env = next;
        }
        traj.done_reason = env.done_reason;
        batch.trajectories.push_back(std::move(traj));
    }
    return batch;
}

// Success predicate per trajectory: dense tasks score the mean error of the
// episode tail, sparse tasks the final position; collisions and divergence
// always fail.
inline bool trajectory_success(const Trajectory& traj, const TaskSpec& task) {
    if (traj.done_reason != DoneReason::horizon || traj.steps.empty()) return false;
    auto post_position = [&](size_t t) {
        return Vector(traj.steps[t].state + task.dt * traj.steps[t].action);
    };
    if (task.reward_kind == RewardKind::sparse)
        return target_error(post_position(traj.steps.size() - 1), task) <= task.success_threshold;
    const size_t len = traj.steps.size();
    const size_t tail = std::max<size_t>(
        1, static_cast<size_t>(std::ceil(task.tail_fraction * static_cast<double>(len))));
    double total = 0.0;
    for (size_t t = len - tail; t < len; ++t) total += target_error(post_position(t), task);
    return total / static_cast<double>(tail) <= task.success_threshold;
}

inline double success_rate(const RolloutBatch& batch, const TaskSpec& task) {
    if (batch.trajectories.empty()) throw std::invalid_argument("success_rate: empty batch");
    int wins = 0;
    for (const auto& traj : batch.trajectories)
        if (trajectory_success(traj, task)) ++wins;
    return static_cast<double>(wins) / static_cast<double>(batch.trajectories.size());
}

// Synthetic demonstrations: waypoint paths (L-shape / line / alternating
// branches) traversed over the leading (1 - dwell) fraction of the horizon,
// holding the goal afterwards.  Positional noise has two scales, mimicking
// repeated human replays: a per-demo constant offset (scale noise_scale — the
// dominant replay-to-replay scatter, which shifts the whole path in parallel)
// plus a small fast AR(1) jitter whose temporal correlation keeps the
// finite-difference velocities (the actions) from being dominated by noise.
// Actions integrate back to the stored positions exactly, and noise_scale == 0
// yields the exact polyline.
inline std::vector<Trajectory> demo_generate(const TaskSpec& task, int n_demos,
                                             std::mt19937_64& rng, double noise_scale = 0.15) {
    if (n_demos < 1) throw std::invalid_argument("demo_generate: need at least one demo");
    task.validate();
    if (task.demo_targets.empty())
        throw std::invalid_argument("demo_generate: task has no demonstration targets");

    std::normal_distribution<double> normal(0.0, 1.0);
    const double rho = task.demo_noise_rho;
    const double jitter = std::min(task.demo_jitter, noise_scale);
    const double innovation = jitter * std::sqrt(std::max(0.0, 1.0 - rho * rho));

    std::vector<Trajectory> demos;
    demos.reserve(static_cast<size_t>(n_demos));
    for (int demo = 0; demo < n_demos; ++demo) {
        std::vector<Vector> waypoints;
        waypoints.push_back(task.start);
        if (task.demo_corner.size() == task.d) waypoints.push_back(task.demo_corner);
        const size_t branch =
            task.kind == TaskKind::multi_goal
                ? static_cast<size_t>(demo) % task.demo_targets.size()
                : 0;
        waypoints.push_back(task.demo_targets[branch]);

        std::vector<double> cumlen{0.0};
        for (size_t w = 0; w + 1 < waypoints.size(); ++w)
            cumlen.push_back(cumlen.back() + (waypoints[w + 1] - waypoints[w]).norm());
        const double total_len = cumlen.back();
        // Progress phi in [0,1] along the polyline, time per segment
        // proportional to its length, with cosine speed easing inside each
        // segment: motion rests at segment boundaries the way a hand slows
        // into a corner or a goal.  The path itself stays the exact polyline.
        auto path_at = [&](double phi) {
            for (size_t w = 0; w + 1 < waypoints.size(); ++w) {
                const double lo = cumlen[w] / total_len;
                const double hi = cumlen[w + 1] / total_len;
                if (phi <= hi || w + 2 == waypoints.size()) {
                    const double tau = hi > lo ? std::clamp((phi - lo) / (hi - lo), 0.0, 1.0) : 1.0;
                    const double eased = 0.5 * (1.0 - std::cos(std::numbers::pi * tau));
                    return Vector(waypoints[w] + eased * (waypoints[w + 1] - waypoints[w]));
                }
            }
            return waypoints.back();
        };

        const int T = task.horizon;
        const int move_steps = std::max(
            1, static_cast<int>(std::lround((1.0 - task.demo_dwell_fraction) * T)));
        std::vector<Vector> positions;
        positions.reserve(static_cast<size_t>(T) + 1);
        Vector offset(task.d), wobble(task.d);
        for (int i = 0; i < task.d; ++i) offset[i] = noise_scale * normal(rng);
        for (int i = 0; i < task.d; ++i) wobble[i] = jitter * normal(rng);
        for (int k = 0; k <= T; ++k) {
            const double phi = std::min(1.0, static_cast<double>(k) / move_steps);
            positions.push_back(path_at(phi) + offset + wobble);
            for (int i = 0; i < task.d; ++i)
                wobble[i] = rho * wobble[i] + innovation * normal(rng);
        }

        Trajectory traj;
        traj.steps.reserve(static_cast<size_t>(T));
        for (int k = 0; k < T; ++k)
            traj.steps.push_back(
                {positions[static_cast<size_t>(k)],
                 (positions[static_cast<size_t>(k) + 1] - positions[static_cast<size_t>(k)]) / task.dt,
                 0.0});
        demos.push_back(std::move(traj));
    }
    return demos;
}

namespace detail {

inline double bound_from_targets(const TaskSpec& t) {
    double mx = 0.0;
    for (const auto& v : t.targets) mx = std::max(mx, v.norm());
    for (const auto& v : t.demo_targets) mx = std::max(mx, v.norm());
    return 3.0 * mx;
}

}  // namespace detail

inline TaskSpec task_preset(TaskKind kind) {
    TaskSpec t;
    t.kind = kind;
    t.d = 2;
    t.start = Vector::Zero(2);
    auto vec2 = [](double x, double y) {
        Vector v(2);
        v << x, y;
        return v;
    };
    switch (kind) {
        case TaskKind::reaching:
            t.targets = {vec2(6.0, -6.5)};
            t.demo_targets = {vec2(6.0, -9.0)};
            t.demo_corner = vec2(6.0, 0.0);
            t.reward_kind = RewardKind::dense;
            t.default_n_demos = 12;
            t.default_n_components = 7;
            break;
        case TaskKind::collision_avoidance:
            t.targets = {vec2(10.0, -2.0)};
            t.demo_targets = {vec2(10.0, 0.0)};
            t.obstacles = {{vec2(5.0, -0.8), 0.9}, {vec2(5.0, -3.2), 0.9}};
            t.reward_kind = RewardKind::sparse;
            t.default_n_demos = 10;
            t.default_n_components = 3;
            break;
        case TaskKind::multi_goal:
            t.targets = {vec2(8.0, 3.6)};
            t.demo_targets = {vec2(8.0, 4.0), vec2(8.0, -4.0)};
            // Shared trunk forking mid-way: at the fork state the conditional
            // policy is bimodal, so the branch taken follows the mixture
            // weights and adaptation happens through them.
            t.demo_corner = vec2(4.0, 0.0);
            t.reward_kind = RewardKind::sparse;
            t.default_n_demos = 12;
            t.default_n_components = 6;
            break;
    }
    t.workspace_bound = detail::bound_from_targets(t);
    return t;
}

inline TaskSpec task_preset(const std::string& name) {
    if (name == "reaching") return task_preset(TaskKind::reaching);
    if (name == "collision" || name == "collision_avoidance")
        return task_preset(TaskKind::collision_avoidance);
    if (name == "multigoal" || name == "multi_goal") return task_preset(TaskKind::multi_goal);
    throw std::invalid_argument("unknown task preset: " + name);
}

// Share of branch-specific mixture weight on the demonstration branch nearest
// the task's (first) adapted target.  A component is branch-specific when its
// state-block mean is decisively closer to one branch endpoint than to every
// other (margin: a quarter of the smallest endpoint separation); shared-trunk
// components near the fork are excluded so the measure reflects actual branch
// commitment.  Degenerates to 1 for single-branch tasks.
inline double desired_branch_weight(const Gmm& g, const BlockSplit& split, const TaskSpec& task) {
    if (task.demo_targets.size() < 2) return 1.0;
    if (task.targets.empty()) throw std::invalid_argument("desired_branch_weight: no targets");
    split.check(g.dim());
    size_t desired = 0;
    double best = std::numeric_limits<double>::infinity();
    double min_sep = std::numeric_limits<double>::infinity();
    for (size_t b = 0; b < task.demo_targets.size(); ++b) {
        const double dist = (task.demo_targets[b] - task.targets[0]).norm();
        if (dist < best) {
            best = dist;
            desired = b;
        }
        for (size_t b2 = b + 1; b2 < task.demo_targets.size(); ++b2)
            min_sep = std::min(min_sep, (task.demo_targets[b] - task.demo_targets[b2]).norm());
    }
    const double margin = 0.25 * min_sep;
    double mass_desired = 0.0, mass_branches = 0.0;
    for (int l = 0; l < g.size(); ++l) {
        const Vector ms = g.component(l).mean().head(split.state_dim);
        size_t nearest = 0;
        double nd = std::numeric_limits<double>::infinity();
        double second = std::numeric_limits<double>::infinity();
        for (size_t b = 0; b < task.demo_targets.size(); ++b) {
            const double dist = (task.demo_targets[b] - ms).norm();
            if (dist < nd) {
                second = nd;
                nd = dist;
                nearest = b;
            } else {
                second = std::min(second, dist);
            }
        }
        if (second - nd < margin) continue;  // trunk / fork component
        mass_branches += g.weights()[l];
        if (nearest == desired) mass_desired += g.weights()[l];
    }
    return mass_branches > 0.0 ? mass_desired / mass_branches : 1.0;
}

// The pre-adaptation scenario the demonstrations were recorded in: original
// goals, no added obstacles.
inline TaskSpec original_task(const TaskSpec& task) {
    TaskSpec t = task;
    t.targets = task.demo_targets;
    t.obstacles.clear();
    t.workspace_bound = detail::bound_from_targets(t);
    return t;
}

}  // namespace gmmflow
