#pragma once

// Alternating two-block policy optimizer: Riemannian ascent on Gaussian
// parameters under a squared-W2 trust constraint enforced by backtracking
// line-search, softmax-reparameterized weight updates driven by transport
// duals, an outer loop around fresh rollouts, and a Euclidean
// Cholesky-parameterized ablation mode.

#include <chrono>
#include <functional>
#include <iostream>
#include <optional>

#include "gmmflow/bures.hpp"
#include "gmmflow/env.hpp"
#include "gmmflow/errors.hpp"
#include "gmmflow/gmm.hpp"
#include "gmmflow/ot.hpp"
#include "gmmflow/policy_gradient.hpp"

namespace gmmflow {

enum class OptimizerMode { riemannian, cholesky_ablation };

struct OptimizerConfig {
    double tau = 1.0;          // implicit-scheme step scaling the W2 penalty on weights
    double lambda0 = 0.1;      // initial line-search step
    double alpha = 0.5;        // line-search shrink factor
    double lambda_min = 1e-6;
    double c_max = 1.0;        // max squared GMM W2 between consecutive accepted iterates
    double w2_trust_radius = 4.0;  // drift from the rollout policy that forces fresh rollouts
    double beta = 1e-3;        // entropy temperature
    double gamma = 0.99;
    int episodes_per_iter = 10;
    int inner_gauss_iters = 20;
    int inner_weight_iters = 20;
    double weight_lr = 0.05;
    double weight_step_max = 0.25;  // cap on the softmax-parameter move per weight update
    double weight_c_max = 0.0;      // squared-W2 cap per weight update (<= 0: 4x c_max)
    double weight_floor = 0.0;      // no weight may be driven below this (0: off)
    OptimizerMode mode = OptimizerMode::riemannian;

    bool subtract_baseline = true;  // batch-mean reward-to-go baseline in the estimators
    double sinkhorn_epsilon = 0.0;  // <= 0 selects a cost-scaled default
    int sinkhorn_max_iters = 5000;
    double sinkhorn_tol = 1e-9;
    double inner_rel_tol = 1e-4;    // inner loops stop on small relative J change ...
    int inner_tol_window = 3;       // ... sustained this many consecutive iterations
    double plateau_rel_tol = 1e-3;  // outer loop stops when the best J stalls ...
    int plateau_window = 5;         // ... for this many outer iterations
    double ablation_fd_step = 1e-4;

    void validate() const {
        if (tau <= 0 || lambda0 <= 0 || lambda_min <= 0 || c_max <= 0 || w2_trust_radius <= 0 ||
            weight_lr <= 0 || weight_step_max <= 0)
            throw std::invalid_argument("optimizer config: positive parameter required");
        if (alpha <= 0 || alpha >= 1) throw std::invalid_argument("optimizer config: alpha in (0,1)");
        if (beta < 0) throw std::invalid_argument("optimizer config: beta must be >= 0");
        if (gamma <= 0 || gamma > 1) throw std::invalid_argument("optimizer config: gamma in (0,1]");
        if (episodes_per_iter < 1)
            throw std::invalid_argument("optimizer config: episodes_per_iter >= 1");
        if (inner_gauss_iters < 0 || inner_weight_iters < 0)
            throw std::invalid_argument("optimizer config: negative inner iteration cap");
    }
};

struct OptimizerState {
    Gmm policy;
    Vector eta;           // softmax parameters; softmax(eta) == policy.weights()
    Gmm reference_policy; // policy the current batch was collected under
    int outer_iter = 0;
    int inner_iter = 0;
    bool inner_converged = false;
    bool moved = false;          // last step was accepted by the line search
    double last_step_w2 = 0.0;   // constraint value of the last accepted step

    OptimizerState(Gmm p, Gmm reference)
        : policy(std::move(p)), eta(), reference_policy(std::move(reference)) {
        eta = policy.weights().cwiseMax(kWeightFloor).array().log();
        eta.array() -= eta.mean();
    }
};

inline Vector softmax(const Vector& eta) {
    Vector w = (eta.array() - eta.maxCoeff()).exp();
    w /= w.sum();
    return w;
}

template <typename Point>
struct LineSearchOutcome {
    double step = 0.0;
    Point point;
    bool moved = false;
    int shrinks = 0;
    double constraint_value = 0.0;
};

// Backtracking search over step sizes lambda0 * alpha^k: shrink while the
// constraint exceeds c_max (an infeasible candidate counts as a violation) and
// lambda stays above lambda_min; a search that bottoms out returns the start
// point with the original lambda0.
template <typename Point, typename TryStep, typename Constraint>
LineSearchOutcome<Point> constrained_line_search(const Point& x0, TryStep&& try_step,
                                                 Constraint&& constraint,
                                                 const OptimizerConfig& cfg) {
    const double inf = std::numeric_limits<double>::infinity();
    double lambda = cfg.lambda0;
    std::optional<Point> cand = try_step(lambda);
    double c = cand ? constraint(*cand) : inf;
    int shrinks = 0;
    while (c > cfg.c_max && lambda > cfg.lambda_min) {
        lambda *= cfg.alpha;
        ++shrinks;
        cand = try_step(lambda);
        c = cand ? constraint(*cand) : inf;
    }
    if (lambda < cfg.lambda_min || !cand)
        return {cfg.lambda0, x0, false, shrinks, c};
    return {lambda, *cand, true, shrinks, c};
}

namespace detail {

inline Gmm with_components(const Gmm& base, std::vector<Gaussian> comps) {
    return Gmm(base.weights(), std::move(comps));
}

struct GaussianDirection {
    std::vector<Vector> d_means;
    std::vector<Matrix> d_covs;  // Riemannian (or Cholesky-space) directions
};

}  // namespace detail

// One ascent step on all component means and covariances: Euclidean gradients
// from the batch, covariance gradients mapped to the Bures-Wasserstein tangent
// space, candidates formed by retraction and accepted under the squared-W2
// trust constraint against the reference policy.
inline OptimizerState gaussian_step(const OptimizerState& state, const RolloutBatch& batch,
                                    const BlockSplit& split, const OptimizerConfig& cfg) {
    const auto grads = policy_gradients(batch, state.policy, split, cfg.subtract_baseline,
                                        {true, true, false});
    const int n = state.policy.size();

    detail::GaussianDirection dir;
    dir.d_means = grads.d_means;
    dir.d_covs.reserve(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l)
        dir.d_covs.push_back(bw_grad(grads.d_covs[static_cast<size_t>(l)],
                                     state.policy.component(l).cov()));

    auto try_step = [&](double lambda) -> std::optional<Gmm> {
        std::vector<Gaussian> comps;
        comps.reserve(static_cast<size_t>(n));
        try {
            for (int l = 0; l < n; ++l) {
                const auto& c = state.policy.component(l);
                comps.emplace_back(
                    c.mean() + lambda * dir.d_means[static_cast<size_t>(l)],
                    bw_retract(c.cov(), lambda * dir.d_covs[static_cast<size_t>(l)]));
            }
        } catch (const NumericError&) {
            return std::nullopt;  // left the SPD cone: treat as constraint violation
        }
        return detail::with_components(state.policy, std::move(comps));
    };
    auto constraint = [&](const Gmm& g) {
        return w2_gmm_sq(g, state.reference_policy, 0.0, OtSolver::exact);
    };

    auto ls = constrained_line_search<Gmm>(state.policy, try_step, constraint, cfg);
    OptimizerState next = state;
    next.policy = std::move(ls.point);
    next.moved = ls.moved;
    if (ls.moved) next.last_step_w2 = ls.constraint_value;
    ++next.inner_iter;
    return next;
}

// One gradient step on the softmax parameters eta: transport duals of the
// entropic coupling between current and reference mixtures give the W2 part,
// the batch estimator the objective part.  Component parameters stay fixed.
// An optional precomputed cost matrix avoids recomputing pairwise Gaussian
// distances while only weights change.
inline OptimizerState weight_step(const OptimizerState& state, const RolloutBatch& batch,
                                  const BlockSplit& split, const OptimizerConfig& cfg,
                                  const Matrix* pair_costs = nullptr) {
    const Vector w = state.policy.weights();
    Vector w2_term = Vector::Zero(state.policy.size());
    const Matrix costs =
        pair_costs ? *pair_costs : cost_matrix(state.policy, state.reference_policy);
    // The proximal term only needs a smooth dual, and a sharp regularizer
    // stalls completely once the marginals disagree across well-separated
    // components: the off-diagonal kernel entries underflow and the
    // iteration contracts at 1 - exp(-max(C)/eps) per sweep.  Solve it at a
    // deliberately blunt epsilon tied to the cost range instead of the
    // solver's generic sharp default.
    const double prox_eps =
        cfg.sinkhorn_epsilon > 0.0 ? cfg.sinkhorn_epsilon
                                   : std::max(0.25 * costs.maxCoeff(), 1e-12);
    const TransportPlan plan = sinkhorn(w, state.reference_policy.weights(), costs, prox_eps,
                                        cfg.sinkhorn_max_iters, cfg.sinkhorn_tol);
    // The duals are a usable gradient well before the strict tolerance is met;
    // dropping the proximal term is far worse than a slightly inexact one.
    if (plan.marginal_violation <= 1e-5) {
        w2_term = chain_to_eta(plan.dual_f, w) / cfg.tau;
    } else {
        std::cerr << "weight_step: transport solve did not converge, skipping the W2 term\n";
    }
    const Vector dj_eta =
        chain_to_eta(grad_omega(batch, state.policy, split, cfg.subtract_baseline), w);

    OptimizerState next = state;
    Vector delta = cfg.weight_lr * (w2_term - dj_eta);
    // Likelihood-ratio weight gradients scale with the return magnitude, which
    // at desk scale can reach hundreds; cap the per-update softmax-parameter
    // move so one noisy batch cannot collapse the mixture.
    const double dmax = delta.cwiseAbs().maxCoeff();
    if (dmax > cfg.weight_step_max) delta *= cfg.weight_step_max / dmax;

    // Reweighting the same components can still move a lot of transport mass
    // between distant components in one update; backtrack the step until the
    // mixture-level squared W2 of the move stays within the weight cap, so the
    // weight block cannot jump across a success boundary the Gaussian block is
    // converging toward.
    const double cap = cfg.weight_c_max > 0.0 ? cfg.weight_c_max : 4.0 * cfg.c_max;
    Matrix self_costs(state.policy.size(), state.policy.size());
    for (int i = 0; i < state.policy.size(); ++i)
        for (int j = 0; j < state.policy.size(); ++j)
            self_costs(i, j) =
                i == j ? 0.0
                       : w2_gaussian_sq(state.policy.component(i), state.policy.component(j));
    double move_w2 = 0.0;
    bool floored = false;
    for (int tries = 0;; ++tries) {
        const Vector cand = softmax(Vector(state.eta - delta));
        move_w2 = exact_ot_lp(cand, w, self_costs).cost;
        // A component squeezed below the floor is nearly gradient-dead under
        // the softmax chain and can strand the policy; treat that like a
        // too-large move and shrink, unless the component already sits there.
        floored = false;
        if (cfg.weight_floor > 0.0)
            for (int i = 0; i < cand.size(); ++i)
                if (cand[i] < cfg.weight_floor && cand[i] < w[i]) floored = true;
        if ((move_w2 <= cap && !floored) || tries >= 12) break;
        delta *= 0.5;
    }
    if (move_w2 > cap || floored) {  // even the smallest trial is unsafe: stay put
        next.moved = false;
        ++next.inner_iter;
        return next;
    }
    next.eta = state.eta - delta;
    next.policy = Gmm(softmax(next.eta), state.policy.components());
    next.moved = true;
    next.last_step_w2 = 0.0;  // the c_max contract tracks Gaussian steps only
    ++next.inner_iter;
    return next;
}

// Ablation step: Euclidean gradient ascent on means and Cholesky factors for
// J - W2^2(pi, ref)/(2 tau), the W2 term differentiated by central finite
// differences parameter-by-parameter (only the perturbed component's row of
// the pairwise cost matrix is recomputed).  The same line-search constraint
// bounds each accepted move.
inline OptimizerState gaussian_step_ablation(const OptimizerState& state,
                                             const RolloutBatch& batch, const BlockSplit& split,
                                             const OptimizerConfig& cfg) {
    const auto grads = policy_gradients(batch, state.policy, split, cfg.subtract_baseline,
                                        {true, true, false});
    const int n = state.policy.size();
    const int d = state.policy.dim();
    const Gmm& ref = state.reference_policy;

    std::vector<Vector> mu(static_cast<size_t>(n));
    std::vector<Matrix> chol(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l) {
        mu[static_cast<size_t>(l)] = state.policy.component(l).mean();
        chol[static_cast<size_t>(l)] = state.policy.component(l).llt().matrixL();
    }

    Matrix base_costs = cost_matrix(state.policy, ref);
    const Vector& w = state.policy.weights();
    const Vector& wr = ref.weights();
    auto w2_with_component = [&](int l, const Vector& m, const Matrix& cov) {
        const Gaussian g(m, cov);
        Matrix costs = base_costs;
        for (int j = 0; j < ref.size(); ++j) costs(l, j) = w2_gaussian_sq(g, ref.component(j));
        return exact_ot_lp(w, wr, costs).cost;
    };

    // d(W2^2 / 2 tau) via central differences on every scalar parameter
    std::vector<Vector> dw2_mu(static_cast<size_t>(n), Vector::Zero(d));
    std::vector<Matrix> dw2_chol(static_cast<size_t>(n), Matrix::Zero(d, d));
    const double inv_2tau = 1.0 / (2.0 * cfg.tau);
    for (int l = 0; l < n; ++l) {
        const size_t sl = static_cast<size_t>(l);
        for (int i = 0; i < d; ++i) {
            const double h = cfg.ablation_fd_step * (1.0 + std::abs(mu[sl][i]));
            Vector mp = mu[sl], mm = mu[sl];
            mp[i] += h;
            mm[i] -= h;
            const Matrix cov = symmetrize(chol[sl] * chol[sl].transpose());
            dw2_mu[sl][i] =
                (w2_with_component(l, mp, cov) - w2_with_component(l, mm, cov)) / (2.0 * h) *
                inv_2tau;
        }
        for (int i = 0; i < d; ++i)
            for (int j = 0; j <= i; ++j) {
                const double h = cfg.ablation_fd_step * (1.0 + std::abs(chol[sl](i, j)));
                Matrix lp = chol[sl], lm = chol[sl];
                lp(i, j) += h;
                lm(i, j) -= h;
                dw2_chol[sl](i, j) =
                    (w2_with_component(l, mu[sl], symmetrize(lp * lp.transpose())) -
                     w2_with_component(l, mu[sl], symmetrize(lm * lm.transpose()))) /
                    (2.0 * h) * inv_2tau;
            }
    }

    // ascent direction on (mu, L): dJ - dW2/2tau, with dJ/dL = 2 (dJ/dSigma) L
    // projected onto the lower triangle
    detail::GaussianDirection dir;
    dir.d_means.resize(static_cast<size_t>(n));
    dir.d_covs.resize(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l) {
        const size_t sl = static_cast<size_t>(l);
        dir.d_means[sl] = grads.d_means[sl] - dw2_mu[sl];
        Matrix dj_chol = 2.0 * grads.d_covs[sl] * chol[sl];
        dj_chol = dj_chol.triangularView<Eigen::Lower>();
        dir.d_covs[sl] = dj_chol - dw2_chol[sl];
    }

    auto try_step = [&](double lambda) -> std::optional<Gmm> {
        std::vector<Gaussian> comps;
        comps.reserve(static_cast<size_t>(n));
        try {
            for (int l = 0; l < n; ++l) {
                const size_t sl = static_cast<size_t>(l);
                Matrix lnew = chol[sl] + lambda * dir.d_covs[sl];
                if (lnew.diagonal().minCoeff() <= 1e-10 * chol[sl].diagonal().maxCoeff())
                    return std::nullopt;  // Cholesky losing positive diagonal
                comps.emplace_back(mu[sl] + lambda * dir.d_means[sl],
                                   symmetrize(lnew * lnew.transpose()));
            }
        } catch (const NumericError&) {
            return std::nullopt;
        }
        return detail::with_components(state.policy, std::move(comps));
    };
    auto constraint = [&](const Gmm& g) {
        return w2_gmm_sq(g, state.reference_policy, 0.0, OtSolver::exact);
    };

    auto ls = constrained_line_search<Gmm>(state.policy, try_step, constraint, cfg);
    OptimizerState next = state;
    next.policy = std::move(ls.point);
    next.moved = ls.moved;
    if (ls.moved) next.last_step_w2 = ls.constraint_value;
    ++next.inner_iter;
    return next;
}

struct MetricsRow {
    int outer_iter = 0;
    long env_steps = 0;
    double j_estimate = 0.0;
    double success_rate = 0.0;
    double w2_drift = 0.0;
    double wallclock_s = 0.0;
};

struct OptimizeResult {
    Gmm policy;
    std::vector<MetricsRow> metrics;
    std::string stop_reason;  // success | budget | plateau
    bool success_reached = false;
    long env_steps = 0;
    double max_step_w2 = 0.0;  // largest per-step trust-constraint value accepted
    int numeric_aborts = 0;
};

// Stop test evaluated once per outer iteration on the freshly measured metrics
// row and the current policy (some tasks gate convergence on policy structure,
// e.g. mixture-weight dominance, not just the success rate).
using SuccessCriterion = std::function<bool(const MetricsRow&, const Gmm&)>;

// Outer loop: rollouts under the current policy, an inner block of Gaussian
// parameter steps, an inner block of weight steps, stop on the success
// criterion, the env-step budget, or a J plateau.  Inner blocks end early on
// converged J, drift beyond the trust radius, or a numeric failure (which
// triggers fresh rollouts).
inline OptimizeResult optimize(const Gmm& initial_policy, const TaskSpec& task,
                               const BlockSplit& split, const OptimizerConfig& cfg,
                               std::mt19937_64& rng, const SuccessCriterion& success_criterion,
                               long max_env_steps) {
    cfg.validate();
    task.validate();
    split.check(initial_policy.dim());
    if (max_env_steps < 1) throw std::invalid_argument("optimize: max_env_steps must be >= 1");

    const auto t0 = std::chrono::steady_clock::now();
    auto elapsed = [&]() {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    OptimizerState state(initial_policy, initial_policy);
    OptimizeResult result{initial_policy, {}, "budget", false, 0, 0.0, 0};

    double best_j = -std::numeric_limits<double>::infinity();
    int stalled = 0;
    for (int outer = 0;; ++outer) {
        RolloutBatch batch = rollout(state.policy, split, task, cfg.episodes_per_iter, rng,
                                     cfg.gamma, cfg.beta);
        result.env_steps += batch_env_steps(batch);
        state.reference_policy = state.policy;
        state.outer_iter = outer;

        MetricsRow row;
        row.outer_iter = outer;
        row.env_steps = result.env_steps;
        row.j_estimate = free_energy_estimate(batch, state.policy, split);
        row.success_rate = success_rate(batch, task);

        if (success_criterion && success_criterion(row, state.policy)) {
            row.w2_drift = 0.0;
            row.wallclock_s = elapsed();
            result.metrics.push_back(row);
            result.stop_reason = "success";
            result.success_reached = true;
            break;
        }
        if (result.env_steps >= max_env_steps) {
            row.w2_drift = 0.0;
            row.wallclock_s = elapsed();
            result.metrics.push_back(row);
            result.stop_reason = "budget";
            break;
        }

        const RolloutBatch augmented = entropy_augment(batch, state.policy, split);

        auto run_inner = [&](int cap, auto&& one_step) {
            double prev_j = row.j_estimate;
            int settled = 0;
            state.inner_iter = 0;
            state.inner_converged = false;
            for (int it = 0; it < cap; ++it) {
                try {
                    state = one_step(state);
                } catch (const NumericError&) {
                    ++result.numeric_aborts;
                    return;  // fresh rollouts next outer iteration
                }
                if (state.moved) result.max_step_w2 = std::max(result.max_step_w2, state.last_step_w2);
                double j = prev_j;
                double drift = 0.0;
                try {
                    j = free_energy_estimate(batch, state.policy, split);
                    drift = w2_gmm_sq(state.policy, state.reference_policy, 0.0, OtSolver::exact);
                } catch (const NumericError&) {
                    ++result.numeric_aborts;
                    return;
                }
                if (drift > cfg.w2_trust_radius) return;
                if (std::abs(j - prev_j) < cfg.inner_rel_tol * std::max(std::abs(prev_j), 1e-12)) {
                    if (++settled >= cfg.inner_tol_window) {
                        state.inner_converged = true;
                        return;
                    }
                } else {
                    settled = 0;
                }
                prev_j = j;
            }
        };

        run_inner(cfg.inner_gauss_iters, [&](const OptimizerState& s) {
            return cfg.mode == OptimizerMode::riemannian
                       ? gaussian_step(s, augmented, split, cfg)
                       : gaussian_step_ablation(s, augmented, split, cfg);
        });
        const Matrix pair_costs = cost_matrix(state.policy, state.reference_policy);
        run_inner(cfg.inner_weight_iters, [&](const OptimizerState& s) {
            return weight_step(s, augmented, split, cfg, &pair_costs);
        });

        row.w2_drift = w2_gmm_sq(state.policy, state.reference_policy, 0.0, OtSolver::exact);
        row.wallclock_s = elapsed();
        result.metrics.push_back(row);

        if (!std::isfinite(best_j) ||
            row.j_estimate > best_j + cfg.plateau_rel_tol * std::abs(best_j)) {
            best_j = row.j_estimate;
            stalled = 0;
        } else if (++stalled >= cfg.plateau_window) {
            result.stop_reason = "plateau";
            break;
        }
    }

    result.policy = state.policy;
    return result;
}

// Trust-region defaults scaled to a task's geometry.
inline OptimizerConfig default_optimizer_for(const TaskSpec& task) {
    OptimizerConfig cfg;
    double scale = 0.0;
    for (const auto& t : task.targets) scale = std::max(scale, t.norm());
    for (const auto& t : task.demo_targets) scale = std::max(scale, t.norm());
    if (scale <= 0.0) scale = 1.0;
    // The per-step transport bound should sit at the scale of component
    // widths (fitted stds are a few percent of the workspace), not of the
    // workspace itself, or accepted steps overshoot the objective curvature.
    cfg.c_max = 1e-4 * scale * scale;
    cfg.w2_trust_radius = 25.0 * cfg.c_max;
    return cfg;
}

}  // namespace gmmflow
