#pragma once

// Likelihood-ratio ("score function") estimators for the free-energy objective
// of a GMM policy conditioned by Gaussian mixture regression.  The scores of
// the conditional log-density log pi(a|s) = log pi(s,a) - log pi(s) combine a
// joint term with responsibilities zeta_joint and a state-marginal term with
// responsibilities zeta_state; the latter touches only state blocks.

#include <Eigen/Cholesky>
#include <utility>
#include <vector>

#include "gmmflow/errors.hpp"
#include "gmmflow/gmm.hpp"
#include "gmmflow/rollout_types.hpp"

namespace gmmflow {

struct EuclideanGrads {
    std::vector<Vector> d_means;
    std::vector<Matrix> d_covs;  // symmetric
    Vector d_weights;
};

struct GradRequest {
    bool means = true;
    bool covs = true;
    bool weights = true;
};

namespace detail {

// Per-component quantities reused across every step of a batch.
struct PgCache {
    struct Comp {
        Vector mu;
        Matrix prec;          // full precision
        Matrix prec_ss;       // state-block precision
        double log_norm_joint;
        double log_norm_state;
        double log_w;
    };
    std::vector<Comp> comps;
    int ds = 0, da = 0;
};

inline PgCache build_pg_cache(const Gmm& g, const BlockSplit& split) {
    split.check(g.dim());
    PgCache cache;
    cache.ds = split.state_dim;
    cache.da = split.action_dim;
    const double log2pi = std::log(2.0 * std::numbers::pi);
    for (int l = 0; l < g.size(); ++l) {
        const auto& c = g.component(l);
        PgCache::Comp e;
        e.mu = c.mean();
        e.prec = c.llt().solve(Matrix::Identity(g.dim(), g.dim()));
        auto [ss_fixed, llt_ss] =
            chol_with_jitter(symmetrize(c.cov().topLeftCorner(split.state_dim, split.state_dim)));
        e.prec_ss = llt_ss.solve(Matrix::Identity(split.state_dim, split.state_dim));
        e.log_norm_joint = -0.5 * (g.dim() * log2pi + c.log_det_cov());
        e.log_norm_state =
            -0.5 * (split.state_dim * log2pi +
                    2.0 * llt_ss.matrixLLT().diagonal().array().log().sum());
        e.log_w = std::log(std::max(g.weights()[l], 1e-300));
        cache.comps.push_back(std::move(e));
        (void)ss_fixed;
    }
    return cache;
}

// Fills log joint and state densities (including log-weights) for one (s,a).
inline void log_densities(const PgCache& cache, const Vector& s, const Vector& a,
                          Vector& lj, Vector& ls) {
    const int n = static_cast<int>(cache.comps.size());
    lj.resize(n);
    ls.resize(n);
    Vector x(cache.ds + cache.da);
    x << s, a;
    for (int l = 0; l < n; ++l) {
        const auto& e = cache.comps[static_cast<size_t>(l)];
        const Vector r = x - e.mu;
        const Vector rs = r.head(cache.ds);
        lj[l] = e.log_w + e.log_norm_joint - 0.5 * r.dot(e.prec * r);
        ls[l] = e.log_w + e.log_norm_state - 0.5 * rs.dot(e.prec_ss * rs);
    }
}

inline Vector softmax_from_log(const Vector& lv) {
    Vector z = (lv.array() - logsumexp(lv)).exp();
    z /= z.sum();
    return z;
}

}  // namespace detail

// Joint and state-marginal responsibilities of each component for one (s, a).
inline std::pair<Vector, Vector> responsibilities(const Gmm& g, const BlockSplit& split,
                                                  const Vector& s, const Vector& a) {
    const auto cache = detail::build_pg_cache(g, split);
    Vector lj, ls;
    detail::log_densities(cache, s, a, lj, ls);
    return {detail::softmax_from_log(lj), detail::softmax_from_log(ls)};
}

// Discounted reward-to-go: R_t = sum_{t' >= t} gamma^{t'-t} r_{t'}.
inline Vector reward_to_go(const Trajectory& traj, double gamma) {
    const auto T = static_cast<Eigen::Index>(traj.steps.size());
    Vector out(T);
    double acc = 0.0;
    for (Eigen::Index t = T - 1; t >= 0; --t) {
        acc = traj.steps[static_cast<size_t>(t)].reward + gamma * acc;
        out[t] = acc;
    }
    return out;
}

// Replace rewards by r - beta * log pi(a|s) under the given policy and zero
// out the batch's beta so the entropy bonus is not double counted downstream.
inline RolloutBatch entropy_augment(const RolloutBatch& batch, const Gmm& policy,
                                    const BlockSplit& split) {
    RolloutBatch out = batch;
    for (auto& traj : out.trajectories)
        for (auto& st : traj.steps) {
            const Gmm cond = gmr_condition(policy, split, st.state);
            st.reward -= batch.beta * cond.logpdf(st.action);
        }
    out.beta = 0.0;
    return out;
}

// REINFORCE estimators of dJ/d(mu, Sigma, omega) from a batch of trajectories,
// averaged over trajectories.  When subtract_baseline is set, the baseline at
// step t is the mean reward-to-go at step t across the episodes that reach t:
// reward-to-go varies far more across time than across episodes, so a
// time-resolved baseline removes most of the estimator variance.  Rewards are
// expected to already carry any entropy augmentation.
inline EuclideanGrads policy_gradients(const RolloutBatch& batch, const Gmm& g,
                                       const BlockSplit& split, bool subtract_baseline,
                                       GradRequest req = GradRequest{}) {
    if (batch.trajectories.empty())
        throw std::invalid_argument("policy_gradients: empty batch");
    const auto cache = detail::build_pg_cache(g, split);
    const int n = g.size();
    const int d = g.dim();
    const int ds = split.state_dim;

    std::vector<Vector> returns;
    returns.reserve(batch.trajectories.size());
    size_t longest = 0;
    for (const auto& traj : batch.trajectories) {
        returns.push_back(reward_to_go(traj, batch.gamma));
        longest = std::max(longest, traj.steps.size());
    }
    Vector baseline = Vector::Zero(static_cast<Eigen::Index>(longest));
    if (subtract_baseline && longest > 0) {
        Vector counts = Vector::Zero(static_cast<Eigen::Index>(longest));
        for (const auto& r : returns) {
            baseline.head(r.size()) += r;
            counts.head(r.size()).array() += 1.0;
        }
        baseline.array() /= counts.array().max(1.0);
    }

    EuclideanGrads out;
    if (req.means) out.d_means.assign(static_cast<size_t>(n), Vector::Zero(d));
    if (req.covs) out.d_covs.assign(static_cast<size_t>(n), Matrix::Zero(d, d));
    out.d_weights = Vector::Zero(n);

    Vector lj, ls;
    for (size_t k = 0; k < batch.trajectories.size(); ++k) {
        const auto& traj = batch.trajectories[k];
        for (size_t t = 0; t < traj.steps.size(); ++t) {
            const auto& st = traj.steps[t];
            detail::log_densities(cache, st.state, st.action, lj, ls);
            const Vector zj = detail::softmax_from_log(lj);
            const Vector zs = detail::softmax_from_log(ls);
            const double adv =
                returns[k][static_cast<Eigen::Index>(t)] - baseline[static_cast<Eigen::Index>(t)];
            Vector x(d);
            x << st.state, st.action;
            for (int l = 0; l < n; ++l) {
                const auto& e = cache.comps[static_cast<size_t>(l)];
                const Vector r = x - e.mu;
                const Vector q = e.prec * r;
                const Vector qs = e.prec_ss * r.head(ds);
                if (req.means) {
                    Vector sc = zj[l] * q;
                    sc.head(ds) -= zs[l] * qs;
                    out.d_means[static_cast<size_t>(l)] += adv * sc;
                }
                if (req.covs) {
                    Matrix sc = -0.5 * zj[l] * (e.prec - q * q.transpose());
                    sc.topLeftCorner(ds, ds) +=
                        0.5 * zs[l] * (e.prec_ss - qs * qs.transpose());
                    out.d_covs[static_cast<size_t>(l)] += adv * sc;
                }
                if (req.weights)
                    out.d_weights[l] +=
                        adv * (zj[l] - zs[l]) / std::max(g.weights()[l], kWeightFloor);
            }
        }
    }

    const double inv_m = 1.0 / static_cast<double>(batch.trajectories.size());
    for (auto& v : out.d_means) {
        v *= inv_m;
        if (!v.allFinite()) throw NumericError("policy_gradients: non-finite mean gradient");
    }
    for (auto& mat : out.d_covs) {
        mat = symmetrize(mat * inv_m);
        if (!mat.allFinite()) throw NumericError("policy_gradients: non-finite covariance gradient");
    }
    out.d_weights *= inv_m;
    if (!out.d_weights.allFinite())
        throw NumericError("policy_gradients: non-finite weight gradient");
    return out;
}

inline std::vector<Vector> grad_mu(const RolloutBatch& batch, const Gmm& g,
                                   const BlockSplit& split, bool subtract_baseline = false) {
    return policy_gradients(batch, g, split, subtract_baseline, {true, false, false}).d_means;
}

inline std::vector<Matrix> grad_sigma(const RolloutBatch& batch, const Gmm& g,
                                      const BlockSplit& split, bool subtract_baseline = false) {
    return policy_gradients(batch, g, split, subtract_baseline, {false, true, false}).d_covs;
}

inline Vector grad_omega(const RolloutBatch& batch, const Gmm& g, const BlockSplit& split,
                         bool subtract_baseline = false) {
    return policy_gradients(batch, g, split, subtract_baseline, {false, false, true}).d_weights;
}

// Pull a weight-space gradient back through the softmax reparameterization
// omega = softmax(eta):  d/d eta_j = omega_j (d_j - sum_l d_l omega_l).
inline Vector chain_to_eta(const Vector& d_weights, const Vector& weights) {
    if (d_weights.size() != weights.size())
        throw std::invalid_argument("chain_to_eta: size mismatch");
    const double mixed = d_weights.dot(weights);
    return weights.array() * (d_weights.array() - mixed);
}

// Monte-Carlo estimate of the free energy J = E[sum_t gamma^t (r_t - beta log
// pi(a_t|s_t))] under the batch's own discount and temperature.
inline double free_energy_estimate(const RolloutBatch& batch, const Gmm& g,
                                   const BlockSplit& split) {
    if (batch.trajectories.empty())
        throw std::invalid_argument("free_energy_estimate: empty batch");
    const auto cache = detail::build_pg_cache(g, split);
    Vector lj, ls;
    double total = 0.0;
    for (const auto& traj : batch.trajectories) {
        double disc = 1.0;
        double acc = 0.0;
        for (const auto& st : traj.steps) {
            double reward = st.reward;
            if (batch.beta != 0.0) {
                detail::log_densities(cache, st.state, st.action, lj, ls);
                reward -= batch.beta * (detail::logsumexp(lj) - detail::logsumexp(ls));
            }
            acc += disc * reward;
            disc *= batch.gamma;
        }
        total += acc;
    }
    const double j = total / static_cast<double>(batch.trajectories.size());
    if (!std::isfinite(j)) throw NumericError("free_energy_estimate: non-finite value");
    return j;
}

}  // namespace gmmflow
