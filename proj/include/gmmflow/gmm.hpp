#pragma once

// Gaussian mixture models over joint state-action vectors: densities, sampling,
// block marginals and conditionals (Gaussian mixture regression).

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <utility>
#include <vector>

#include "gmmflow/errors.hpp"

namespace gmmflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

inline constexpr double kWeightFloor = 1e-8;  // floor for weights used in divisions

inline Matrix symmetrize(const Matrix& m) { return 0.5 * (m + m.transpose()); }

inline bool is_symmetric(const Matrix& m, double tol = 1e-9) {
    if (m.rows() != m.cols()) return false;
    const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
    return (m - m.transpose()).cwiseAbs().maxCoeff() <= tol * scale;
}

namespace detail {

// Cholesky with an escalating diagonal jitter.  Returns the (possibly
// jittered) matrix and its LLT; throws NotPositiveDefiniteError if even a
// substantial jitter cannot rescue the factorization.
inline std::pair<Matrix, Eigen::LLT<Matrix>> chol_with_jitter(const Matrix& sym) {
    Eigen::LLT<Matrix> llt(sym);
    if (llt.info() == Eigen::Success) return {sym, llt};
    const double scale = std::max(sym.diagonal().cwiseAbs().maxCoeff(),
                                  std::numeric_limits<double>::min());
    double jitter = 1e-12 * scale;
    Matrix m = sym;
    for (int attempt = 0; attempt < 12; ++attempt) {
        m = sym + jitter * Matrix::Identity(sym.rows(), sym.cols());
        llt.compute(m);
        if (llt.info() == Eigen::Success) return {m, llt};
        jitter *= 10.0;
    }
    throw NotPositiveDefiniteError("matrix is not positive definite (jitter floor exhausted)");
}

inline double logsumexp(const Vector& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;  // all -inf (or a nan) propagates
    return m + std::log((v.array() - m).exp().sum());
}

}  // namespace detail

class Gaussian {
public:
    Gaussian(Vector mean, Matrix cov) : mean_(std::move(mean)) {
        const auto d = mean_.size();
        if (d < 1) throw std::invalid_argument("gaussian: empty mean");
        if (cov.rows() != d || cov.cols() != d)
            throw std::invalid_argument("gaussian: covariance shape does not match mean dimension");
        if (!is_symmetric(cov, 1e-9))
            throw std::invalid_argument("gaussian: covariance is not symmetric");
        auto [fixed, llt] = detail::chol_with_jitter(symmetrize(cov));
        cov_ = std::move(fixed);
        llt_ = std::move(llt);
        log_det_ = 2.0 * llt_.matrixLLT().diagonal().array().log().sum();
    }

    int dim() const { return static_cast<int>(mean_.size()); }
    const Vector& mean() const { return mean_; }
    const Matrix& cov() const { return cov_; }
    const Eigen::LLT<Matrix>& llt() const { return llt_; }
    double log_det_cov() const { return log_det_; }

    double logpdf(const Vector& x) const {
        if (x.size() != mean_.size())
            throw std::invalid_argument("gaussian logpdf: dimension mismatch");
        const Vector r = x - mean_;
        const double quad = r.dot(llt_.solve(r));
        return -0.5 * (dim() * std::log(2.0 * std::numbers::pi) + log_det_ + quad);
    }

    // mean + L z with z standard normal; deterministic given the generator state.
    Vector sample(std::mt19937_64& rng) const {
        std::normal_distribution<double> normal(0.0, 1.0);
        Vector z(dim());
        for (int i = 0; i < dim(); ++i) z[i] = normal(rng);
        return mean_ + llt_.matrixL() * z;
    }

private:
    Vector mean_;
    Matrix cov_;
    Eigen::LLT<Matrix> llt_;
    double log_det_ = 0.0;
};

class Gmm {
public:
    Gmm(Vector weights, std::vector<Gaussian> components)
        : weights_(std::move(weights)), components_(std::move(components)) {
        if (components_.empty()) throw std::invalid_argument("gmm: no components");
        if (weights_.size() != static_cast<Eigen::Index>(components_.size()))
            throw std::invalid_argument("gmm: weight count does not match component count");
        const int d = components_.front().dim();
        for (const auto& c : components_)
            if (c.dim() != d) throw std::invalid_argument("gmm: components of mixed dimension");
        if (weights_.minCoeff() < -1e-12)
            throw std::invalid_argument("gmm: negative weight");
        weights_ = weights_.cwiseMax(0.0);
        const double total = weights_.sum();
        if (std::abs(total - 1.0) > 1e-8)
            throw std::invalid_argument("gmm: weights do not sum to one");
        // renormalize unless already at roundoff, so serialized weights survive
        // a load/store cycle bit-for-bit
        if (std::abs(total - 1.0) > 1e-13) weights_ /= total;
    }

    int size() const { return static_cast<int>(components_.size()); }
    int dim() const { return components_.front().dim(); }
    const Vector& weights() const { return weights_; }
    const Gaussian& component(int i) const { return components_.at(static_cast<size_t>(i)); }
    const std::vector<Gaussian>& components() const { return components_; }

    double logpdf(const Vector& x) const {
        Vector terms(size());
        for (int l = 0; l < size(); ++l)
            terms[l] = std::log(std::max(weights_[l], kWeightFloor * 1e-8)) +
                       components_[static_cast<size_t>(l)].logpdf(x);
        return detail::logsumexp(terms);
    }

    Vector sample(std::mt19937_64& rng) const {
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        const double u = unif(rng);
        double acc = 0.0;
        int pick = size() - 1;
        for (int l = 0; l < size(); ++l) {
            acc += weights_[l];
            if (u <= acc) { pick = l; break; }
        }
        return components_[static_cast<size_t>(pick)].sample(rng);
    }

private:
    Vector weights_;
    std::vector<Gaussian> components_;
};

inline double gaussian_logpdf(const Vector& x, const Gaussian& g) { return g.logpdf(x); }
inline double gmm_logpdf(const Vector& x, const Gmm& g) { return g.logpdf(x); }
inline Vector gmm_sample(const Gmm& g, std::mt19937_64& rng) { return g.sample(rng); }

// Partition of a joint vector into leading state and trailing action blocks.
struct BlockSplit {
    int state_dim = 0;
    int action_dim = 0;

    int joint_dim() const { return state_dim + action_dim; }
    void check(int d) const {
        if (state_dim < 1 || action_dim < 1 || joint_dim() != d)
            throw std::invalid_argument("block split does not match joint dimension");
    }
};

// Marginal of the mixture over the state block; weights carry over.
inline Gmm marginal(const Gmm& g, const BlockSplit& split) {
    split.check(g.dim());
    std::vector<Gaussian> comps;
    comps.reserve(static_cast<size_t>(g.size()));
    for (int l = 0; l < g.size(); ++l) {
        const auto& c = g.component(l);
        comps.emplace_back(c.mean().head(split.state_dim),
                           c.cov().topLeftCorner(split.state_dim, split.state_dim));
    }
    return Gmm(g.weights(), std::move(comps));
}

// Condition the joint mixture on an observed state: each component conditions
// as a Gaussian, and the weights re-weight by the state-marginal densities.
inline Gmm gmr_condition(const Gmm& g, const BlockSplit& split, const Vector& s) {
    split.check(g.dim());
    if (s.size() != split.state_dim)
        throw std::invalid_argument("gmr_condition: state dimension mismatch");
    const int n = g.size();
    const int ds = split.state_dim;
    const int da = split.action_dim;

    Vector logw(n);
    std::vector<Gaussian> comps;
    comps.reserve(static_cast<size_t>(n));
    for (int l = 0; l < n; ++l) {
        const auto& c = g.component(l);
        const Vector mu_s = c.mean().head(ds);
        const Vector mu_a = c.mean().tail(da);
        const Matrix sig_ss = c.cov().topLeftCorner(ds, ds);
        const Matrix sig_as = c.cov().bottomLeftCorner(da, ds);
        auto [fixed_ss, llt_ss] = detail::chol_with_jitter(symmetrize(sig_ss));
        const Vector r = s - mu_s;
        const Vector mean_c = mu_a + sig_as * llt_ss.solve(r);
        const Matrix cov_c =
            symmetrize(c.cov().bottomRightCorner(da, da) -
                       sig_as * llt_ss.solve(sig_as.transpose()));
        comps.emplace_back(mean_c, cov_c);

        const double log_det_ss = 2.0 * llt_ss.matrixLLT().diagonal().array().log().sum();
        const double quad = r.dot(llt_ss.solve(r));
        logw[l] = std::log(std::max(g.weights()[l], kWeightFloor * 1e-8)) -
                  0.5 * (ds * std::log(2.0 * std::numbers::pi) + log_det_ss + quad);
        (void)fixed_ss;
    }
    const double lse = detail::logsumexp(logw);
    Vector w = (logw.array() - lse).exp();
    w /= w.sum();
    return Gmm(std::move(w), std::move(comps));
}

}  // namespace gmmflow
