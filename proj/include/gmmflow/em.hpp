#pragma once

// Expectation-maximization fitting of a Gaussian mixture to data, with
// k-means++-style seeding and re-seeding of starved components.

#include <random>
#include <vector>

#include "gmmflow/gmm.hpp"

namespace gmmflow {

struct EmDiagnostics {
    std::vector<double> log_likelihood;  // mean per-point log-likelihood per iteration
    int iterations = 0;
    int reseeds = 0;
};

namespace detail {

inline Matrix data_covariance(const std::vector<Vector>& data, const Vector& mean) {
    const int d = static_cast<int>(mean.size());
    Matrix cov = Matrix::Zero(d, d);
    for (const auto& x : data) {
        const Vector r = x - mean;
        cov.noalias() += r * r.transpose();
    }
    cov /= static_cast<double>(data.size());
    const double scale = std::max(cov.diagonal().maxCoeff(), 1e-12);
    cov += 1e-8 * scale * Matrix::Identity(d, d);
    return symmetrize(cov);
}

inline std::vector<int> kmeanspp_seed(const std::vector<Vector>& data, int k,
                                      std::mt19937_64& rng) {
    const auto n = data.size();
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> picks;
    picks.push_back(static_cast<int>(unif(rng) * static_cast<double>(n)) % static_cast<int>(n));
    std::vector<double> d2(n, 0.0);
    while (static_cast<int>(picks.size()) < k) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (int p : picks)
                best = std::min(best, (data[i] - data[static_cast<size_t>(p)]).squaredNorm());
            d2[i] = best;
            total += best;
        }
        if (total <= 0.0) {  // all remaining points coincide with a center
            picks.push_back(static_cast<int>(unif(rng) * static_cast<double>(n)) %
                            static_cast<int>(n));
            continue;
        }
        double u = unif(rng) * total;
        size_t chosen = n - 1;
        for (size_t i = 0; i < n; ++i) {
            u -= d2[i];
            if (u <= 0.0) { chosen = i; break; }
        }
        picks.push_back(static_cast<int>(chosen));
    }
    return picks;
}

}  // namespace detail

inline Gmm em_fit(const std::vector<Vector>& data, int n_components, std::mt19937_64& rng,
                  int max_iters = 200, double tol = 1e-7, EmDiagnostics* diag = nullptr) {
    if (data.empty()) throw std::invalid_argument("em_fit: empty data");
    if (n_components < 1) throw std::invalid_argument("em_fit: need at least one component");
    if (static_cast<size_t>(n_components) > data.size())
        throw std::invalid_argument("em_fit: more components than data points");
    const int d = static_cast<int>(data.front().size());
    for (const auto& x : data)
        if (x.size() != d) throw std::invalid_argument("em_fit: data of mixed dimension");

    const size_t n = data.size();
    const int k = n_components;
    Vector grand_mean = Vector::Zero(d);
    for (const auto& x : data) grand_mean += x;
    grand_mean /= static_cast<double>(n);
    const Matrix shared_cov = detail::data_covariance(data, grand_mean);

    std::vector<Vector> means;
    for (int p : detail::kmeanspp_seed(data, k, rng)) means.push_back(data[static_cast<size_t>(p)]);
    std::vector<Matrix> covs(static_cast<size_t>(k), shared_cov);
    Vector weights = Vector::Constant(k, 1.0 / k);

    Eigen::MatrixXd log_resp(n, k);
    double prev_ll = -std::numeric_limits<double>::infinity();
    int it = 0;
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    for (; it < max_iters; ++it) {
        std::vector<Gaussian> comps;
        comps.reserve(static_cast<size_t>(k));
        for (int l = 0; l < k; ++l) comps.emplace_back(means[static_cast<size_t>(l)], covs[static_cast<size_t>(l)]);

        double ll = 0.0;
        for (size_t i = 0; i < n; ++i) {
            Vector terms(k);
            for (int l = 0; l < k; ++l)
                terms[l] = std::log(std::max(weights[l], 1e-300)) +
                           comps[static_cast<size_t>(l)].logpdf(data[i]);
            const double lse = detail::logsumexp(terms);
            ll += lse;
            log_resp.row(static_cast<Eigen::Index>(i)) = (terms.array() - lse).transpose();
        }
        ll /= static_cast<double>(n);
        if (diag) diag->log_likelihood.push_back(ll);
        if (it > 0 && ll - prev_ll < tol) { ++it; break; }
        prev_ll = ll;

        // M step
        const double mass_floor = 1e-6;
        for (int l = 0; l < k; ++l) {
            const Eigen::ArrayXd resp = log_resp.col(l).array().exp();
            const double nk = resp.sum();
            if (nk < mass_floor) {
                // starved component: re-seed on a random data point
                const size_t pick = static_cast<size_t>(unif(rng) * static_cast<double>(n)) % n;
                means[static_cast<size_t>(l)] = data[pick];
                covs[static_cast<size_t>(l)] = shared_cov;
                weights[l] = 1.0 / static_cast<double>(n);
                if (diag) ++diag->reseeds;
                continue;
            }
            Vector mu = Vector::Zero(d);
            for (size_t i = 0; i < n; ++i) mu += resp[static_cast<Eigen::Index>(i)] * data[i];
            mu /= nk;
            Matrix cov = Matrix::Zero(d, d);
            for (size_t i = 0; i < n; ++i) {
                const Vector r = data[i] - mu;
                cov.noalias() += resp[static_cast<Eigen::Index>(i)] * (r * r.transpose());
            }
            cov /= nk;
            means[static_cast<size_t>(l)] = mu;
            covs[static_cast<size_t>(l)] = symmetrize(cov);
            weights[l] = nk / static_cast<double>(n);
        }
        weights /= weights.sum();
    }
    if (diag) diag->iterations = it;

    std::vector<Gaussian> comps;
    comps.reserve(static_cast<size_t>(k));
    for (int l = 0; l < k; ++l) comps.emplace_back(means[static_cast<size_t>(l)], covs[static_cast<size_t>(l)]);
    return Gmm(weights, std::move(comps));
}

}  // namespace gmmflow
