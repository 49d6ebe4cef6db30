#pragma once

// Discrete optimal transport between mixture weight vectors: pairwise Gaussian
// cost matrices, entropy-regularized Sinkhorn in the log domain with an
// annealed regularization schedule, and an exact small-instance solver
// (transportation simplex) used for trust-region checks and as a reference.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "gmmflow/bures.hpp"
#include "gmmflow/errors.hpp"
#include "gmmflow/gmm.hpp"

namespace gmmflow {

struct TransportPlan {
    Matrix plan;
    Vector dual_f;  // potential on the first marginal, centered to mean zero
    Vector dual_g;
    double cost = 0.0;      // <plan, C>, excludes the entropy term
    double epsilon = 0.0;   // final regularization the plan was computed at
    double marginal_violation = 0.0;  // L1 row + column marginal error
    bool converged = false;
    int iterations = 0;
};

// Pairwise squared Gaussian W2 costs between the components of two mixtures.
inline Matrix cost_matrix(const Gmm& g1, const Gmm& g2) {
    if (g1.dim() != g2.dim())
        throw std::invalid_argument("cost_matrix: mixtures of different dimension");
    Matrix c(g1.size(), g2.size());
    for (int i = 0; i < g1.size(); ++i)
        for (int j = 0; j < g2.size(); ++j)
            c(i, j) = w2_gaussian_sq(g1.component(i), g2.component(j));
    return c;
}

namespace detail {

inline double matrix_median(const Matrix& c) {
    std::vector<double> v(c.data(), c.data() + c.size());
    auto mid = v.begin() + v.size() / 2;
    std::nth_element(v.begin(), mid, v.end());
    return *mid;
}

inline void check_marginals(const Vector& a, const Vector& b, const Matrix& c,
                            const char* who) {
    if (c.rows() != a.size() || c.cols() != b.size())
        throw std::invalid_argument(std::string(who) + ": cost matrix shape mismatch");
    if (a.size() == 0 || b.size() == 0)
        throw std::invalid_argument(std::string(who) + ": empty marginal");
    if (a.minCoeff() < -1e-12 || b.minCoeff() < -1e-12)
        throw std::invalid_argument(std::string(who) + ": negative marginal entry");
    if (std::abs(a.sum() - b.sum()) > 1e-8 * std::max(1.0, a.sum()))
        throw std::invalid_argument(std::string(who) + ": marginals have different total mass");
}

}  // namespace detail

// Suggested final regularization for a given cost matrix.
inline double default_sinkhorn_epsilon(const Matrix& c) {
    return std::max(1e-4 * detail::matrix_median(c), 1e-12);
}

// Log-domain Sinkhorn with geometric annealing of the regularization from
// 0.1*median(C) down to `epsilon`.  Weights are floored at 1e-8 and
// renormalized.  Returned duals are the gradients of the entropic cost with
// respect to the first marginal (up to the usual additive gauge, fixed here by
// centering dual_f).
inline TransportPlan sinkhorn(const Vector& w1, const Vector& w2, const Matrix& c,
                              double epsilon, int max_iters = 5000, double tol = 1e-9) {
    detail::check_marginals(w1, w2, c, "sinkhorn");
    if (epsilon <= 0.0) epsilon = default_sinkhorn_epsilon(c);
    const auto n = w1.size();
    const auto m = w2.size();

    Vector a = w1.cwiseMax(kWeightFloor);
    a /= a.sum();
    Vector b = w2.cwiseMax(kWeightFloor);
    b /= b.sum();
    const Vector log_a = a.array().log();
    const Vector log_b = b.array().log();

    TransportPlan out;
    out.epsilon = epsilon;

    const double med = std::max(detail::matrix_median(c), c.maxCoeff());
    if (med <= 0.0) {  // all costs vanish: any coupling is optimal
        out.plan = a * b.transpose();
        out.dual_f = Vector::Zero(n);
        out.dual_g = Vector::Zero(m);
        out.cost = (out.plan.array() * c.array()).sum();
        out.converged = true;
        return out;
    }

    std::vector<double> schedule;
    for (double e = std::max(epsilon, 0.1 * med); e > epsilon; e *= 0.5) schedule.push_back(e);
    schedule.push_back(epsilon);

    Vector f = Vector::Zero(n);
    Vector g = Vector::Zero(m);
    auto lse_rows = [&](double eps) {  // per-row logsumexp of (g_j - C_ij)/eps
        Vector out_v(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Eigen::ArrayXd t = (g.transpose().array() - c.row(i).array()) / eps;
            const double mx = t.maxCoeff();
            out_v[i] = mx + std::log((t - mx).exp().sum());
        }
        return out_v;
    };
    auto lse_cols = [&](double eps) {
        Vector out_v(m);
        for (Eigen::Index j = 0; j < m; ++j) {
            const Eigen::ArrayXd t = (f.array() - c.col(j).array()) / eps;
            const double mx = t.maxCoeff();
            out_v[j] = mx + std::log((t - mx).exp().sum());
        }
        return out_v;
    };
    auto plan_from = [&](double eps) {
        Matrix p(n, m);
        for (Eigen::Index i = 0; i < n; ++i)
            for (Eigen::Index j = 0; j < m; ++j)
                p(i, j) = std::exp((f[i] + g[j] - c(i, j)) / eps);
        return p;
    };

    int used = 0;
    for (size_t s = 0; s < schedule.size(); ++s) {
        const double eps = schedule[s];
        const bool final_stage = (s + 1 == schedule.size());
        const double stage_tol = final_stage ? tol : std::max(tol, 1e-7);
        const int stage_cap = final_stage
                                  ? std::max(50, max_iters - used)
                                  : std::max(30, max_iters / (2 * static_cast<int>(schedule.size())));
        for (int it = 0; it < stage_cap && used < max_iters; ++it, ++used) {
            g = eps * (log_b - lse_cols(eps));
            f = eps * (log_a - lse_rows(eps));
            const Matrix p = plan_from(eps);
            const double viol = (p.rowwise().sum() - a).cwiseAbs().sum() +
                                (p.colwise().sum().transpose() - b).cwiseAbs().sum();
            if (viol <= stage_tol) break;
        }
    }

    out.plan = plan_from(epsilon);
    out.marginal_violation = (out.plan.rowwise().sum() - a).cwiseAbs().sum() +
                             (out.plan.colwise().sum().transpose() - b).cwiseAbs().sum();
    out.converged = out.marginal_violation <= tol;
    out.cost = (out.plan.array() * c.array()).sum();
    out.iterations = used;
    const double center = f.mean();
    out.dual_f = f.array() - center;
    out.dual_g = g.array() + center;
    return out;
}

struct LpSolution {
    Matrix plan;
    double cost = 0.0;
    Vector u;  // row duals, u[0] = 0 gauge
    Vector v;
};

// Exact solver for min <P,C> over the transportation polytope, via the
// classical simplex on the basis tree (northwest-corner start, MODI duals,
// cycle pivots).  Sizes here are mixture sizes, so everything is tiny.
inline LpSolution exact_ot_lp(const Vector& w1, const Vector& w2, const Matrix& c) {
    detail::check_marginals(w1, w2, c, "exact_ot_lp");
    const int n = static_cast<int>(w1.size());
    const int m = static_cast<int>(w2.size());

    Vector a = w1.cwiseMax(0.0);
    Vector b = w2.cwiseMax(0.0);
    b *= a.sum() / b.sum();

    Matrix x = Matrix::Zero(n, m);
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> basic(n, m);
    basic.setConstant(false);

    {   // northwest corner: exactly n+m-1 basic cells, advancing one index per cell
        Vector ra = a, rb = b;
        int i = 0, j = 0;
        while (true) {
            const double t = std::min(ra[i], rb[j]);
            x(i, j) = t;
            basic(i, j) = true;
            ra[i] -= t;
            rb[j] -= t;
            if (i == n - 1 && j == m - 1) break;
            if (i == n - 1) ++j;
            else if (j == m - 1) ++i;
            else if (ra[i] <= 0.0) ++i;
            else ++j;
        }
    }

    const double tol = 1e-11 * (1.0 + c.cwiseAbs().maxCoeff());
    Vector u(n), v(m);
    auto compute_duals = [&]() {
        std::vector<char> us(static_cast<size_t>(n), 0), vs(static_cast<size_t>(m), 0);
        u[0] = 0.0;
        us[0] = 1;
        bool progress = true;
        int known = 1;
        while (known < n + m && progress) {
            progress = false;
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    if (!basic(i, j)) continue;
                    if (us[static_cast<size_t>(i)] && !vs[static_cast<size_t>(j)]) {
                        v[j] = c(i, j) - u[i];
                        vs[static_cast<size_t>(j)] = 1;
                        ++known;
                        progress = true;
                    } else if (!us[static_cast<size_t>(i)] && vs[static_cast<size_t>(j)]) {
                        u[i] = c(i, j) - v[j];
                        us[static_cast<size_t>(i)] = 1;
                        ++known;
                        progress = true;
                    }
                }
        }
        if (known < n + m) throw NumericError("exact_ot_lp: basis tree disconnected");
    };

    // Unique row-col path through the basis tree between the entering cell's
    // endpoints; nodes 0..n-1 are rows, n..n+m-1 are columns.
    auto find_path = [&](int si, int sj) {
        const int nn = n + m;
        std::vector<int> parent(static_cast<size_t>(nn), -2);
        std::deque<int> queue;
        parent[static_cast<size_t>(si)] = -1;
        queue.push_back(si);
        const int goal = n + sj;
        while (!queue.empty()) {
            const int node = queue.front();
            queue.pop_front();
            if (node == goal) break;
            if (node < n) {
                for (int j = 0; j < m; ++j)
                    if (basic(node, j) && parent[static_cast<size_t>(n + j)] == -2) {
                        parent[static_cast<size_t>(n + j)] = node;
                        queue.push_back(n + j);
                    }
            } else {
                const int col = node - n;
                for (int i = 0; i < n; ++i)
                    if (basic(i, col) && parent[static_cast<size_t>(i)] == -2) {
                        parent[static_cast<size_t>(i)] = node;
                        queue.push_back(i);
                    }
            }
        }
        std::vector<int> nodes;  // goal back to start
        for (int node = goal; node != -1; node = parent[static_cast<size_t>(node)]) {
            if (node == -2) throw NumericError("exact_ot_lp: no pivot cycle found");
            nodes.push_back(node);
        }
        std::reverse(nodes.begin(), nodes.end());  // starts at si, ends at goal
        return nodes;
    };

    bool bland = false;
    int degenerate_streak = 0;
    const int max_pivots = 200000;
    for (int pivot = 0;; ++pivot) {
        if (pivot >= max_pivots) throw NumericError("exact_ot_lp: pivot limit exceeded");
        compute_duals();

        int ei = -1, ej = -1;
        double best = -tol;
        for (int i = 0; i < n && (ei < 0 || !bland); ++i)
            for (int j = 0; j < m; ++j) {
                if (basic(i, j)) continue;
                const double red = c(i, j) - u[i] - v[j];
                if (red < best) {
                    best = red;
                    ei = i;
                    ej = j;
                    if (bland) break;  // first negative in row-major order
                }
            }
        if (ei < 0) break;  // optimal

        const auto nodes = find_path(ei, ej);
        // cycle cells: entering (+), then alternating -,+ along the tree path
        double theta = std::numeric_limits<double>::infinity();
        int li = -1, lj = -1;
        std::vector<std::pair<int, int>> minus_cells, plus_cells;
        for (size_t t = 0; t + 1 < nodes.size(); ++t) {
            const int p = nodes[t], q = nodes[t + 1];
            const int ci = (p < n) ? p : q;
            const int cj = (p < n) ? q - n : p - n;
            if (t % 2 == 0) {  // minus edge
                minus_cells.emplace_back(ci, cj);
                if (x(ci, cj) < theta) {
                    theta = x(ci, cj);
                    li = ci;
                    lj = cj;
                }
            } else {
                plus_cells.emplace_back(ci, cj);
            }
        }
        for (auto [ci, cj] : minus_cells) x(ci, cj) -= theta;
        for (auto [ci, cj] : plus_cells) x(ci, cj) += theta;
        x(ei, ej) = theta;
        basic(ei, ej) = true;
        basic(li, lj) = false;
        x(li, lj) = 0.0;

        if (theta <= 0.0) {
            if (++degenerate_streak > 4 * n * m) bland = true;  // anti-cycling fallback
        } else {
            degenerate_streak = 0;
            bland = false;
        }
    }

    LpSolution out;
    out.plan = x;
    out.cost = (x.array() * c.array()).sum();
    out.u = u;
    out.v = v;
    return out;
}

enum class OtSolver { sinkhorn, exact };

// Squared GMM W2 distance: optimal (or entropic) coupling cost between the
// component lists under pairwise Gaussian W2 costs.
inline double w2_gmm_sq(const Gmm& g1, const Gmm& g2, double epsilon = 0.0,
                        OtSolver solver = OtSolver::exact) {
    const Matrix c = cost_matrix(g1, g2);
    if (solver == OtSolver::exact) return exact_ot_lp(g1.weights(), g2.weights(), c).cost;
    const TransportPlan plan = sinkhorn(g1.weights(), g2.weights(), c, epsilon);
    if (!plan.converged) throw NumericError("w2_gmm_sq: sinkhorn did not converge");
    return plan.cost;
}

// Gradient of the entropic GMM W2 cost with respect to the first weight
// vector: the centered dual potential.
inline Vector grad_w2_weights(const TransportPlan& plan) {
    if (!plan.converged)
        throw GradientUnreliableError("grad_w2_weights: transport plan did not converge");
    return plan.dual_f;
}

}  // namespace gmmflow
