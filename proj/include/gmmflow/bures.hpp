#pragma once

// Calculus on the cone of SPD matrices with the Bures-Wasserstein geometry:
// matrix square roots, Lyapunov solves, the squared 2-Wasserstein distance
// between Gaussians, Riemannian gradient conversion and the retraction used
// for covariance updates.

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <cmath>

#include "gmmflow/errors.hpp"
#include "gmmflow/gmm.hpp"

namespace gmmflow {

namespace detail {

inline Eigen::SelfAdjointEigenSolver<Matrix> sym_eig(const Matrix& a, const char* who) {
    if (!is_symmetric(a, 1e-9))
        throw std::invalid_argument(std::string(who) + ": matrix is not symmetric");
    Eigen::SelfAdjointEigenSolver<Matrix> es(symmetrize(a));
    if (es.info() != Eigen::Success)
        throw NumericError(std::string(who) + ": eigendecomposition failed");
    return es;
}

}  // namespace detail

// Principal square root of an SPD matrix.
inline Matrix spd_sqrt(const Matrix& a) {
    auto es = detail::sym_eig(a, "spd_sqrt");
    const Vector& ev = es.eigenvalues();
    const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1.0);
    if (ev.minCoeff() <= -1e-12 * scale)
        throw NotPositiveDefiniteError("spd_sqrt: input has a non-positive eigenvalue");
    const Vector root = ev.cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose();
}

// Solve L A + A L = B for symmetric L, with A SPD.  In the eigenbasis of A the
// equation decouples: L'_ij = B'_ij / (a_i + a_j).
inline Matrix lyap_solve(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument("lyap_solve: shape mismatch");
    if (!is_symmetric(b, 1e-9))
        throw std::invalid_argument("lyap_solve: right-hand side is not symmetric");
    auto es = detail::sym_eig(a, "lyap_solve");
    const Vector& ev = es.eigenvalues();
    if (ev.minCoeff() <= 0.0)
        throw NotPositiveDefiniteError("lyap_solve: coefficient matrix is not positive definite");
    const Matrix bp = es.eigenvectors().transpose() * symmetrize(b) * es.eigenvectors();
    Matrix lp(bp.rows(), bp.cols());
    for (Eigen::Index i = 0; i < bp.rows(); ++i)
        for (Eigen::Index j = 0; j < bp.cols(); ++j)
            lp(i, j) = bp(i, j) / (ev[i] + ev[j]);
    return symmetrize(es.eigenvectors() * lp * es.eigenvectors().transpose());
}

// Squared 2-Wasserstein distance between Gaussians:
//   |mu1-mu2|^2 + tr(S1) + tr(S2) - 2 tr[(S1^{1/2} S2 S1^{1/2})^{1/2}].
// The cross term is evaluated through the eigenvalues of S1^{1/2} S2 S1^{1/2};
// tiny negative eigenvalues from roundoff are clamped to zero.
inline double w2_gaussian_sq(const Gaussian& g1, const Gaussian& g2) {
    if (g1.dim() != g2.dim())
        throw std::invalid_argument("w2_gaussian_sq: dimension mismatch");
    const Matrix root1 = spd_sqrt(g1.cov());
    const Matrix inner = symmetrize(root1 * g2.cov() * root1);
    Eigen::SelfAdjointEigenSolver<Matrix> es(inner);
    if (es.info() != Eigen::Success)
        throw NumericError("w2_gaussian_sq: eigendecomposition failed");
    const Vector& ev = es.eigenvalues();
    const double scale = std::max(ev.cwiseAbs().maxCoeff(), 1.0);
    if (ev.minCoeff() < -1e-9 * scale)
        throw NumericError("w2_gaussian_sq: cross operator has a significantly negative eigenvalue");
    const double cross = ev.cwiseMax(0.0).cwiseSqrt().sum();
    // The expression is nonnegative for any PSD pair (the eigenvalue guard
    // above screens indefinite inputs), so a negative total here is roundoff
    // cancellation between the trace-scale terms.
    const double val = (g1.mean() - g2.mean()).squaredNorm() + g1.cov().trace() +
                       g2.cov().trace() - 2.0 * cross;
    return std::max(val, 0.0);
}

// Euclidean covariance gradient G -> Riemannian gradient 4 {G Sigma}_sym.
inline Matrix bw_grad(const Matrix& egrad_cov, const Matrix& sigma) {
    if (egrad_cov.rows() != sigma.rows() || egrad_cov.cols() != sigma.cols())
        throw std::invalid_argument("bw_grad: shape mismatch");
    const Matrix g = symmetrize(egrad_cov);
    return 2.0 * (g * sigma + sigma * g);
}

// Retraction of the tangent X at Sigma: with L solving L Sigma + Sigma L = X,
//   R_Sigma(X) = (I + L) Sigma (I + L).
// The factored form keeps the result symmetric PSD whenever I + L is
// invertible; a result that still fails a Cholesky after the jitter floor
// means the step left the cone and the caller must shrink it.
inline Matrix bw_retract(const Matrix& sigma, const Matrix& x) {
    const Matrix l = lyap_solve(sigma, x);
    const Matrix factor = Matrix::Identity(sigma.rows(), sigma.cols()) + l;
    const Matrix out = symmetrize(factor * sigma * factor.transpose());
    Eigen::LLT<Matrix> llt(out);
    if (llt.info() != Eigen::Success) {
        const double scale = std::max(out.diagonal().cwiseAbs().maxCoeff(), 1e-300);
        Eigen::LLT<Matrix> retry(out + 1e-12 * scale * Matrix::Identity(out.rows(), out.cols()));
        if (retry.info() != Eigen::Success)
            throw StepTooLargeError("bw_retract: step leaves the SPD cone");
    }
    return out;
}

}  // namespace gmmflow
