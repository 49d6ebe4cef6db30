#pragma once

#include <stdexcept>
#include <string>

namespace gmmflow {

// Numerical failure that invalidates the current computation (ill-conditioned
// solve, negative squared distance beyond roundoff, non-convergence where a
// result is required).  Callers in iterative loops may catch this, discard the
// step and re-sample.
class NumericError : public std::runtime_error {
public:
    explicit NumericError(const std::string& what) : std::runtime_error(what) {}
};

// A matrix that must be symmetric positive definite is not, even after the
// jitter floor has been applied.
class NotPositiveDefiniteError : public NumericError {
public:
    explicit NotPositiveDefiniteError(const std::string& what) : NumericError(what) {}
};

// A manifold retraction step left the feasible cone; the caller should shrink
// the step and retry.
class StepTooLargeError : public NumericError {
public:
    explicit StepTooLargeError(const std::string& what) : NumericError(what) {}
};

// Requested gradient cannot be trusted (e.g. the transport solve backing it
// did not converge).
class GradientUnreliableError : public NumericError {
public:
    explicit GradientUnreliableError(const std::string& what) : NumericError(what) {}
};

}  // namespace gmmflow
