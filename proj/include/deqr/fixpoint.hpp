#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "deqr/tensor.hpp"

namespace deqr::fp {

enum class Method { FixedPoint, Anderson };

struct SolveConfig {
    Method method = Method::Anderson;
    double tol = 0.1;
    int max_iters = 64;
    int anderson_memory = 5;
    double anderson_beta = 1.0;
    bool record_trajectory = false;
};

/// Raised when an iterate stops being finite; carries the last finite state.
class SolverFailure : public std::runtime_error {
public:
    SolverFailure(const std::string& what, ad::Tensor last_finite)
        : std::runtime_error(what), last_finite(std::move(last_finite)) {}
    ad::Tensor last_finite;
};

struct SolveResult {
    // states[t] is the t-th iterate H^t, starting at z0; recorded on request.
    std::vector<ad::Tensor> trajectory;
    // residuals[t] measures how much one more application of f moves H^t.
    std::vector<double> residuals;
    std::optional<int> fixed_index;
    bool converged = false;
    int steps = 0; // number of f evaluations
    ad::Tensor state; // the selected state (first passing iterate, else best seen)
};

/// Relative update magnitude ||next - prev||_2 / (||next||_2 + 1e-8).
double residual(const ad::Tensor& prev, const ad::Tensor& next);

/// Index of the first residual below tol ("choose the first"), if any.
std::optional<int> least_fixed_index(const std::vector<double>& residuals, double tol);

/// Iterates H <- f(H) from z0, stopping at the first iterate whose residual
/// passes tol. Anderson mixes the last min(t, memory) iterates via ridge
/// normal equations. Non-convergence returns the lowest-residual iterate with
/// converged = false.
SolveResult solve(const std::function<ad::Tensor(const ad::Tensor&)>& f, const ad::Tensor& z0,
                  const SolveConfig& cfg);

} // namespace deqr::fp
