#include "deqr/fixpoint.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <deque>

namespace deqr::fp {

namespace {

constexpr double kResidualEps = 1e-8;
constexpr double kAndersonRidge = 1e-4;

ad::Tensor residual_vec(const ad::Tensor& x, const ad::Tensor& fx) {
    ad::Tensor r = fx;
    axpy(-1.0, x, r);
    return r;
}

} // namespace

double residual(const ad::Tensor& prev, const ad::Tensor& next) {
    if (!prev.same_shape(next))
        throw ContractViolation("residual: shape mismatch " + prev.shape_str() + " vs " + next.shape_str());
    ad::Tensor diff = residual_vec(prev, next);
    return norm2(diff) / (norm2(next) + kResidualEps);
}

std::optional<int> least_fixed_index(const std::vector<double>& residuals, double tol) {
    for (std::size_t i = 0; i < residuals.size(); ++i)
        if (residuals[i] < tol) return static_cast<int>(i);
    return std::nullopt;
}

SolveResult solve(const std::function<ad::Tensor(const ad::Tensor&)>& f, const ad::Tensor& z0,
                  const SolveConfig& cfg) {
    if (!z0.all_finite()) throw SolverFailure("solve: initial state is not finite", z0);

    SolveResult out;
    ad::Tensor x = z0;
    ad::Tensor best = z0;
    double best_res = std::numeric_limits<double>::infinity();

    // Sliding history of iterates and residual vectors for Anderson mixing.
    std::deque<ad::Tensor> hist_x, hist_r;
    const std::size_t window = static_cast<std::size_t>(std::max(cfg.anderson_memory, 0)) + 1;

    for (int t = 0; t < cfg.max_iters; ++t) {
        ad::Tensor fx = f(x);
        if (!fx.same_shape(x))
            throw ContractViolation("solve: f changed the state shape " + x.shape_str() + " -> " +
                                    fx.shape_str());
        ++out.steps;
        if (!fx.all_finite()) throw SolverFailure("solve: iterate became non-finite", x);

        ad::Tensor r = residual_vec(x, fx);
        double res = norm2(r) / (norm2(fx) + kResidualEps);
        out.residuals.push_back(res);
        if (cfg.record_trajectory) out.trajectory.push_back(x);
        if (res < best_res) {
            best_res = res;
            best = x;
        }
        if (res < cfg.tol) {
            out.fixed_index = t;
            out.converged = true;
            out.state = x;
            return out;
        }

        if (cfg.method == Method::FixedPoint) {
            axpy(cfg.anderson_beta, r, x);
            continue;
        }

        hist_x.push_back(x);
        hist_r.push_back(r);
        while (hist_x.size() > window) {
            hist_x.pop_front();
            hist_r.pop_front();
        }

        std::size_t m = hist_x.size() - 1; // number of usable differences
        ad::Tensor next = x;
        axpy(cfg.anderson_beta, r, next);
        if (m > 0) {
            std::int64_t dim = x.size();
            Eigen::MatrixXd dR(dim, static_cast<Eigen::Index>(m));
            Eigen::MatrixXd dX(dim, static_cast<Eigen::Index>(m));
            for (std::size_t j = 0; j < m; ++j) {
                for (std::int64_t i = 0; i < dim; ++i) {
                    dR(i, static_cast<Eigen::Index>(j)) = hist_r[j + 1](i) - hist_r[j](i);
                    dX(i, static_cast<Eigen::Index>(j)) = hist_x[j + 1](i) - hist_x[j](i);
                }
            }
            Eigen::Map<const Eigen::VectorXd> rv(r.data(), dim);
            Eigen::MatrixXd gram = dR.transpose() * dR;
            gram.diagonal().array() += kAndersonRidge;
            Eigen::VectorXd gamma = gram.ldlt().solve(dR.transpose() * rv);
            Eigen::VectorXd corr = (dX + cfg.anderson_beta * dR) * gamma;
            for (std::int64_t i = 0; i < dim; ++i) next(i) -= corr(i);
        }
        x = std::move(next);
    }

    out.converged = false;
    out.fixed_index = std::nullopt;
    out.state = best;
    return out;
}

} // namespace deqr::fp
