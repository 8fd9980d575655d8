#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>

#include <cmath>
#include <limits>

#include "deqr/fixpoint.hpp"
#include "test_util.hpp"

using namespace deqr;
using ad::Tensor;

namespace {

struct LinearMap {
    Eigen::MatrixXd a;
    Eigen::VectorXd b;

    Tensor operator()(const Tensor& x) const {
        Eigen::Map<const Eigen::VectorXd> xv(x.data(), x.size());
        Eigen::VectorXd y = a * xv + b;
        Tensor out = x;
        for (std::int64_t i = 0; i < out.size(); ++i) out(i) = y(i);
        return out;
    }

    Eigen::VectorXd exact() const {
        Eigen::MatrixXd lhs = Eigen::MatrixXd::Identity(a.rows(), a.cols()) - a;
        return lhs.fullPivLu().solve(b);
    }
};

LinearMap random_contraction(Rng& rng, int dim, double radius) {
    LinearMap m;
    m.a = Eigen::MatrixXd(dim, dim);
    m.b = Eigen::VectorXd(dim);
    for (int r = 0; r < dim; ++r) {
        for (int c = 0; c < dim; ++c) m.a(r, c) = uniform(rng, -1.0, 1.0);
        m.b(r) = uniform(rng, -1.0, 1.0);
    }
    // Rescale so the spectral radius lands exactly on `radius`.
    double rho = m.a.eigenvalues().cwiseAbs().maxCoeff();
    m.a *= radius / rho;
    return m;
}

} // namespace

TEST_CASE("residual matches its definition") {
    Tensor prev = Tensor::from_data({3}, {1.0, 2.0, 3.0});
    Tensor next = Tensor::from_data({3}, {1.5, 1.0, 3.0});
    double num = std::sqrt(0.25 + 1.0);
    double den = std::sqrt(1.5 * 1.5 + 1.0 + 9.0) + 1e-8;
    CHECK(fp::residual(prev, next) == doctest::Approx(num / den).epsilon(1e-12));

    SUBCASE("zero next is safe") {
        Tensor z = Tensor::zeros({3});
        CHECK(fp::residual(prev, z) == doctest::Approx(norm2(prev) / 1e-8));
        CHECK(fp::residual(z, z) == 0.0);
    }
    SUBCASE("shape mismatch throws") {
        CHECK_THROWS_AS(fp::residual(prev, Tensor::zeros({4})), ContractViolation);
    }
}

TEST_CASE("least_fixed_index picks the first passing entry") {
    Rng rng(41);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t len = static_cast<std::size_t>(uniform_int(rng, 0, 12));
        std::vector<double> res(len);
        for (double& v : res) v = uniform(rng, 0.0, 1.0);
        double tol = uniform(rng, 0.0, 1.0);

        std::optional<int> got = fp::least_fixed_index(res, tol);
        std::optional<int> want;
        for (std::size_t i = 0; i < len; ++i) {
            if (res[i] < tol) {
                want = static_cast<int>(i);
                break;
            }
        }
        CHECK(got == want);
    }
    CHECK(fp::least_fixed_index({0.5, 0.5}, 0.5) == std::nullopt); // strict <
}

TEST_CASE("linear contractions reach the algebraic fixed point") {
    Rng rng(42);
    for (int trial = 0; trial < 8; ++trial) {
        int dim = uniform_int(rng, 2, 32);
        LinearMap f = random_contraction(rng, dim, 0.6);
        Eigen::VectorXd star = f.exact();
        Tensor z0 = testutil::rand_tensor(rng, {dim}, -1.0, 1.0);

        for (fp::Method method : {fp::Method::FixedPoint, fp::Method::Anderson}) {
            fp::SolveConfig cfg;
            cfg.method = method;
            cfg.tol = 1e-10;
            cfg.max_iters = 500;
            fp::SolveResult r = fp::solve(f, z0, cfg);
            REQUIRE(r.converged);
            Eigen::Map<const Eigen::VectorXd> got(r.state.data(), r.state.size());
            CHECK((got - star).norm() / star.norm() < 1e-8);
        }
    }
}

TEST_CASE("scalar cosine map converges to the Dottie number") {
    auto f = [](const Tensor& x) {
        Tensor y = x;
        y(0) = std::cos(x(0));
        return y;
    };
    fp::SolveConfig cfg;
    cfg.tol = 1e-12;
    cfg.max_iters = 200;
    for (fp::Method method : {fp::Method::FixedPoint, fp::Method::Anderson}) {
        cfg.method = method;
        fp::SolveResult r = fp::solve(f, Tensor::scalar(0.0), cfg);
        REQUIRE(r.converged);
        CHECK(r.state(0) == doctest::Approx(0.7390851332151607).epsilon(1e-9));
    }
}

TEST_CASE("trajectory and residuals describe pre-update iterates") {
    Rng rng(43);
    LinearMap f = random_contraction(rng, 6, 0.7);
    Tensor z0 = testutil::rand_tensor(rng, {6}, -1.0, 1.0);

    fp::SolveConfig cfg;
    cfg.tol = 1e-8;
    cfg.max_iters = 300;
    cfg.record_trajectory = true;
    fp::SolveResult r = fp::solve(f, z0, cfg);
    REQUIRE(r.converged);
    REQUIRE(r.fixed_index.has_value());

    CHECK(r.trajectory.size() == static_cast<std::size_t>(r.steps));
    CHECK(r.residuals.size() == static_cast<std::size_t>(r.steps));
    CHECK(*r.fixed_index == r.steps - 1);
    CHECK(testutil::max_abs_diff(r.trajectory.front(), z0) == 0.0);
    // The selected state is the iterate whose residual passed, before any mixing.
    CHECK(testutil::max_abs_diff(r.state, r.trajectory.back()) == 0.0);

    // Choose the first: every earlier residual failed, and each recorded
    // residual is reproducible from consecutive f evaluations.
    for (int t = 0; t + 1 < r.steps; ++t) CHECK(r.residuals[static_cast<std::size_t>(t)] >= cfg.tol);
    CHECK(r.residuals.back() < cfg.tol);
    CHECK(fp::least_fixed_index(r.residuals, cfg.tol) == r.fixed_index);
    for (int t = 0; t < r.steps; ++t) {
        const Tensor& x = r.trajectory[static_cast<std::size_t>(t)];
        CHECK(r.residuals[static_cast<std::size_t>(t)] ==
              doctest::Approx(fp::residual(x, f(x))).epsilon(1e-12));
    }
}

TEST_CASE("non-convergence returns the lowest-residual iterate") {
    Rng rng(44);
    LinearMap f = random_contraction(rng, 5, 0.97);
    Tensor z0 = testutil::rand_tensor(rng, {5}, -2.0, 2.0);

    fp::SolveConfig cfg;
    cfg.method = fp::Method::FixedPoint;
    cfg.tol = 1e-14;
    cfg.max_iters = 12;
    cfg.record_trajectory = true;
    fp::SolveResult r = fp::solve(f, z0, cfg);

    CHECK_FALSE(r.converged);
    CHECK_FALSE(r.fixed_index.has_value());
    CHECK(r.steps == cfg.max_iters);

    std::size_t best = 0;
    for (std::size_t t = 1; t < r.residuals.size(); ++t)
        if (r.residuals[t] < r.residuals[best]) best = t;
    CHECK(testutil::max_abs_diff(r.state, r.trajectory[best]) == 0.0);
}

TEST_CASE("solver failure carries the last finite state") {
    Tensor z0 = Tensor::from_data({2}, {1.0, 1.0});
    int calls = 0;
    auto f = [&](const Tensor& x) {
        Tensor y = x;
        ++calls;
        if (calls >= 3) {
            y(0) = std::numeric_limits<double>::quiet_NaN();
        } else {
            y(0) = 0.5 * x(0) + 10.0;
            y(1) = 0.5 * x(1) - 4.0;
        }
        return y;
    };
    fp::SolveConfig cfg;
    cfg.method = fp::Method::FixedPoint;
    cfg.tol = 1e-12;
    cfg.max_iters = 50;
    try {
        fp::solve(f, z0, cfg);
        FAIL("expected SolverFailure");
    } catch (const fp::SolverFailure& e) {
        CHECK(e.last_finite.all_finite());
        CHECK(e.last_finite.size() == 2);
    }

    SUBCASE("non-finite start is rejected up front") {
        Tensor bad = Tensor::from_data({2}, {std::numeric_limits<double>::infinity(), 0.0});
        CHECK_THROWS_AS(fp::solve(f, bad, cfg), fp::SolverFailure);
    }
}

TEST_CASE("shape-changing maps are rejected") {
    auto f = [](const Tensor& x) {
        (void)x;
        return Tensor::zeros({3});
    };
    fp::SolveConfig cfg;
    CHECK_THROWS_AS(fp::solve(f, Tensor::zeros({2}), cfg), ContractViolation);
}

TEST_CASE("anderson needs fewer steps than plain iteration on stiff problems") {
    Rng rng(45);
    int anderson_wins = 0;
    for (int trial = 0; trial < 5; ++trial) {
        LinearMap f = random_contraction(rng, 16, 0.95);
        Tensor z0 = testutil::rand_tensor(rng, {16}, -1.0, 1.0);

        fp::SolveConfig cfg;
        cfg.tol = 1e-9;
        cfg.max_iters = 2000;

        cfg.method = fp::Method::FixedPoint;
        fp::SolveResult plain = fp::solve(f, z0, cfg);
        cfg.method = fp::Method::Anderson;
        fp::SolveResult mixed = fp::solve(f, z0, cfg);

        REQUIRE(plain.converged);
        REQUIRE(mixed.converged);
        if (mixed.steps < plain.steps) ++anderson_wins;
    }
    CHECK(anderson_wins == 5);
}
