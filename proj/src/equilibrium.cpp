#include "deqr/equilibrium.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <deque>

namespace deqr::eq {

using ad::Tape;
using ad::Tensor;
using ad::Var;
using model::Encoded;
using model::GraphPlan;
using model::ModelConfig;
using model::ModelParams;
using model::VarParams;

int sample_extra_steps(double prob, Rng& rng) {
    if (prob <= 0.0) return 0;
    if (prob >= 1.0) throw ContractViolation("extra_step_prob must be below 1");
    int s = 0;
    while (uniform(rng, 0.0, 1.0) < prob) ++s;
    return s;
}

namespace {

void check_cgp(const GraphPlan& plan, const ModelConfig& mcfg) {
    if (mcfg.cgp != plan.inst->cgp_augmented)
        throw ContractViolation(mcfg.cgp ? "cgp model requires an augmented instance"
                                         : "non-cgp model got an augmented instance");
}

struct TapeSolve {
    std::vector<Var> trajectory; // H^0 .. H^T, ending at the selected state
    std::vector<double> residuals;
    bool converged = false;
    int steps = 0;
    Var state{};
};

/// fp::solve rendered in Var arithmetic so alignment gradients can flow
/// through the iterates. Anderson mixing coefficients are computed from
/// values and treated as constants.
TapeSolve solve_on_tape(Tape& t, const std::function<Var(Var)>& f, Var z0,
                        const fp::SolveConfig& cfg) {
    TapeSolve out;
    Var x = z0;
    int best_index = 0;
    double best_res = std::numeric_limits<double>::infinity();
    std::deque<Var> hx, hr;
    const std::size_t window = static_cast<std::size_t>(std::max(cfg.anderson_memory, 0)) + 1;

    for (int it = 0; it < cfg.max_iters; ++it) {
        Var fx = f(x);
        ++out.steps;
        if (!t.value(fx).all_finite())
            throw fp::SolverFailure("solve: iterate became non-finite", t.value(x));
        Var r = ad::sub(fx, x);
        double res = norm2(t.value(r)) / (norm2(t.value(fx)) + 1e-8);
        out.trajectory.push_back(x);
        out.residuals.push_back(res);
        if (res < best_res) {
            best_res = res;
            best_index = it;
        }
        if (res < cfg.tol) {
            out.converged = true;
            out.state = x;
            return out;
        }

        Var next = ad::add(x, ad::scale(r, cfg.anderson_beta));
        if (cfg.method == fp::Method::Anderson) {
            hx.push_back(x);
            hr.push_back(r);
            while (hx.size() > window) {
                hx.pop_front();
                hr.pop_front();
            }
            std::size_t m = hx.size() - 1;
            if (m > 0) {
                std::int64_t dim = t.value(x).size();
                Eigen::MatrixXd dR(dim, static_cast<Eigen::Index>(m));
                for (std::size_t j = 0; j < m; ++j) {
                    const Tensor& r1 = t.value(hr[j + 1]);
                    const Tensor& r0 = t.value(hr[j]);
                    for (std::int64_t i = 0; i < dim; ++i)
                        dR(i, static_cast<Eigen::Index>(j)) = r1(i) - r0(i);
                }
                Eigen::Map<const Eigen::VectorXd> rv(t.value(r).data(), dim);
                Eigen::MatrixXd gram = dR.transpose() * dR;
                gram.diagonal().array() += 1e-4;
                Eigen::VectorXd gamma = gram.ldlt().solve(dR.transpose() * rv);
                for (std::size_t j = 0; j < m; ++j) {
                    Var term = ad::add(ad::sub(hx[j + 1], hx[j]),
                                       ad::scale(ad::sub(hr[j + 1], hr[j]), cfg.anderson_beta));
                    next = ad::sub(next, ad::scale(term, gamma(static_cast<Eigen::Index>(j))));
                }
            }
        }
        x = next;
    }
    out.converged = false;
    if (out.trajectory.empty()) {
        out.state = z0;
        out.trajectory.push_back(z0);
    } else {
        out.state = out.trajectory[static_cast<std::size_t>(best_index)];
        out.trajectory.resize(static_cast<std::size_t>(best_index) + 1);
        out.residuals.resize(static_cast<std::size_t>(best_index) + 1);
    }
    return out;
}

} // namespace

ForwardResult equilibrium_forward(const GraphPlan& plan, const ModelParams& params,
                                  const ModelConfig& mcfg, const EquilibriumConfig& ecfg, Rng& rng,
                                  bool record_trajectory) {
    check_cgp(plan, mcfg);
    ForwardResult out;
    out.noise = model::sample_noise(mcfg, plan.n, rng);
    Tape ft(false);
    VarParams vp = lift(ft, params, false);
    Encoded enc = encode(ft, plan, vp, mcfg);
    std::size_t mark = ft.size();
    auto f = [&](const Tensor& h) {
        ft.truncate(mark);
        Var y = processor_step(ft, ft.constant(h), enc, plan, vp, mcfg, out.noise);
        return ft.value(y);
    };
    fp::SolveConfig scfg = ecfg.solver;
    scfg.record_trajectory = record_trajectory;
    out.solve = fp::solve(f, Tensor::zeros({plan.n, mcfg.latent_dim}), scfg);
    out.h_star = out.solve.state;
    return out;
}

DecodeEval decode_eval(const GraphPlan& plan, const ModelParams& params, const ModelConfig& mcfg,
                       const Tensor& h) {
    Tape t(false);
    VarParams vp = lift(t, params, false);
    Encoded enc = encode(t, plan, vp, mcfg);
    auto decoded = decode(t, t.constant(h), enc, plan, vp, mcfg);
    DecodeEval out;
    out.loss = t.value(task_loss(t, decoded, plan))(0);
    out.accuracy = feature_accuracy(t, decoded, plan);
    return out;
}

EvalResult evaluate_instance(const GraphPlan& plan, const ModelParams& params,
                             const ModelConfig& mcfg, const EquilibriumConfig& ecfg, Rng& rng) {
    check_cgp(plan, mcfg);
    Tensor noise = model::sample_noise(mcfg, plan.n, rng);
    Tape ft(false);
    VarParams vp = lift(ft, params, false);
    Encoded enc = encode(ft, plan, vp, mcfg);
    std::size_t mark = ft.size();
    auto f = [&](const Tensor& h) {
        ft.truncate(mark);
        Var y = processor_step(ft, ft.constant(h), enc, plan, vp, mcfg, noise);
        return ft.value(y);
    };
    EvalResult out;
    fp::SolveResult solve = fp::solve(f, Tensor::zeros({plan.n, mcfg.latent_dim}), ecfg.solver);
    out.solver_steps = solve.steps;
    out.converged = solve.converged;
    out.stability_residual = fp::residual(solve.state, f(solve.state));

    ft.truncate(mark);
    auto decoded = decode(ft, ft.constant(solve.state), enc, plan, vp, mcfg);
    out.scores.loss = ft.value(task_loss(ft, decoded, plan))(0);
    out.scores.accuracy = feature_accuracy(ft, decoded, plan);
    return out;
}

void accumulate_grads(GradMap& grads, const Tape& tape, const VarParams& vars) {
    for (const auto& [name, var] : vars.vars) {
        if (!tape.has_grad(var)) continue;
        const Tensor& g = tape.grad(var);
        auto [it, inserted] = grads.try_emplace(name, Tensor::zeros(g.shape()));
        axpy(1.0, g, it->second);
    }
}

void scale_grads(GradMap& grads, double factor) {
    for (auto& [name, g] : grads)
        for (double& v : g.vec()) v *= factor;
}

TrainStepStats dear_train_step(const GraphPlan& plan, const ModelParams& params,
                               const ModelConfig& mcfg, const EquilibriumConfig& ecfg, Rng& rng,
                               GradMap& grads, const Teacher* teacher) {
    check_cgp(plan, mcfg);
    TrainStepStats st;
    const Tensor noise = model::sample_noise(mcfg, plan.n, rng);
    const Tensor zeros = Tensor::zeros({plan.n, mcfg.latent_dim});
    const bool align = ecfg.alignment_weight > 0.0;

    Tape t(true);
    VarParams vp = lift(t, params, true);
    Encoded enc = encode(t, plan, vp, mcfg);

    Tensor h_star;
    std::vector<Var> traj;
    if (align) {
        auto f = [&](Var h) { return processor_step(t, h, enc, plan, vp, mcfg, noise); };
        TapeSolve ts = solve_on_tape(t, f, t.constant(zeros), ecfg.solver);
        h_star = t.value(ts.state);
        traj = std::move(ts.trajectory);
        if (traj.empty() || traj.back().id != ts.state.id) traj.push_back(ts.state);
        st.solver_steps = ts.steps;
        st.converged = ts.converged;
    } else {
        Tape ft(false);
        VarParams vpf = lift(ft, params, false);
        Encoded encf = encode(ft, plan, vpf, mcfg);
        std::size_t mark = ft.size();
        auto f = [&](const Tensor& h) {
            ft.truncate(mark);
            Var y = processor_step(ft, ft.constant(h), encf, plan, vpf, mcfg, noise);
            return ft.value(y);
        };
        fp::SolveResult solve = fp::solve(f, zeros, ecfg.solver);
        h_star = solve.state;
        st.solver_steps = solve.steps;
        st.converged = solve.converged;
    }

    // Cut the tape here: the task loss reaches the solve only through the
    // implicit-function gradient seeded at this leaf.
    Var h_leaf = t.leaf(h_star, true);
    Var h_cur = h_leaf;
    int extra = sample_extra_steps(ecfg.extra_step_prob, rng);
    for (int i = 0; i < extra; ++i) h_cur = processor_step(t, h_cur, enc, plan, vp, mcfg, noise);
    auto decoded = decode(t, h_cur, enc, plan, vp, mcfg);
    Var loss = task_loss(t, decoded, plan);
    st.task_loss = t.value(loss)(0);
    st.accuracy = feature_accuracy(t, decoded, plan);

    Var total = loss;
    if (align) {
        if (!teacher) throw ContractViolation("alignment_weight > 0 requires a teacher");
        if (teacher->cfg.latent_dim != mcfg.latent_dim)
            throw ContractViolation("teacher latent_dim does not match the model");
        if (teacher->cfg.cgp != mcfg.cgp)
            throw ContractViolation("teacher cgp setting does not match the model");
        UnrolledResult tr = unrolled_forward(plan, teacher->params, teacher->cfg,
                                             std::max(plan.inst->steps, 1), rng);
        auto [align_var, ares] =
            alignment_loss_on_tape(t, traj, tr.trajectory, ecfg.subsample_alignment, &rng);
        st.align_loss = ares.value;
        total = ad::add(total, ad::scale(align_var, ecfg.alignment_weight));
    }
    if (ecfg.jacobian_weight > 0.0) {
        auto step = [&](Tape& tt, Var h) {
            return processor_step(tt, h, enc, plan, vp, mcfg, noise);
        };
        Var jp = jacobian_penalty(t, step, h_star, rng);
        st.jac_loss = t.value(jp)(0);
        total = ad::add(total, ad::scale(jp, ecfg.jacobian_weight));
    }

    t.backward(total);
    Tensor g = t.grad_or_zero(h_leaf);
    accumulate_grads(grads, t, vp);

    if (norm2(g) > 0.0) {
        // Adjoint solve u = g + J^T u on a dedicated tape; one forward
        // application, repeated seeded backward passes.
        Tape at(true);
        VarParams vpa = lift(at, params, false);
        Encoded enca = encode(at, plan, vpa, mcfg);
        Var za = at.leaf(h_star, true);
        Var ya = processor_step(at, za, enca, plan, vpa, mcfg, noise);
        auto adj = [&](const Tensor& u) {
            at.zero_grads();
            at.backward_seeded(ya, u);
            Tensor out = at.grad_or_zero(za);
            axpy(1.0, g, out);
            return out;
        };
        fp::SolveConfig acfg = ecfg.solver;
        acfg.tol = ecfg.backward_tol;
        acfg.max_iters = ecfg.backward_max_iters;
        acfg.record_trajectory = false;
        fp::SolveResult ares = fp::solve(adj, g, acfg);
        st.backward_converged = ares.converged;

        Tape pt(true);
        VarParams vpp = lift(pt, params, true);
        Encoded encp = encode(pt, plan, vpp, mcfg);
        Var yp = processor_step(pt, pt.constant(h_star), encp, plan, vpp, mcfg, noise);
        pt.backward_seeded(yp, ares.state);
        accumulate_grads(grads, pt, vpp);
    }
    return st;
}

UnrolledResult unrolled_forward(const GraphPlan& plan, const ModelParams& params,
                                const ModelConfig& mcfg, int steps, Rng& rng) {
    check_cgp(plan, mcfg);
    if (steps < 0) throw ContractViolation("unrolled_forward: negative step count");
    Tensor noise = model::sample_noise(mcfg, plan.n, rng);
    Tape ft(false);
    VarParams vp = lift(ft, params, false);
    Encoded enc = encode(ft, plan, vp, mcfg);
    std::size_t mark = ft.size();
    UnrolledResult out;
    out.h = Tensor::zeros({plan.n, mcfg.latent_dim});
    out.trajectory.push_back(out.h);
    for (int i = 0; i < steps; ++i) {
        ft.truncate(mark);
        Var y = processor_step(ft, ft.constant(out.h), enc, plan, vp, mcfg, noise);
        out.h = ft.value(y);
        if (!out.h.all_finite())
            throw fp::SolverFailure("unrolled_forward: state became non-finite", out.trajectory.back());
        out.trajectory.push_back(out.h);
    }
    return out;
}

TrainStepStats unrolled_train_step(const GraphPlan& plan, const ModelParams& params,
                                   const ModelConfig& mcfg, int steps, Rng& rng, GradMap& grads) {
    check_cgp(plan, mcfg);
    if (steps < 1) throw ContractViolation("unrolled_train_step: need at least one step");
    TrainStepStats st;
    Tensor noise = model::sample_noise(mcfg, plan.n, rng);
    Tape t(true);
    VarParams vp = lift(t, params, true);
    Encoded enc = encode(t, plan, vp, mcfg);
    Var h = t.constant(Tensor::zeros({plan.n, mcfg.latent_dim}));
    for (int i = 0; i < steps; ++i) h = processor_step(t, h, enc, plan, vp, mcfg, noise);
    auto decoded = decode(t, h, enc, plan, vp, mcfg);
    Var loss = task_loss(t, decoded, plan);
    st.task_loss = t.value(loss)(0);
    st.accuracy = feature_accuracy(t, decoded, plan);
    st.solver_steps = steps;
    t.backward(loss);
    accumulate_grads(grads, t, vp);
    return st;
}

} // namespace deqr::eq
