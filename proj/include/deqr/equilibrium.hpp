#pragma once

#include "deqr/fixpoint.hpp"
#include "deqr/losses.hpp"
#include "deqr/model.hpp"

namespace deqr::eq {

struct EquilibriumConfig {
    fp::SolveConfig solver;         // forward solve; tol is the forward threshold
    double backward_tol = 0.01;     // adjoint solve threshold (forward tol / 10)
    int backward_max_iters = 64;
    double extra_step_prob = 0.5;   // geometric continue probability; 0 disables
    double alignment_weight = 0.0;
    bool subsample_alignment = true;
    double jacobian_weight = 0.0;
};

/// Number of extra post-equilibrium steps: heads before the first tail of a
/// biased coin, so P(s) = prob^s * (1 - prob).
int sample_extra_steps(double prob, Rng& rng);

struct ForwardResult {
    ad::Tensor h_star;
    fp::SolveResult solve;
    ad::Tensor noise; // normalization noise used for this forward pass
};

/// Inference-mode equilibrium solve: encode once, iterate the processor
/// off-tape.
ForwardResult equilibrium_forward(const model::GraphPlan& plan, const model::ModelParams& params,
                                  const model::ModelConfig& mcfg, const EquilibriumConfig& ecfg,
                                  Rng& rng, bool record_trajectory = false);

struct DecodeEval {
    double loss = 0.0;
    std::map<std::string, double> accuracy;
};

/// Decode + task loss + accuracy at a fixed state, off-tape.
DecodeEval decode_eval(const model::GraphPlan& plan, const model::ModelParams& params,
                       const model::ModelConfig& mcfg, const ad::Tensor& h);

struct EvalResult {
    DecodeEval scores;
    int solver_steps = 0;
    bool converged = false;
    // residual(H*, P(H*)) via one extra processor application; on converged
    // instances this must sit below the forward tolerance.
    double stability_residual = 0.0;
};

EvalResult evaluate_instance(const model::GraphPlan& plan, const model::ModelParams& params,
                             const model::ModelConfig& mcfg, const EquilibriumConfig& ecfg, Rng& rng);

using GradMap = std::map<std::string, ad::Tensor>;
void accumulate_grads(GradMap& grads, const ad::Tape& tape, const model::VarParams& vars);
void scale_grads(GradMap& grads, double factor);

struct Teacher {
    model::ModelParams params;
    model::ModelConfig cfg;
};

struct TrainStepStats {
    double task_loss = 0.0;
    double align_loss = 0.0;
    double jac_loss = 0.0;
    int solver_steps = 0;
    bool converged = true;
    bool backward_converged = true;
    std::map<std::string, double> accuracy;
};

/// One DEAR training example: equilibrium solve, stochastic extra steps on
/// tape, decode/loss, then implicit-function gradients through an adjoint
/// fixed-point solve. Alignment (when weighted) unrolls the forward solve on
/// tape with detached mixing coefficients and matches against the teacher's
/// unrolled trajectory.
TrainStepStats dear_train_step(const model::GraphPlan& plan, const model::ModelParams& params,
                               const model::ModelConfig& mcfg, const EquilibriumConfig& ecfg,
                               Rng& rng, GradMap& grads, const Teacher* teacher);

struct UnrolledResult {
    ad::Tensor h;
    std::vector<ad::Tensor> trajectory; // H^0 .. H^steps
};

/// Plain NAR execution: `steps` processor applications from zero, off-tape.
UnrolledResult unrolled_forward(const model::GraphPlan& plan, const model::ModelParams& params,
                                const model::ModelConfig& mcfg, int steps, Rng& rng);

/// NAR baseline training example: backprop through the unrolled computation.
TrainStepStats unrolled_train_step(const model::GraphPlan& plan, const model::ModelParams& params,
                                   const model::ModelConfig& mcfg, int steps, Rng& rng, GradMap& grads);

} // namespace deqr::eq
