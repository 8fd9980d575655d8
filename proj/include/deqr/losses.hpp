#pragma once

#include <map>
#include <optional>
#include <utility>

#include "deqr/model.hpp"

namespace deqr::eq {

/// Sum over output features of the per-feature mean loss: cross-entropy for
/// the categorical-like dtypes, binary cross-entropy for masks, squared error
/// for scalars.
ad::Var task_loss(ad::Tape& tape, const std::vector<model::DecodedFeature>& decoded,
                  const model::GraphPlan& plan);

/// Per-feature evaluation scores on base nodes: exact-match means for
/// pointer-like and categorical dtypes, F1 for masks. Scalars are skipped.
std::map<std::string, double> feature_accuracy(const ad::Tape& tape,
                                               const std::vector<model::DecodedFeature>& decoded,
                                               const model::GraphPlan& plan);
double mean_accuracy(const std::map<std::string, double>& per_feature);

struct AlignmentResult {
    double value = 0.0;       // dp_part / N + last_term
    double dp_part = 0.0;     // best matching cost before normalization
    double last_term = 0.0;   // distance between final states, always added
    std::vector<int> rows;    // subsampled interior indices into the first trajectory
    std::vector<std::vector<double>> dp; // (N+1) x M table, M = teacher states - 1
    std::vector<std::pair<int, int>> matches; // (row index into `rows`, teacher column)
    bool repeats = false;     // which recursion was active
};

/// Monotone trajectory alignment between two solver trajectories that share a
/// start state. Interior states of the first trajectory align to teacher
/// states; repeats are allowed only when there are more rows than columns.
/// When `subsample` is set, max(floor((T-1)/2), 1) interior states are kept.
AlignmentResult alignment_loss(const std::vector<ad::Tensor>& traj,
                               const std::vector<ad::Tensor>& teacher, bool subsample, Rng* rng);

/// Differentiable version: the matching is computed from values and treated
/// as constant; the returned Var sums distances along the matched pairs plus
/// the final-state distance.
std::pair<ad::Var, AlignmentResult> alignment_loss_on_tape(ad::Tape& tape,
                                                           const std::vector<ad::Var>& traj,
                                                           const std::vector<ad::Tensor>& teacher,
                                                           bool subsample, Rng* rng);

/// Hutchinson probe of ||J v||^2 at h_star with a Rademacher vector and a
/// centered finite difference through one application of `step`.
ad::Var jacobian_penalty(ad::Tape& tape, const std::function<ad::Var(ad::Tape&, ad::Var)>& step,
                         const ad::Tensor& h_star, Rng& rng, double fd_eps = 1e-3);

} // namespace deqr::eq
