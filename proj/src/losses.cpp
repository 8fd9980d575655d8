#include "deqr/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace deqr::eq {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<std::int64_t> target_indices(const std::vector<double>& vals) {
    std::vector<std::int64_t> out;
    out.reserve(vals.size());
    for (double v : vals) out.push_back(static_cast<std::int64_t>(std::llround(v)));
    return out;
}

std::int64_t mask_one_index(const std::vector<double>& vals) {
    for (std::size_t i = 0; i < vals.size(); ++i)
        if (vals[i] == 1.0) return static_cast<std::int64_t>(i);
    throw ContractViolation("mask_one target has no 1");
}

/// One-hot over the ragged candidate rows: marks, per segment, the row whose
/// candidate equals the segment's target node.
Tensor ragged_one_hot(const model::DecodedFeature& f, const std::vector<std::int64_t>& targets) {
    Tensor hot = Tensor::zeros({static_cast<std::int64_t>(f.segments.size()), 1});
    std::vector<bool> found(targets.size(), false);
    for (std::size_t r = 0; r < f.segments.size(); ++r) {
        std::size_t seg = static_cast<std::size_t>(f.segments[r]);
        if (f.candidates[r] == targets[seg]) {
            hot(static_cast<std::int64_t>(r)) = 1.0;
            found[seg] = true;
        }
    }
    for (std::size_t s = 0; s < found.size(); ++s)
        if (!found[s])
            throw ContractViolation("pointer target for segment " + std::to_string(s) +
                                    " is not among the candidates");
    return hot;
}

Var negative_picked_mean(Tape& t, Var log_probs, const Tensor& one_hot, double denom) {
    Var picked = ad::sum(ad::mul(log_probs, t.constant(one_hot)));
    return ad::scale(picked, -1.0 / denom);
}

} // namespace

Var task_loss(Tape& t, const std::vector<model::DecodedFeature>& decoded,
              const model::GraphPlan& plan) {
    Var total{};
    bool have = false;
    auto push = [&](Var term) {
        total = have ? ad::add(total, term) : term;
        have = true;
    };

    for (const model::DecodedFeature& f : decoded) {
        const std::vector<double>& target = plan.inst->features.at(f.spec.name);
        const Tensor& scores = t.value(f.scores);
        using tasks::DType;
        switch (f.spec.dtype) {
            case DType::Scalar: {
                Tensor tv = Tensor::from_data(scores.shape(), target);
                Var diff = ad::sub(f.scores, t.constant(tv));
                push(ad::mean(ad::mul(diff, diff)));
                break;
            }
            case DType::Mask: {
                // log_softmax of [z, 0] rows yields [log sigma(z), log sigma(-z)].
                std::int64_t k = scores.rows();
                Var pair = ad::concat({f.scores, t.constant(Tensor::zeros({k, 1}))});
                Var ls = ad::log_softmax_rows(pair);
                Tensor hot = Tensor::zeros({k, 2});
                for (std::int64_t i = 0; i < k; ++i) {
                    hot(i, 0) = target[static_cast<std::size_t>(i)];
                    hot(i, 1) = 1.0 - target[static_cast<std::size_t>(i)];
                }
                push(negative_picked_mean(t, ls, hot, static_cast<double>(k)));
                break;
            }
            case DType::MaskOne: {
                Tensor hot = Tensor::zeros(scores.shape());
                hot(mask_one_index(target)) = 1.0;
                push(negative_picked_mean(t, f.scores, hot, 1.0));
                break;
            }
            case DType::Categorical: {
                std::int64_t r = scores.rows();
                Tensor hot = Tensor::zeros(scores.shape());
                for (std::int64_t i = 0; i < r; ++i)
                    hot(i, static_cast<std::int64_t>(std::llround(target[static_cast<std::size_t>(i)]))) = 1.0;
                push(negative_picked_mean(t, f.scores, hot, static_cast<double>(r)));
                break;
            }
            case DType::Pointer: {
                if (f.spec.location == tasks::Location::Graph) {
                    Tensor hot = Tensor::zeros(scores.shape());
                    hot(static_cast<std::int64_t>(std::llround(target.at(0)))) = 1.0;
                    push(negative_picked_mean(t, f.scores, hot, 1.0));
                } else {
                    Tensor hot = ragged_one_hot(f, target_indices(target));
                    push(negative_picked_mean(t, f.scores, hot,
                                              static_cast<double>(f.num_segments)));
                }
                break;
            }
            case DType::PermutationPointer: {
                std::int64_t n = scores.rows();
                Tensor hot = Tensor::zeros(scores.shape());
                for (std::int64_t v = 0; v < n; ++v)
                    hot(v, static_cast<std::int64_t>(std::llround(target[static_cast<std::size_t>(v)]))) = 1.0;
                push(negative_picked_mean(t, f.scores, hot, static_cast<double>(n)));
                break;
            }
        }
    }
    if (!have) throw ContractViolation("task_loss: no output features decoded");
    return total;
}

namespace {

double f1_score(std::int64_t tp, std::int64_t fp, std::int64_t fn) {
    if (2 * tp + fp + fn == 0) return 1.0;
    return 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
}

} // namespace

std::map<std::string, double> feature_accuracy(const Tape& t,
                                               const std::vector<model::DecodedFeature>& decoded,
                                               const model::GraphPlan& plan) {
    std::map<std::string, double> out;
    for (const model::DecodedFeature& f : decoded) {
        const std::vector<double>& target = plan.inst->features.at(f.spec.name);
        const Tensor& scores = t.value(f.scores);
        using tasks::DType;
        switch (f.spec.dtype) {
            case DType::Scalar:
                break; // not part of the exact-match metrics
            case DType::Mask: {
                std::int64_t tp = 0, fp = 0, fn = 0;
                for (std::int64_t i = 0; i < scores.rows(); ++i) {
                    bool pred = scores(i, 0) > 0.0;
                    bool truth = target[static_cast<std::size_t>(i)] == 1.0;
                    if (pred && truth) ++tp;
                    else if (pred) ++fp;
                    else if (truth) ++fn;
                }
                out[f.spec.name] = f1_score(tp, fp, fn);
                break;
            }
            case DType::MaskOne: {
                std::int64_t best = 0;
                for (std::int64_t i = 1; i < scores.rows(); ++i)
                    if (scores(i, 0) > scores(best, 0)) best = i;
                out[f.spec.name] = best == mask_one_index(target) ? 1.0 : 0.0;
                break;
            }
            case DType::Categorical: {
                double hits = 0.0;
                for (std::int64_t i = 0; i < scores.rows(); ++i) {
                    std::int64_t best = 0;
                    for (std::int64_t j = 1; j < scores.cols(); ++j)
                        if (scores(i, j) > scores(i, best)) best = j;
                    if (best == static_cast<std::int64_t>(std::llround(target[static_cast<std::size_t>(i)])))
                        hits += 1.0;
                }
                out[f.spec.name] = hits / static_cast<double>(scores.rows());
                break;
            }
            case DType::Pointer: {
                if (f.spec.location == tasks::Location::Graph) {
                    std::int64_t best = 0;
                    for (std::int64_t i = 1; i < scores.rows(); ++i)
                        if (scores(i, 0) > scores(best, 0)) best = i;
                    out[f.spec.name] =
                        best == static_cast<std::int64_t>(std::llround(target.at(0))) ? 1.0 : 0.0;
                } else {
                    std::vector<std::int64_t> best_row(static_cast<std::size_t>(f.num_segments), -1);
                    for (std::size_t r = 0; r < f.segments.size(); ++r) {
                        std::size_t s = static_cast<std::size_t>(f.segments[r]);
                        if (best_row[s] < 0 ||
                            scores(static_cast<std::int64_t>(r), 0) > scores(best_row[s], 0))
                            best_row[s] = static_cast<std::int64_t>(r);
                    }
                    double hits = 0.0;
                    for (std::size_t s = 0; s < best_row.size(); ++s) {
                        if (best_row[s] < 0) continue;
                        std::int64_t pred = f.candidates[static_cast<std::size_t>(best_row[s])];
                        if (pred == static_cast<std::int64_t>(std::llround(target[s]))) hits += 1.0;
                    }
                    out[f.spec.name] = hits / static_cast<double>(f.num_segments);
                }
                break;
            }
            case DType::PermutationPointer: {
                std::int64_t n = scores.rows();
                double hits = 0.0;
                for (std::int64_t v = 0; v < n; ++v) {
                    std::int64_t best = 0;
                    for (std::int64_t u = 1; u < n; ++u)
                        if (scores(v, u) > scores(v, best)) best = u;
                    if (best == static_cast<std::int64_t>(std::llround(target[static_cast<std::size_t>(v)])))
                        hits += 1.0;
                }
                out[f.spec.name] = hits / static_cast<double>(n);
                break;
            }
        }
    }
    return out;
}

double mean_accuracy(const std::map<std::string, double>& per_feature) {
    if (per_feature.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [k, v] : per_feature) s += v;
    return s / static_cast<double>(per_feature.size());
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<int> pick_rows(int interior, bool subsample, Rng* rng) {
    std::vector<int> rows(static_cast<std::size_t>(interior));
    std::iota(rows.begin(), rows.end(), 1);
    if (!subsample || interior <= 1) return rows;
    int keep = std::max(interior / 2, 1);
    if (!rng) throw ContractViolation("alignment subsampling needs an rng");
    std::shuffle(rows.begin(), rows.end(), *rng);
    rows.resize(static_cast<std::size_t>(keep));
    std::sort(rows.begin(), rows.end());
    return rows;
}

template <typename DistFn>
AlignmentResult align_core(int traj_len, int teacher_len, bool subsample, Rng* rng, DistFn dist) {
    if (traj_len < 1 || teacher_len < 1)
        throw ContractViolation("alignment needs trajectories with at least two states");
    AlignmentResult res;
    res.last_term = dist(traj_len, teacher_len);
    res.rows = pick_rows(traj_len - 1, subsample, rng);

    const int N = static_cast<int>(res.rows.size());
    const int M = teacher_len; // columns 0..M-1 are teacher states G_0..G_{M-1}
    if (N == 0 || M <= 1) {
        res.value = res.last_term;
        return res;
    }
    res.repeats = N > M - 1;
    res.dp.assign(static_cast<std::size_t>(N + 1), std::vector<double>(static_cast<std::size_t>(M), 0.0));
    for (int i = 1; i <= N; ++i) res.dp[static_cast<std::size_t>(i)][0] = kInf;
    for (int i = 1; i <= N; ++i)
        for (int j = 1; j < M; ++j) {
            double d = dist(res.rows[static_cast<std::size_t>(i - 1)], j);
            double take = res.repeats ? res.dp[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j)]
                                      : res.dp[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
            double stay = res.dp[static_cast<std::size_t>(i)][static_cast<std::size_t>(j - 1)];
            res.dp[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] =
                std::min(take == kInf ? kInf : take + d, stay);
        }

    res.dp_part = res.dp[static_cast<std::size_t>(N)][static_cast<std::size_t>(M - 1)];
    // Backtrack, preferring the match branch on ties so the path is unique.
    int i = N, j = M - 1;
    while (i > 0 && j > 0) {
        double d = dist(res.rows[static_cast<std::size_t>(i - 1)], j);
        double take = res.repeats ? res.dp[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j)]
                                  : res.dp[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
        double cur = res.dp[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (take != kInf && std::abs(take + d - cur) <= 1e-12 * std::max(1.0, std::abs(cur))) {
            res.matches.push_back({i - 1, j});
            --i;
            if (!res.repeats) --j;
        } else {
            --j;
        }
    }
    std::reverse(res.matches.begin(), res.matches.end());
    res.value = res.dp_part / static_cast<double>(N) + res.last_term;
    return res;
}

} // namespace

AlignmentResult alignment_loss(const std::vector<Tensor>& traj, const std::vector<Tensor>& teacher,
                               bool subsample, Rng* rng) {
    if (traj.size() < 2 || teacher.size() < 2)
        throw ContractViolation("alignment needs trajectories with at least two states");
    auto dist = [&](int i, int j) {
        Tensor d = traj[static_cast<std::size_t>(i)];
        axpy(-1.0, teacher[static_cast<std::size_t>(j)], d);
        return norm2(d);
    };
    return align_core(static_cast<int>(traj.size()) - 1, static_cast<int>(teacher.size()) - 1,
                      subsample, rng, dist);
}

std::pair<Var, AlignmentResult> alignment_loss_on_tape(Tape& t, const std::vector<Var>& traj,
                                                       const std::vector<Tensor>& teacher,
                                                       bool subsample, Rng* rng) {
    if (traj.size() < 2 || teacher.size() < 2)
        throw ContractViolation("alignment needs trajectories with at least two states");
    auto dist = [&](int i, int j) {
        Tensor d = t.value(traj[static_cast<std::size_t>(i)]);
        axpy(-1.0, teacher[static_cast<std::size_t>(j)], d);
        return norm2(d);
    };
    AlignmentResult res = align_core(static_cast<int>(traj.size()) - 1,
                                     static_cast<int>(teacher.size()) - 1, subsample, rng, dist);

    auto dist_var = [&](int i, int j) {
        return ad::l2_norm(ad::sub(traj[static_cast<std::size_t>(i)],
                                   t.constant(teacher[static_cast<std::size_t>(j)])));
    };
    Var loss = dist_var(static_cast<int>(traj.size()) - 1, static_cast<int>(teacher.size()) - 1);
    if (!res.rows.empty() && !res.matches.empty()) {
        Var dp_sum{};
        bool have = false;
        for (const auto& [ri, j] : res.matches) {
            Var d = dist_var(res.rows[static_cast<std::size_t>(ri)], j);
            dp_sum = have ? ad::add(dp_sum, d) : d;
            have = true;
        }
        loss = ad::add(loss, ad::scale(dp_sum, 1.0 / static_cast<double>(res.rows.size())));
    }
    return {loss, res};
}

Var jacobian_penalty(Tape& t, const std::function<Var(Tape&, Var)>& step, const Tensor& h_star,
                     Rng& rng, double fd_eps) {
    Tensor v = h_star;
    std::uniform_int_distribution<int> coin(0, 1);
    for (double& x : v.vec()) x = coin(rng) == 0 ? -1.0 : 1.0;
    Tensor hp = h_star, hm = h_star;
    axpy(fd_eps, v, hp);
    axpy(-fd_eps, v, hm);
    Var y1 = step(t, t.constant(hp));
    Var y2 = step(t, t.constant(hm));
    Var jv = ad::scale(ad::sub(y1, y2), 1.0 / (2.0 * fd_eps));
    return ad::sum(ad::mul(jv, jv));
}

} // namespace deqr::eq
