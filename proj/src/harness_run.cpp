#include "deqr/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "deqr/cayley.hpp"

namespace deqr::harness {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

int unroll_steps_for(const RunConfig& cfg, const tasks::GraphInstance& inst) {
    return cfg.unrolled_eval_steps > 0 ? cfg.unrolled_eval_steps : std::max(1, inst.steps);
}

eq::Teacher load_teacher(const RunConfig& cfg) {
    Checkpoint ckpt = load_checkpoint(cfg.teacher_checkpoint);
    if (ckpt.config.algorithm != cfg.algorithm)
        throw ContractViolation("teacher checkpoint is for algorithm " + ckpt.config.algorithm +
                                ", run is for " + cfg.algorithm);
    return {std::move(ckpt.params), ckpt.config.model};
}

} // namespace

LoadedData load_data(const std::filesystem::path& path, const RunConfig& cfg) {
    LoadedData data;
    data.dataset = tasks::read_dataset(path);
    if (data.dataset.algorithm != cfg.algorithm)
        throw ContractViolation("dataset " + path.string() + " holds algorithm " +
                                data.dataset.algorithm + ", config expects " + cfg.algorithm);
    if (cfg.model.cgp)
        for (auto& inst : data.dataset.instances) cayley::attach_cgp(inst);
    data.plans.reserve(data.dataset.instances.size());
    for (const auto& inst : data.dataset.instances) data.plans.push_back(model::build_plan(inst));
    return data;
}

EvalSummary evaluate_run(const RunConfig& cfg, const model::ModelParams& params, LoadedData& data,
                         Rng& rng) {
    EvalSummary sum;
    std::map<std::string, double> feature_totals;
    double acc_total = 0.0, steps_total = 0.0;
    const auto start = Clock::now();
    for (const auto& plan : data.plans) {
        eq::DecodeEval scores;
        int steps = 0;
        if (cfg.model_kind == ModelKind::Dear) {
            eq::EvalResult r = eq::evaluate_instance(plan, params, cfg.model, cfg.eq, rng);
            scores = std::move(r.scores);
            steps = r.solver_steps;
            if (r.converged) {
                ++sum.converged_count;
                if (!(r.stability_residual < cfg.eq.solver.tol)) sum.stability_ok = false;
            }
        } else {
            eq::UnrolledResult r = eq::unrolled_forward(plan, params, cfg.model,
                                                        unroll_steps_for(cfg, *plan.inst), rng);
            scores = eq::decode_eval(plan, params, cfg.model, r.h);
            steps = static_cast<int>(r.trajectory.size()) - 1;
            ++sum.converged_count;
        }
        sum.task_loss += scores.loss;
        acc_total += eq::mean_accuracy(scores.accuracy);
        for (const auto& [name, a] : scores.accuracy) feature_totals[name] += a;
        steps_total += steps;
        sum.solver_steps_max = std::max(sum.solver_steps_max, steps);
        ++sum.count;
    }
    const double elapsed = seconds_since(start);
    if (sum.count > 0) {
        sum.task_loss /= sum.count;
        sum.accuracy = acc_total / sum.count;
        sum.solver_steps_mean = steps_total / sum.count;
        sum.seconds_per_sample = cfg.deterministic ? 0.0 : elapsed / sum.count;
        for (auto& [name, total] : feature_totals) sum.per_feature[name] = total / sum.count;
    }
    return sum;
}

TrainResult train_run(const RunConfig& cfg, const std::function<void(const MetricsRow&)>& on_row) {
    if (cfg.train_path.empty() || cfg.valid_path.empty())
        throw ContractViolation("training requires data.train and data.valid paths");
    if (cfg.out_dir.empty()) throw ContractViolation("training requires out_dir");
    std::filesystem::create_directories(cfg.out_dir);

    LoadedData train = load_data(cfg.train_path, cfg);
    LoadedData valid = load_data(cfg.valid_path, cfg);
    if (train.dataset.instances.empty()) throw ContractViolation("training split is empty");

    Rng init_rng(mix_seed(cfg.seed, 0));
    model::ModelParams params = model::init_params(cfg.model, init_rng);
    Adam adam;
    adam.lr = cfg.learning_rate;

    std::optional<eq::Teacher> teacher;
    if (cfg.model_kind == ModelKind::Dear && cfg.eq.alignment_weight > 0.0)
        teacher = load_teacher(cfg);

    Rng train_rng(mix_seed(cfg.seed, 1));
    TrainResult result;
    double best_loss = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(train.dataset.instances.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs && !result.aborted; ++epoch) {
        std::shuffle(order.begin(), order.end(), train_rng);
        MetricsRow row;
        row.epoch = epoch;
        row.split = "train";
        double acc_total = 0.0, steps_total = 0.0;
        int seen = 0;
        const auto start = Clock::now();

        for (std::size_t pos = 0; pos < order.size() && !result.aborted;) {
            const std::size_t stop = std::min(order.size(), pos + static_cast<std::size_t>(cfg.batch_size));
            eq::GradMap grads;
            int in_batch = 0;
            for (; pos < stop; ++pos) {
                const auto& plan = train.plans[order[pos]];
                eq::TrainStepStats stats;
                try {
                    if (cfg.model_kind == ModelKind::Dear)
                        stats = eq::dear_train_step(plan, params, cfg.model, cfg.eq, train_rng, grads,
                                                    teacher ? &*teacher : nullptr);
                    else
                        stats = eq::unrolled_train_step(plan, params, cfg.model,
                                                        std::max(1, plan.inst->steps), train_rng, grads);
                } catch (const fp::SolverFailure&) {
                    result.aborted = true;
                    break;
                }
                if (!std::isfinite(stats.task_loss)) {
                    result.aborted = true;
                    break;
                }
                row.task_loss += stats.task_loss;
                row.align_loss += stats.align_loss;
                row.jac_loss += stats.jac_loss;
                acc_total += eq::mean_accuracy(stats.accuracy);
                steps_total += stats.solver_steps;
                row.solver_steps_max = std::max(row.solver_steps_max, stats.solver_steps);
                ++seen;
                ++in_batch;
            }
            if (in_batch > 0) {
                eq::scale_grads(grads, 1.0 / in_batch);
                adam.update(params, grads);
            }
        }
        if (seen == 0) break;

        const double elapsed = seconds_since(start);
        row.task_loss /= seen;
        row.align_loss /= seen;
        row.jac_loss /= seen;
        row.accuracy = acc_total / seen;
        row.solver_steps_mean = steps_total / seen;
        row.seconds_per_sample = cfg.deterministic ? 0.0 : elapsed / seen;
        result.rows.push_back(row);
        if (on_row) on_row(row);

        Rng eval_rng(mix_seed(cfg.seed, 1000003 + static_cast<std::uint64_t>(epoch)));
        EvalSummary vs = evaluate_run(cfg, params, valid, eval_rng);
        MetricsRow vrow;
        vrow.epoch = epoch;
        vrow.split = "valid";
        vrow.task_loss = vs.task_loss;
        vrow.accuracy = vs.accuracy;
        vrow.solver_steps_mean = vs.solver_steps_mean;
        vrow.solver_steps_max = vs.solver_steps_max;
        vrow.seconds_per_sample = vs.seconds_per_sample;
        result.rows.push_back(vrow);
        if (on_row) on_row(vrow);

        if (vs.task_loss < best_loss) {
            best_loss = vs.task_loss;
            result.best = Checkpoint{epoch, vs.task_loss, adam.step, cfg, params, adam.m, adam.v};
            result.best_epoch = epoch;
        }
    }

    if (result.best_epoch == 0) // no epoch finished; keep the initial weights
        result.best = Checkpoint{0, std::numeric_limits<double>::infinity(), 0, cfg, params, {}, {}};

    const auto dir = std::filesystem::path(cfg.out_dir);
    write_metrics_csv(result.rows, dir / "metrics.csv");
    save_checkpoint(result.best, dir / "best.ckpt");
    save_checkpoint(Checkpoint{cfg.epochs, best_loss, adam.step, cfg, params, adam.m, adam.v},
                    dir / "last.ckpt");
    return result;
}

std::vector<TimingRow> timing_run(const RunConfig& cfg, const model::ModelParams& params,
                                  LoadedData& data, Rng& rng) {
    std::vector<TimingRow> rows;
    const int count = static_cast<int>(data.plans.size());
    if (count == 0) throw ContractViolation("timing requires a non-empty dataset");

    TimingRow dear{"dear", 0.0, 0.0, 0};
    auto start = Clock::now();
    for (const auto& plan : data.plans) {
        eq::ForwardResult r = eq::equilibrium_forward(plan, params, cfg.model, cfg.eq, rng);
        eq::decode_eval(plan, params, cfg.model, r.h_star);
        dear.steps_mean += r.solve.steps;
        dear.steps_max = std::max(dear.steps_max, r.solve.steps);
    }
    dear.seconds_per_sample = cfg.deterministic ? 0.0 : seconds_since(start) / count;
    dear.steps_mean /= count;
    rows.push_back(dear);

    TimingRow nar{"nar_unrolled", 0.0, 0.0, 0};
    start = Clock::now();
    for (const auto& plan : data.plans) {
        const int steps = unroll_steps_for(cfg, *plan.inst);
        eq::UnrolledResult r = eq::unrolled_forward(plan, params, cfg.model, steps, rng);
        eq::decode_eval(plan, params, cfg.model, r.h);
        nar.steps_mean += steps;
        nar.steps_max = std::max(nar.steps_max, steps);
    }
    nar.seconds_per_sample = cfg.deterministic ? 0.0 : seconds_since(start) / count;
    nar.steps_mean /= count;
    rows.push_back(nar);
    return rows;
}

} // namespace deqr::harness
