#include <cstdio>
#include <deque>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "deqr/cayley.hpp"
#include "deqr/harness.hpp"

namespace {

using namespace deqr;
using nlohmann::json;

struct GenArgs {
    std::string algorithm, split = "train", out, profile;
    int count = 1000, size_lo = 4, size_hi = 8;
    std::uint64_t seed = 1;
};

std::filesystem::path dataset_path(const std::string& out, const std::string& name) {
    std::filesystem::path p(out);
    if (std::filesystem::is_directory(p) || out.back() == '/') {
        std::filesystem::create_directories(p);
        return p / (name + ".jsonl");
    }
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    return p;
}

int run_gen(const GenArgs& a) {
    if (!a.profile.empty()) {
        const harness::Profile p = harness::get_profile(a.profile);
        std::filesystem::path dir(a.out);
        std::filesystem::create_directories(dir);
        struct SplitPlan {
            const char* name;
            int count, lo, hi;
        };
        const SplitPlan plans[] = {{"train", p.train_count, p.train_lo, p.train_hi},
                                   {"valid", p.valid_count, p.valid_size, p.valid_size},
                                   {"test", p.test_count, p.test_size, p.test_size}};
        for (const auto& s : plans) {
            tasks::Dataset ds = tasks::make_dataset(a.algorithm, s.count, s.lo, s.hi, a.seed, s.name);
            const auto path = dir / (std::string(s.name) + ".jsonl");
            tasks::write_dataset(ds, path);
            std::cout << "wrote " << path.string() << " (" << ds.instances.size() << " instances, sizes "
                      << s.lo << ".." << s.hi << ")\n";
        }
        return 0;
    }
    tasks::Dataset ds = tasks::make_dataset(a.algorithm, a.count, a.size_lo, a.size_hi, a.seed, a.split);
    const auto path = dataset_path(a.out, a.algorithm + "_" + a.split);
    tasks::write_dataset(ds, path);
    std::cout << "wrote " << path.string() << " (" << ds.instances.size() << " instances)\n";
    return 0;
}

json summary_json(const harness::EvalSummary& s) {
    json per = json::object();
    for (const auto& [name, a] : s.per_feature) per[name] = a;
    return json{{"task_loss", s.task_loss},
                {"accuracy", s.accuracy},
                {"per_feature", per},
                {"solver_steps_mean", s.solver_steps_mean},
                {"solver_steps_max", s.solver_steps_max},
                {"seconds_per_sample", s.seconds_per_sample},
                {"count", s.count},
                {"converged_count", s.converged_count},
                {"stability_ok", s.stability_ok}};
}

int run_train(const std::string& config_path, const std::string& out_override,
              std::optional<std::uint64_t> seed_override, bool deterministic) {
    harness::RunConfig cfg = harness::load_config(config_path);
    if (!out_override.empty()) cfg.out_dir = out_override;
    if (seed_override) cfg.seed = *seed_override;
    if (deterministic) cfg.deterministic = true;
    std::cout << harness::metrics_csv_header() << '\n';
    harness::TrainResult res = harness::train_run(cfg, [](const harness::MetricsRow& row) {
        std::cout << harness::to_csv(row) << '\n' << std::flush;
    });
    if (res.aborted) std::cout << "aborted: loss went non-finite; kept last good checkpoint\n";
    std::cout << "best_epoch " << res.best_epoch << " valid_task_loss " << res.best.valid_loss << '\n';
    std::cout << "outputs " << cfg.out_dir << "/metrics.csv best.ckpt last.ckpt\n";
    return 0;
}

int run_eval(const std::string& ckpt_path, const std::string& data_path, const std::string& out,
             bool deterministic, int unrolled_steps, const std::string& dump_traj, int traj_index) {
    harness::Checkpoint ckpt = harness::load_checkpoint(ckpt_path);
    harness::RunConfig cfg = ckpt.config;
    cfg.deterministic = deterministic;
    if (unrolled_steps > 0) cfg.unrolled_eval_steps = unrolled_steps;
    harness::LoadedData data = harness::load_data(data_path, cfg);
    Rng rng(mix_seed(cfg.seed, 77));
    harness::EvalSummary sum = harness::evaluate_run(cfg, ckpt.params, data, rng);
    const std::string text = summary_json(sum).dump(2);
    std::cout << text << '\n';
    if (!out.empty()) {
        std::ofstream f(out, std::ios::binary);
        if (!f) throw ContractViolation("cannot open output file: " + out);
        f << text << '\n';
    }
    if (!dump_traj.empty()) {
        if (traj_index < 0 || traj_index >= static_cast<int>(data.plans.size()))
            throw ContractViolation("--index out of range for this dataset");
        Rng traj_rng(mix_seed(cfg.seed, 78));
        const auto& plan = data.plans[static_cast<std::size_t>(traj_index)];
        std::vector<ad::Tensor> states;
        if (cfg.model_kind == harness::ModelKind::Dear) {
            eq::ForwardResult r =
                eq::equilibrium_forward(plan, ckpt.params, cfg.model, cfg.eq, traj_rng, true);
            states = std::move(r.solve.trajectory);
        } else {
            eq::UnrolledResult r = eq::unrolled_forward(
                plan, ckpt.params, cfg.model,
                cfg.unrolled_eval_steps > 0 ? cfg.unrolled_eval_steps : std::max(1, plan.inst->steps),
                traj_rng);
            states = std::move(r.trajectory);
        }
        harness::write_trajectory(states, dump_traj);
        std::cout << "wrote trajectory (" << states.size() << " states) to " << dump_traj << '\n';
    }
    return 0;
}

int run_time(const std::string& ckpt_path, const std::string& data_path, bool deterministic,
             int unrolled_steps) {
    harness::Checkpoint ckpt = harness::load_checkpoint(ckpt_path);
    harness::RunConfig cfg = ckpt.config;
    cfg.deterministic = deterministic;
    if (unrolled_steps > 0) cfg.unrolled_eval_steps = unrolled_steps;
    harness::LoadedData data = harness::load_data(data_path, cfg);
    Rng rng(mix_seed(cfg.seed, 79));
    std::cout << "model_kind,seconds_per_sample,steps_mean,steps_max\n";
    for (const auto& row : harness::timing_run(cfg, ckpt.params, data, rng)) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%d", row.model_kind.c_str(),
                      row.seconds_per_sample, row.steps_mean, row.steps_max);
        std::cout << buf << '\n';
    }
    return 0;
}

int run_cayley(int n) {
    const cayley::CayleyGraph g = cayley::cayley_graph(n);
    std::cout << "n " << g.n << '\n' << "order " << g.order() << '\n';

    std::vector<int> degree(g.vertices.size(), 0);
    for (const auto& e : g.edges) degree[static_cast<std::size_t>(e[0])]++;
    std::map<int, int> hist;
    for (int d : degree) hist[d]++;
    for (const auto& [d, c] : hist) std::cout << "degree " << d << " count " << c << '\n';

    std::vector<std::vector<int>> adj(g.vertices.size());
    for (const auto& e : g.edges) adj[static_cast<std::size_t>(e[0])].push_back(e[1]);
    std::vector<int> dist(g.vertices.size(), -1);
    std::deque<int> queue{0};
    dist[0] = 0;
    int ecc = 0, reached = 1;
    while (!queue.empty()) {
        const int u = queue.front();
        queue.pop_front();
        for (int v : adj[static_cast<std::size_t>(u)])
            if (dist[static_cast<std::size_t>(v)] < 0) {
                dist[static_cast<std::size_t>(v)] = dist[static_cast<std::size_t>(u)] + 1;
                ecc = std::max(ecc, dist[static_cast<std::size_t>(v)]);
                ++reached;
                queue.push_back(v);
            }
    }
    std::cout << "connected " << (reached == g.order() ? "yes" : "no") << '\n';
    // vertex-transitive, so one eccentricity is the diameter
    std::cout << "diameter " << ecc << '\n';
    return 0;
}

int run_align_debug(const std::string& a_path, const std::string& b_path, bool subsample,
                    std::uint64_t seed) {
    const std::vector<ad::Tensor> a = harness::read_trajectory(a_path);
    const std::vector<ad::Tensor> b = harness::read_trajectory(b_path);
    Rng rng(mix_seed(seed, 80));
    const eq::AlignmentResult r = eq::alignment_loss(a, b, subsample, &rng);

    std::cout << "first trajectory: " << a.size() << " states, interior rows kept:";
    for (int idx : r.rows) std::cout << ' ' << idx;
    std::cout << '\n';
    std::cout << "second trajectory: " << b.size() << " states\n";
    std::cout << "repeats " << (r.repeats ? "allowed" : "forbidden") << '\n';
    std::cout << "dp table (rows = matched prefix of kept states, cols = teacher states):\n";
    for (const auto& dprow : r.dp) {
        for (std::size_t j = 0; j < dprow.size(); ++j) {
            char buf[40];
            std::snprintf(buf, sizeof(buf), "%12.6g", dprow[j]);
            std::cout << buf << (j + 1 < dprow.size() ? " " : "");
        }
        std::cout << '\n';
    }
    for (const auto& [i, j] : r.matches)
        std::cout << "match state " << r.rows[static_cast<std::size_t>(i)] << " -> teacher " << j << '\n';
    std::cout << "dp_part " << r.dp_part << '\n';
    std::cout << "last_term " << r.last_term << '\n';
    std::cout << "value " << r.value << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep-equilibrium algorithmic reasoning toolkit"};
    app.require_subcommand(1);

    GenArgs gen;
    auto* gen_cmd = app.add_subcommand("gen", "Generate a dataset (JSON lines)");
    gen_cmd->add_option("--algorithm", gen.algorithm, "One of the nine task names")->required();
    gen_cmd->add_option("--count", gen.count, "Instances to generate");
    gen_cmd->add_option("--size-lo", gen.size_lo, "Smallest instance size");
    gen_cmd->add_option("--size-hi", gen.size_hi, "Largest instance size");
    gen_cmd->add_option("--seed", gen.seed, "Generation seed");
    gen_cmd->add_option("--split", gen.split, "Split label stored in the header");
    gen_cmd->add_option("--out", gen.out, "Output file (or directory)")->required();
    gen_cmd->add_option("--profile", gen.profile, "Emit train/valid/test for a named profile");

    std::string train_config, train_out;
    std::uint64_t seed_val = 0;
    bool train_det = false, have_seed = false;
    auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
    train_cmd->add_option("--config", train_config, "Run configuration path")->required();
    train_cmd->add_option("--out", train_out, "Override the config's out_dir");
    train_cmd->add_option("--seed", seed_val, "Override the config's seed")
        ->each([&](const std::string&) { have_seed = true; });
    train_cmd->add_flag("--deterministic", train_det, "Zero the timing column in metrics");

    std::string eval_ckpt, eval_data, eval_out, eval_dump;
    bool eval_det = false;
    int eval_unroll = 0, eval_index = 0;
    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint path")->required();
    eval_cmd->add_option("--data", eval_data, "Dataset path")->required();
    eval_cmd->add_option("--out", eval_out, "Also write the JSON summary here");
    eval_cmd->add_flag("--deterministic", eval_det, "Zero the timing field");
    eval_cmd->add_option("--unrolled-steps", eval_unroll, "Fixed step count for the unrolled baseline");
    eval_cmd->add_option("--dump-trajectory", eval_dump, "Write one instance's solver trajectory here");
    eval_cmd->add_option("--index", eval_index, "Instance index for --dump-trajectory");

    std::string time_ckpt, time_data;
    bool time_det = false;
    int time_unroll = 0;
    auto* time_cmd = app.add_subcommand("time", "Compare inference timing against the unrolled baseline");
    time_cmd->add_option("--checkpoint", time_ckpt, "Checkpoint path")->required();
    time_cmd->add_option("--data", time_data, "Dataset path")->required();
    time_cmd->add_flag("--deterministic", time_det, "Zero the timing fields");
    time_cmd->add_option("--unrolled-steps", time_unroll, "Fixed step count for the unrolled baseline");

    int cayley_n = 3;
    auto* cayley_cmd = app.add_subcommand("cayley", "Inspect the SL(2, Z_n) Cayley graph");
    cayley_cmd->add_option("--n", cayley_n, "Modulus (n >= 2)")->required();

    std::string align_a, align_b;
    bool align_sub = false;
    std::uint64_t align_seed = 1;
    auto* align_cmd = app.add_subcommand("align-debug", "Print the alignment DP for two trajectories");
    align_cmd->add_option("--first", align_a, "Trajectory aligned against the teacher")->required();
    align_cmd->add_option("--teacher", align_b, "Teacher trajectory")->required();
    align_cmd->add_flag("--subsample", align_sub, "Subsample interior states as training does");
    align_cmd->add_option("--seed", align_seed, "Subsampling seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen_cmd->parsed()) return run_gen(gen);
        if (train_cmd->parsed())
            return run_train(train_config, train_out,
                             have_seed ? std::optional<std::uint64_t>(seed_val) : std::nullopt, train_det);
        if (eval_cmd->parsed())
            return run_eval(eval_ckpt, eval_data, eval_out, eval_det, eval_unroll, eval_dump, eval_index);
        if (time_cmd->parsed()) return run_time(time_ckpt, time_data, time_det, time_unroll);
        if (cayley_cmd->parsed()) return run_cayley(cayley_n);
        if (align_cmd->parsed()) return run_align_debug(align_a, align_b, align_sub, align_seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 2;
}
