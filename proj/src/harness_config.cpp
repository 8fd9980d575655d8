#include "deqr/harness.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

namespace deqr::harness {

using nlohmann::json;

std::string to_string(ModelKind k) {
    return k == ModelKind::Dear ? "dear" : "nar_unrolled";
}

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "dear") return ModelKind::Dear;
    if (s == "nar_unrolled") return ModelKind::NarUnrolled;
    throw ContractViolation("unknown model_kind: " + s);
}

namespace {

std::string method_to_string(fp::Method m) {
    return m == fp::Method::Anderson ? "anderson" : "fixed_point";
}

fp::Method method_from_string(const std::string& s) {
    if (s == "anderson") return fp::Method::Anderson;
    if (s == "fixed_point") return fp::Method::FixedPoint;
    throw ContractViolation("unknown solver method: " + s);
}

void expect_keys(const json& obj, const std::vector<std::string>& allowed, const std::string& where) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool ok = false;
        for (const auto& k : allowed)
            if (it.key() == k) { ok = true; break; }
        if (!ok) throw ContractViolation("unknown key '" + it.key() + "' in " + where);
    }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
    if (obj.contains(key)) out = obj.at(key).get<T>();
}

void parse_solver(const json& obj, RunConfig& cfg) {
    expect_keys(obj, {"method", "tol", "max_iters", "anderson_memory", "anderson_beta",
                      "backward_tol", "backward_max_iters"}, "solver");
    if (obj.contains("method")) cfg.eq.solver.method = method_from_string(obj.at("method").get<std::string>());
    read_field(obj, "tol", cfg.eq.solver.tol);
    read_field(obj, "max_iters", cfg.eq.solver.max_iters);
    read_field(obj, "anderson_memory", cfg.eq.solver.anderson_memory);
    read_field(obj, "anderson_beta", cfg.eq.solver.anderson_beta);
    read_field(obj, "backward_tol", cfg.eq.backward_tol);
    read_field(obj, "backward_max_iters", cfg.eq.backward_max_iters);
}

void parse_data(const json& obj, RunConfig& cfg) {
    expect_keys(obj, {"train", "valid", "test"}, "data");
    read_field(obj, "train", cfg.train_path);
    read_field(obj, "valid", cfg.valid_path);
    read_field(obj, "test", cfg.test_path);
}

} // namespace

RunConfig config_from_json_text(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError("config root must be a JSON object");
    expect_keys(j, {"algorithm", "model_kind", "profile", "latent_dim", "processor", "normalization",
                    "cgp_enabled", "sinkhorn_iters", "sinkhorn_temp", "gate_bias_init", "init_scale",
                    "solver", "extra_step_prob", "alignment_weight", "alignment_subsample",
                    "teacher_checkpoint", "jacobian_weight", "batch_size", "learning_rate", "epochs",
                    "seed", "data", "out_dir", "unrolled_eval_steps", "deterministic"},
                "config");

    RunConfig cfg;
    if (!j.contains("algorithm")) throw ContractViolation("config requires 'algorithm'");
    cfg.algorithm = j.at("algorithm").get<std::string>();
    if (!tasks::is_known_algorithm(cfg.algorithm))
        throw ContractViolation("unknown algorithm: " + cfg.algorithm);

    if (j.contains("profile")) apply_profile(cfg, get_profile(j.at("profile").get<std::string>()));

    if (j.contains("model_kind")) cfg.model_kind = model_kind_from_string(j.at("model_kind").get<std::string>());
    read_field(j, "latent_dim", cfg.model.latent_dim);
    if (j.contains("processor"))
        cfg.model.processor = model::processor_from_string(j.at("processor").get<std::string>());
    if (j.contains("normalization"))
        cfg.model.norm = model::normalization_from_string(j.at("normalization").get<std::string>());
    read_field(j, "cgp_enabled", cfg.model.cgp);
    read_field(j, "sinkhorn_iters", cfg.model.sinkhorn_iters);
    read_field(j, "sinkhorn_temp", cfg.model.sinkhorn_temp);
    read_field(j, "gate_bias_init", cfg.model.gate_bias_init);
    read_field(j, "init_scale", cfg.model.init_scale);
    if (j.contains("solver")) parse_solver(j.at("solver"), cfg);
    read_field(j, "extra_step_prob", cfg.eq.extra_step_prob);
    read_field(j, "alignment_weight", cfg.eq.alignment_weight);
    read_field(j, "alignment_subsample", cfg.eq.subsample_alignment);
    read_field(j, "teacher_checkpoint", cfg.teacher_checkpoint);
    read_field(j, "jacobian_weight", cfg.eq.jacobian_weight);
    read_field(j, "batch_size", cfg.batch_size);
    read_field(j, "learning_rate", cfg.learning_rate);
    read_field(j, "epochs", cfg.epochs);
    read_field(j, "seed", cfg.seed);
    if (j.contains("data")) parse_data(j.at("data"), cfg);
    read_field(j, "out_dir", cfg.out_dir);
    read_field(j, "unrolled_eval_steps", cfg.unrolled_eval_steps);
    read_field(j, "deterministic", cfg.deterministic);

    cfg.model.algorithm = cfg.algorithm;
    if (cfg.batch_size < 1) throw ContractViolation("batch_size must be positive");
    if (cfg.epochs < 1) throw ContractViolation("epochs must be positive");
    if (cfg.model.latent_dim < 1) throw ContractViolation("latent_dim must be positive");
    if (cfg.eq.alignment_weight > 0.0 && cfg.teacher_checkpoint.empty())
        throw ContractViolation("alignment_weight > 0 requires teacher_checkpoint");
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open config file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return config_from_json_text(ss.str());
}

std::string config_to_json_text(const RunConfig& cfg) {
    json j;
    j["algorithm"] = cfg.algorithm;
    j["model_kind"] = to_string(cfg.model_kind);
    j["latent_dim"] = cfg.model.latent_dim;
    j["processor"] = model::to_string(cfg.model.processor);
    j["normalization"] = model::to_string(cfg.model.norm);
    j["cgp_enabled"] = cfg.model.cgp;
    j["sinkhorn_iters"] = cfg.model.sinkhorn_iters;
    j["sinkhorn_temp"] = cfg.model.sinkhorn_temp;
    j["gate_bias_init"] = cfg.model.gate_bias_init;
    j["init_scale"] = cfg.model.init_scale;
    j["solver"] = {{"method", method_to_string(cfg.eq.solver.method)},
                   {"tol", cfg.eq.solver.tol},
                   {"max_iters", cfg.eq.solver.max_iters},
                   {"anderson_memory", cfg.eq.solver.anderson_memory},
                   {"anderson_beta", cfg.eq.solver.anderson_beta},
                   {"backward_tol", cfg.eq.backward_tol},
                   {"backward_max_iters", cfg.eq.backward_max_iters}};
    j["extra_step_prob"] = cfg.eq.extra_step_prob;
    j["alignment_weight"] = cfg.eq.alignment_weight;
    j["alignment_subsample"] = cfg.eq.subsample_alignment;
    j["teacher_checkpoint"] = cfg.teacher_checkpoint;
    j["jacobian_weight"] = cfg.eq.jacobian_weight;
    j["batch_size"] = cfg.batch_size;
    j["learning_rate"] = cfg.learning_rate;
    j["epochs"] = cfg.epochs;
    j["seed"] = cfg.seed;
    j["data"] = {{"train", cfg.train_path}, {"valid", cfg.valid_path}, {"test", cfg.test_path}};
    j["out_dir"] = cfg.out_dir;
    j["unrolled_eval_steps"] = cfg.unrolled_eval_steps;
    j["deterministic"] = cfg.deterministic;
    return j.dump();
}

Profile get_profile(const std::string& name) {
    if (name == "desk")
        return {"desk", 2000, 100, 100, 4, 8, 8, 16, 20, 32, 1e-3};
    if (name == "paper")
        return {"paper", 100000, 100, 100, 8, 16, 16, 64, 100, 128, 3e-4};
    throw ContractViolation("unknown profile: " + name + " (expected 'desk' or 'paper')");
}

void apply_profile(RunConfig& cfg, const Profile& p) {
    cfg.epochs = p.epochs;
    cfg.model.latent_dim = p.latent_dim;
    cfg.learning_rate = p.learning_rate;
}

namespace {

std::string fmt(double x) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", x);
    return buf;
}

} // namespace

std::string metrics_csv_header() {
    return "epoch,split,task_loss,align_loss,jac_loss,accuracy,solver_steps_mean,"
           "solver_steps_max,seconds_per_sample";
}

std::string to_csv(const MetricsRow& r) {
    std::ostringstream ss;
    ss << r.epoch << ',' << r.split << ',' << fmt(r.task_loss) << ',' << fmt(r.align_loss) << ','
       << fmt(r.jac_loss) << ',' << fmt(r.accuracy) << ',' << fmt(r.solver_steps_mean) << ','
       << r.solver_steps_max << ',' << fmt(r.seconds_per_sample);
    return ss.str();
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractViolation("cannot open metrics file for writing: " + path.string());
    out << metrics_csv_header() << '\n';
    for (const auto& row : rows) out << to_csv(row) << '\n';
    if (!out) throw ContractViolation("failed writing metrics file: " + path.string());
}

std::optional<std::size_t> select_model(const std::vector<MetricsRow>& rows) {
    std::optional<std::size_t> best;
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].split != "valid") continue;
        if (!best || rows[i].task_loss < rows[*best].task_loss) best = i;
    }
    return best;
}

void write_trajectory(const std::vector<ad::Tensor>& states, const std::filesystem::path& path) {
    if (states.empty()) throw ContractViolation("refusing to write an empty trajectory");
    json j;
    j["version"] = 1;
    j["shape"] = states.front().shape();
    json rows = json::array();
    for (const auto& s : states) {
        if (s.shape() != states.front().shape())
            throw ContractViolation("trajectory states must share one shape");
        rows.push_back(std::vector<double>(s.data(), s.data() + s.size()));
    }
    j["states"] = std::move(rows);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ContractViolation("cannot open trajectory file for writing: " + path.string());
    out << j.dump() << '\n';
}

std::vector<ad::Tensor> read_trajectory(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ContractViolation("cannot open trajectory file: " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ParseError(std::string("trajectory file is not valid JSON: ") + e.what());
    }
    expect_keys(j, {"version", "shape", "states"}, "trajectory");
    if (j.at("version").get<int>() != 1) throw ParseError("unsupported trajectory version");
    const auto shape = j.at("shape").get<std::vector<std::int64_t>>();
    std::vector<ad::Tensor> states;
    for (const auto& row : j.at("states")) {
        const auto flat = row.get<std::vector<double>>();
        states.push_back(ad::Tensor::from_data(shape, flat));
    }
    if (states.empty()) throw ParseError("trajectory holds no states");
    return states;
}

} // namespace deqr::harness
