#include "deqr/model.hpp"

#include <cmath>

namespace deqr::model {

std::string to_string(Processor p) {
    return p == Processor::Pgn ? "pgn" : "triplet_pgn";
}

std::string to_string(Normalization n) {
    return n == Normalization::LayerNorm ? "layer_norm" : "granola";
}

Processor processor_from_string(const std::string& s) {
    if (s == "pgn") return Processor::Pgn;
    if (s == "triplet_pgn") return Processor::TripletPgn;
    throw ContractViolation("unknown processor '" + s + "'");
}

Normalization normalization_from_string(const std::string& s) {
    if (s == "layer_norm") return Normalization::LayerNorm;
    if (s == "granola") return Normalization::Granola;
    throw ContractViolation("unknown normalization '" + s + "'");
}

ad::Tensor& ModelParams::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

const ad::Tensor& ModelParams::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

std::int64_t ModelParams::total_size() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : tensors) n += t.size();
    return n;
}

namespace {

int input_width(const tasks::FeatureSpec& spec) {
    switch (spec.dtype) {
        case tasks::DType::Scalar:
        case tasks::DType::Mask:
        case tasks::DType::MaskOne:
            return 1;
        case tasks::DType::Categorical:
            return spec.num_classes;
        default:
            throw ContractViolation("pointer-typed inputs are not supported (feature '" + spec.name +
                                    "')");
    }
}

enum class Init { Glorot, Zero, One, GateBias };

struct Entry {
    std::string name;
    std::vector<std::int64_t> shape;
    Init init = Init::Glorot;
};

void mlp2(std::vector<Entry>& out, const std::string& prefix, std::int64_t in, std::int64_t hidden,
          std::int64_t outdim, Init last_bias = Init::Zero, Init last_weight = Init::Glorot) {
    out.push_back({prefix + "/w1", {in, hidden}, Init::Glorot});
    out.push_back({prefix + "/b1", {1, hidden}, Init::Zero});
    out.push_back({prefix + "/w2", {hidden, outdim}, last_weight});
    out.push_back({prefix + "/b2", {1, outdim}, last_bias});
}

std::vector<Entry> parameter_table(const ModelConfig& cfg) {
    const std::int64_t d = cfg.latent_dim;
    std::vector<Entry> out;

    for (const tasks::FeatureSpec& spec : tasks::input_specs(cfg.algorithm)) {
        std::int64_t in = input_width(spec);
        out.push_back({"enc/" + spec.name + "/w", {in, d}, Init::Glorot});
        out.push_back({"enc/" + spec.name + "/b", {1, d}, Init::Zero});
    }
    out.push_back({"enc/edge_type/emb", {2, d}, Init::Glorot});

    mlp2(out, "proc/msg", 5 * d, d, d);
    mlp2(out, "proc/upd", 3 * d, d, d);
    mlp2(out, "proc/gate", 3 * d, d, d, Init::GateBias);
    if (cfg.processor == Processor::TripletPgn) {
        mlp2(out, "proc/tri", 5 * d, d, 8);
        out.push_back({"proc/tri/proj_w", {8, d}, Init::Glorot});
        out.push_back({"proc/tri/proj_b", {1, d}, Init::Zero});
    }

    out.push_back({"norm/ln/gamma", {1, d}, Init::One});
    out.push_back({"norm/ln/beta", {1, d}, Init::Zero});
    if (cfg.norm == Normalization::Granola) {
        // Zero-initialized heads keep the normalization equal to plain
        // affine layer norm at the start of training.
        out.push_back({"norm/granola/w1", {2 * d, d}, Init::Glorot});
        out.push_back({"norm/granola/b1", {1, d}, Init::Zero});
        out.push_back({"norm/granola/ws", {d, d}, Init::Zero});
        out.push_back({"norm/granola/bs", {1, d}, Init::Zero});
        out.push_back({"norm/granola/wt", {d, d}, Init::Zero});
        out.push_back({"norm/granola/bt", {1, d}, Init::Zero});
    }

    for (const tasks::FeatureSpec& spec : tasks::output_specs(cfg.algorithm)) {
        const std::string base = "dec/" + spec.name;
        switch (spec.dtype) {
            case tasks::DType::Scalar:
            case tasks::DType::Mask:
            case tasks::DType::MaskOne: {
                std::int64_t in = spec.location == tasks::Location::Edge ? 3 * d : d;
                out.push_back({base + "/w", {in, 1}, Init::Glorot});
                out.push_back({base + "/b", {1, 1}, Init::Zero});
                break;
            }
            case tasks::DType::Categorical:
                out.push_back({base + "/w", {d, spec.num_classes}, Init::Glorot});
                out.push_back({base + "/b", {1, spec.num_classes}, Init::Zero});
                break;
            case tasks::DType::Pointer: {
                std::int64_t in = spec.location == tasks::Location::Node    ? 3 * d
                                  : spec.location == tasks::Location::Edge  ? 5 * d
                                                                            : 2 * d;
                mlp2(out, base + "/ptr", in, d, 1);
                break;
            }
            case tasks::DType::PermutationPointer:
                mlp2(out, base + "/ptr", 3 * d, d, 1);
                break;
        }
    }
    return out;
}

} // namespace

ModelParams init_params(const ModelConfig& cfg, Rng& rng) {
    if (!tasks::is_known_algorithm(cfg.algorithm))
        throw ContractViolation("unknown algorithm '" + cfg.algorithm + "'");
    if (cfg.latent_dim < 1) throw ContractViolation("latent_dim must be positive");
    std::vector<Entry> table = parameter_table(cfg);
    std::sort(table.begin(), table.end(), [](const Entry& a, const Entry& b) { return a.name < b.name; });
    ModelParams params;
    for (const Entry& e : table) {
        ad::Tensor t = ad::Tensor::zeros(e.shape);
        switch (e.init) {
            case Init::Glorot: {
                double fan_in = static_cast<double>(e.shape[0]);
                double fan_out = static_cast<double>(e.shape[1]);
                double limit = std::sqrt(6.0 / (fan_in + fan_out)) * cfg.init_scale;
                for (double& v : t.vec()) v = uniform(rng, -limit, limit);
                break;
            }
            case Init::Zero:
                break;
            case Init::One:
                std::fill(t.vec().begin(), t.vec().end(), 1.0);
                break;
            case Init::GateBias:
                std::fill(t.vec().begin(), t.vec().end(), cfg.gate_bias_init);
                break;
        }
        params.tensors.emplace(e.name, std::move(t));
    }
    return params;
}

ad::Var VarParams::at(const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw ContractViolation("unknown parameter '" + name + "'");
    return it->second;
}

VarParams lift(ad::Tape& tape, const ModelParams& params, bool learnable) {
    VarParams out;
    for (const auto& [name, t] : params.tensors) out.vars.emplace(name, tape.leaf(t, learnable));
    return out;
}

GraphPlan build_plan(const tasks::GraphInstance& inst) {
    GraphPlan plan;
    plan.inst = &inst;
    plan.n = inst.n;
    plan.base_n = inst.base_n > 0 ? inst.base_n : inst.n;
    plan.m = static_cast<std::int64_t>(inst.edges.size());
    plan.src.reserve(inst.edges.size());
    plan.dst.reserve(inst.edges.size());
    for (const auto& e : inst.edges) {
        plan.src.push_back(e[0]);
        plan.dst.push_back(e[1]);
    }
    for (int v = 0; v < plan.base_n; ++v) plan.iota_base.push_back(v);

    auto type_of = [&inst](std::size_t i) -> std::uint8_t {
        return inst.edge_types.empty() ? 0 : inst.edge_types[i];
    };
    for (std::size_t i = 0; i < inst.edges.size(); ++i)
        if (type_of(i) == 0) plan.base_rows.push_back(static_cast<std::int64_t>(i));

    auto add_pass = [&plan](const std::vector<std::int64_t>& rows) {
        GraphPlan::Pass pass;
        pass.rows = rows;
        for (std::int64_t r : rows) {
            pass.src.push_back(plan.src[static_cast<std::size_t>(r)]);
            pass.dst.push_back(plan.dst[static_cast<std::size_t>(r)]);
        }
        plan.passes.push_back(std::move(pass));
    };

    if (!inst.cgp_augmented) {
        std::vector<std::int64_t> all(static_cast<std::size_t>(plan.m));
        for (std::int64_t i = 0; i < plan.m; ++i) all[static_cast<std::size_t>(i)] = i;
        add_pass(all);
    } else {
        std::vector<std::int64_t> base_pass, cayley_pass;
        for (std::int64_t i = 0; i < plan.m; ++i) {
            bool self = plan.src[static_cast<std::size_t>(i)] == plan.dst[static_cast<std::size_t>(i)];
            bool base = type_of(static_cast<std::size_t>(i)) == 0;
            if (base || self) base_pass.push_back(i);
            if (!base || self) cayley_pass.push_back(i);
        }
        add_pass(base_pass);
        add_pass(cayley_pass);
    }
    return plan;
}

} // namespace deqr::model
