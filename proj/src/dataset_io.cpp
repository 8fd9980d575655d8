#include <fstream>

#include <nlohmann/json.hpp>

#include "deqr/tasks.hpp"

namespace deqr::tasks {

using nlohmann::json;

namespace {

json instance_to_json(const GraphInstance& inst) {
    if (inst.cgp_augmented)
        throw ContractViolation("write_dataset: refusing to serialize an augmented instance");
    json j;
    j["algorithm"] = inst.algorithm;
    j["n"] = inst.n;
    j["steps"] = inst.steps;
    json edges = json::array();
    for (const auto& e : inst.edges) edges.push_back(json::array({e[0], e[1]}));
    j["edges"] = std::move(edges);
    json feats = json::object();
    for (const FeatureSpec& spec : algorithm_specs(inst.algorithm)) {
        auto it = inst.features.find(spec.name);
        if (it == inst.features.end())
            throw ContractViolation("write_dataset: instance lacks feature '" + spec.name + "'");
        json f;
        f["stage"] = to_string(spec.stage);
        f["location"] = to_string(spec.location);
        f["dtype"] = to_string(spec.dtype);
        f["values"] = it->second;
        feats[spec.name] = std::move(f);
    }
    j["features"] = std::move(feats);
    return j;
}

void expect_keys(const json& j, const std::vector<std::string>& keys, std::size_t line) {
    for (const auto& [k, v] : j.items())
        if (std::find(keys.begin(), keys.end(), k) == keys.end())
            throw ParseError("unexpected key '" + k + "'", line);
    for (const std::string& k : keys)
        if (!j.contains(k)) throw ParseError("missing key '" + k + "'", line);
}

GraphInstance instance_from_json(const json& j, std::size_t line) {
    expect_keys(j, {"algorithm", "n", "steps", "edges", "features"}, line);
    GraphInstance inst;
    inst.algorithm = j.at("algorithm").get<std::string>();
    inst.n = j.at("n").get<int>();
    inst.base_n = inst.n;
    inst.steps = j.at("steps").get<int>();
    std::vector<double> inline_weights;
    bool any_inline = false;
    for (const json& e : j.at("edges")) {
        if (!e.is_array() || e.size() < 2 || e.size() > 3)
            throw ParseError("edges entries must be [src,dst] or [src,dst,weight]", line);
        inst.edges.push_back({e[0].get<int>(), e[1].get<int>()});
        if (e.size() == 3) {
            inline_weights.push_back(e[2].get<double>());
            any_inline = true;
        } else {
            inline_weights.push_back(0.0);
        }
    }
    inst.edge_types.assign(inst.edges.size(), 0);
    for (const auto& [name, f] : j.at("features").items()) {
        expect_keys(f, {"stage", "location", "dtype", "values"}, line);
        FeatureSpec parsed;
        parsed.name = name;
        parsed.stage = stage_from_string(f.at("stage").get<std::string>());
        parsed.location = location_from_string(f.at("location").get<std::string>());
        parsed.dtype = dtype_from_string(f.at("dtype").get<std::string>());
        bool known = false;
        for (const FeatureSpec& spec : algorithm_specs(inst.algorithm)) {
            if (spec.name != name) continue;
            known = true;
            if (spec.stage != parsed.stage || spec.location != parsed.location ||
                spec.dtype != parsed.dtype)
                throw ParseError("feature '" + name + "' does not match the schema for " +
                                     inst.algorithm,
                                 line);
        }
        if (!known) throw ParseError("unknown feature '" + name + "' for " + inst.algorithm, line);
        inst.features[name] = f.at("values").get<std::vector<double>>();
    }
    if (any_inline && !inst.features.count("w")) inst.features["w"] = std::move(inline_weights);
    return inst;
}

} // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw ContractViolation("cannot open '" + path.string() + "' for writing");
    json header;
    header["version"] = 1;
    header["algorithm"] = ds.algorithm;
    header["split"] = ds.split;
    header["seed"] = ds.seed;
    out << header.dump() << "\n";
    for (const GraphInstance& inst : ds.instances) out << instance_to_json(inst).dump() << "\n";
    if (!out.good()) throw ContractViolation("write failed for '" + path.string() + "'");
}

Dataset read_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ContractViolation("cannot open '" + path.string() + "' for reading");
    Dataset ds;
    std::string linebuf;
    std::size_t lineno = 0;
    bool have_header = false;
    while (std::getline(in, linebuf)) {
        ++lineno;
        if (linebuf.empty()) continue;
        json j;
        try {
            j = json::parse(linebuf);
        } catch (const json::exception& e) {
            throw ParseError(std::string("invalid JSON: ") + e.what(), lineno);
        }
        try {
            if (!have_header) {
                expect_keys(j, {"version", "algorithm", "split", "seed"}, lineno);
                int version = j.at("version").get<int>();
                if (version != 1)
                    throw ParseError("unsupported dataset version " + std::to_string(version), lineno);
                ds.algorithm = j.at("algorithm").get<std::string>();
                ds.split = j.at("split").get<std::string>();
                ds.seed = j.at("seed").get<std::uint64_t>();
                if (!is_known_algorithm(ds.algorithm))
                    throw ParseError("unknown algorithm '" + ds.algorithm + "'", lineno);
                have_header = true;
                continue;
            }
            GraphInstance inst = instance_from_json(j, lineno);
            if (inst.algorithm != ds.algorithm)
                throw ParseError("instance algorithm '" + inst.algorithm + "' does not match header",
                                 lineno);
            validate_instance(inst);
            ds.instances.push_back(std::move(inst));
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad field: ") + e.what(), lineno);
        } catch (const ContractViolation& e) {
            throw ParseError(e.what(), lineno);
        }
    }
    if (!have_header) throw ParseError("dataset file has no header line", lineno == 0 ? 1 : lineno);
    return ds;
}

} // namespace deqr::tasks
