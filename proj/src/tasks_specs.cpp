#include "deqr/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace deqr::tasks {

std::string to_string(Stage s) {
    return s == Stage::Input ? "input" : "output";
}

std::string to_string(Location l) {
    switch (l) {
        case Location::Node: return "node";
        case Location::Edge: return "edge";
        default: return "graph";
    }
}

std::string to_string(DType d) {
    switch (d) {
        case DType::Scalar: return "scalar";
        case DType::Mask: return "mask";
        case DType::MaskOne: return "mask_one";
        case DType::Categorical: return "categorical";
        case DType::Pointer: return "pointer";
        default: return "permutation_pointer";
    }
}

Stage stage_from_string(const std::string& s) {
    if (s == "input") return Stage::Input;
    if (s == "output") return Stage::Output;
    throw ContractViolation("unknown stage '" + s + "'");
}

Location location_from_string(const std::string& s) {
    if (s == "node") return Location::Node;
    if (s == "edge") return Location::Edge;
    if (s == "graph") return Location::Graph;
    throw ContractViolation("unknown location '" + s + "'");
}

DType dtype_from_string(const std::string& s) {
    if (s == "scalar") return DType::Scalar;
    if (s == "mask") return DType::Mask;
    if (s == "mask_one") return DType::MaskOne;
    if (s == "categorical") return DType::Categorical;
    if (s == "pointer") return DType::Pointer;
    if (s == "permutation_pointer") return DType::PermutationPointer;
    throw ContractViolation("unknown dtype '" + s + "'");
}

const std::vector<std::string> kAlgorithms = {
    "bfs",     "bellman_ford",   "floyd_warshall", "dag_shortest_paths", "mst_prim",
    "minimum", "insertion_sort", "binary_search",  "parallel_search"};

bool is_known_algorithm(const std::string& algorithm) {
    return std::find(kAlgorithms.begin(), kAlgorithms.end(), algorithm) != kAlgorithms.end();
}

namespace {

using S = Stage;
using L = Location;
using D = DType;

FeatureSpec fs(const char* name, S stage, L loc, D dtype) {
    return FeatureSpec{name, stage, loc, dtype, 0};
}

const std::map<std::string, std::vector<FeatureSpec>> kSpecs = {
    {"bfs", {fs("s", S::Input, L::Node, D::MaskOne), fs("pi", S::Output, L::Node, D::Pointer)}},
    {"bellman_ford",
     {fs("s", S::Input, L::Node, D::MaskOne), fs("w", S::Input, L::Edge, D::Scalar),
      fs("pi", S::Output, L::Node, D::Pointer)}},
    {"floyd_warshall",
     {fs("w", S::Input, L::Edge, D::Scalar), fs("Pi", S::Output, L::Edge, D::Pointer)}},
    {"dag_shortest_paths",
     {fs("s", S::Input, L::Node, D::MaskOne), fs("w", S::Input, L::Edge, D::Scalar),
      fs("pi", S::Output, L::Node, D::Pointer)}},
    {"mst_prim",
     {fs("s", S::Input, L::Node, D::MaskOne), fs("w", S::Input, L::Edge, D::Scalar),
      fs("pi", S::Output, L::Node, D::Pointer)}},
    {"minimum",
     {fs("key", S::Input, L::Node, D::Scalar), fs("pos", S::Input, L::Node, D::Scalar),
      fs("min", S::Output, L::Node, D::MaskOne)}},
    {"insertion_sort",
     {fs("key", S::Input, L::Node, D::Scalar), fs("pos", S::Input, L::Node, D::Scalar),
      fs("pred", S::Output, L::Node, D::PermutationPointer)}},
    {"binary_search",
     {fs("key", S::Input, L::Node, D::Scalar), fs("pos", S::Input, L::Node, D::Scalar),
      fs("x", S::Input, L::Graph, D::Scalar), fs("return", S::Output, L::Node, D::MaskOne)}},
    {"parallel_search",
     {fs("key", S::Input, L::Node, D::Scalar), fs("pos", S::Input, L::Node, D::Scalar),
      fs("x", S::Input, L::Graph, D::Scalar), fs("return", S::Output, L::Graph, D::Pointer),
      fs("smaller", S::Output, L::Node, D::Mask)}},
};

} // namespace

const std::vector<FeatureSpec>& algorithm_specs(const std::string& algorithm) {
    auto it = kSpecs.find(algorithm);
    if (it == kSpecs.end()) throw ContractViolation("unknown algorithm '" + algorithm + "'");
    return it->second;
}

std::vector<FeatureSpec> input_specs(const std::string& algorithm) {
    std::vector<FeatureSpec> out;
    for (const FeatureSpec& f : algorithm_specs(algorithm))
        if (f.stage == Stage::Input) out.push_back(f);
    return out;
}

std::vector<FeatureSpec> output_specs(const std::string& algorithm) {
    std::vector<FeatureSpec> out;
    for (const FeatureSpec& f : algorithm_specs(algorithm))
        if (f.stage == Stage::Output) out.push_back(f);
    return out;
}

bool GraphInstance::has_edge(int src, int dst) const {
    for (const auto& e : edges)
        if (e[0] == src && e[1] == dst) return true;
    return false;
}

namespace {

bool is_integral_index(double v, int n) {
    double r = std::round(v);
    return std::abs(v - r) < 1e-9 && r >= 0.0 && r < static_cast<double>(n);
}

void check(bool ok, const std::string& msg) {
    if (!ok) throw ContractViolation(msg);
}

} // namespace

void validate_instance(const GraphInstance& inst) {
    check(is_known_algorithm(inst.algorithm), "unknown algorithm '" + inst.algorithm + "'");
    int nb = inst.base_n > 0 ? inst.base_n : inst.n;
    check(nb >= 1, "instance has no nodes");
    check(inst.edge_types.empty() || inst.edge_types.size() == inst.edges.size(),
          "edge_types length does not match edges");

    std::set<std::array<int, 2>> base_edges;
    std::vector<bool> self_loop(static_cast<std::size_t>(inst.n), false);
    for (std::size_t i = 0; i < inst.edges.size(); ++i) {
        const auto& e = inst.edges[i];
        check(e[0] >= 0 && e[0] < inst.n && e[1] >= 0 && e[1] < inst.n,
              "edge endpoint out of range");
        bool base = inst.edge_types.empty() || inst.edge_types[i] == 0;
        if (base) check(base_edges.insert(e).second, "duplicate edge");
        if (e[0] == e[1]) self_loop[static_cast<std::size_t>(e[0])] = true;
        if (base) check(e[0] < nb && e[1] < nb, "base edge touches a virtual node");
    }
    for (int v = 0; v < nb; ++v)
        check(self_loop[static_cast<std::size_t>(v)], "node " + std::to_string(v) + " lacks a self-loop");

    std::int64_t edge_count = static_cast<std::int64_t>(base_edges.size());
    for (const FeatureSpec& spec : algorithm_specs(inst.algorithm)) {
        auto it = inst.features.find(spec.name);
        check(it != inst.features.end(), "missing feature '" + spec.name + "'");
        const std::vector<double>& vals = it->second;
        std::int64_t want = spec.location == Location::Node   ? nb
                            : spec.location == Location::Edge ? edge_count
                                                              : 1;
        check(static_cast<std::int64_t>(vals.size()) == want,
              "feature '" + spec.name + "' has " + std::to_string(vals.size()) + " values, expected " +
                  std::to_string(want));
        switch (spec.dtype) {
            case DType::Scalar:
                break;
            case DType::Mask:
                for (double v : vals) check(v == 0.0 || v == 1.0, "mask feature '" + spec.name + "' not 0/1");
                break;
            case DType::MaskOne: {
                int ones = 0;
                for (double v : vals) {
                    check(v == 0.0 || v == 1.0, "mask_one feature '" + spec.name + "' not 0/1");
                    if (v == 1.0) ++ones;
                }
                check(ones == 1, "mask_one feature '" + spec.name + "' must have exactly one 1");
                break;
            }
            case DType::Categorical:
                for (double v : vals) check(is_integral_index(v, spec.num_classes),
                                            "categorical feature '" + spec.name + "' out of range");
                break;
            case DType::Pointer:
            case DType::PermutationPointer: {
                for (double v : vals) check(is_integral_index(v, nb),
                                            "pointer feature '" + spec.name + "' out of range");
                if (spec.location == Location::Node)
                    for (std::size_t v = 0; v < vals.size(); ++v)
                        check(base_edges.count({static_cast<int>(v),
                                                static_cast<int>(std::llround(vals[v]))}) > 0,
                              "pointer feature '" + spec.name + "' does not follow an edge");
                break;
            }
        }
    }

    // The search tasks additionally require a sorted key array and an in-range query.
    if (inst.algorithm == "binary_search" || inst.algorithm == "parallel_search") {
        const auto& key = inst.features.at("key");
        for (std::size_t i = 1; i < key.size(); ++i)
            check(key[i - 1] <= key[i], "search task requires an ascending key array");
        double x = inst.features.at("x")[0];
        check(x >= 0.0 && x < key.back(), "search query must lie in [0, max(key))");
    }
}

} // namespace deqr::tasks
