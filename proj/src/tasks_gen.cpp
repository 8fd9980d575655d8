#include "deqr/tasks.hpp"

#include <algorithm>
#include <numeric>

namespace deqr::tasks {

namespace {

constexpr double kWeightLo = 0.02;
constexpr double kWeightHi = 1.0;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct AlgoTraits {
    bool graph = false;     // otherwise a fully connected array task
    bool weighted = false;
    bool acyclic = false;
    bool undirected = false;
    bool sorted_keys = false;
    bool has_query = false;
    bool has_source = false;
};

AlgoTraits traits_of(const std::string& algorithm) {
    if (algorithm == "bfs") return {true, false, false, true, false, false, true};
    if (algorithm == "bellman_ford") return {true, true, false, true, false, false, true};
    if (algorithm == "floyd_warshall") return {true, true, false, true, false, false, false};
    if (algorithm == "dag_shortest_paths") return {true, true, true, false, false, false, true};
    if (algorithm == "mst_prim") return {true, true, false, true, false, false, true};
    if (algorithm == "minimum") return {false, false, false, false, false, false, false};
    if (algorithm == "insertion_sort") return {false, false, false, false, false, false, false};
    if (algorithm == "binary_search") return {false, false, false, false, true, true, false};
    if (algorithm == "parallel_search") return {false, false, false, false, true, true, false};
    throw ContractViolation("unknown algorithm '" + algorithm + "'");
}

} // namespace

AdjStructure gen_er_graph(int n, double p, bool weighted, bool acyclic, bool undirected, Rng& rng) {
    if (n < 1) throw ContractViolation("gen_er_graph: need n >= 1");
    AdjStructure out;
    std::vector<int> rank(static_cast<std::size_t>(n));
    std::iota(rank.begin(), rank.end(), 0);
    if (acyclic) std::shuffle(rank.begin(), rank.end(), rng);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j) {
            if (uniform(rng, 0.0, 1.0) >= p) continue;
            double w = weighted ? uniform(rng, kWeightLo, kWeightHi) : 1.0;
            if (undirected) {
                out.arcs.push_back({i, j});
                out.arcs.push_back({j, i});
                if (weighted) {
                    out.weights.push_back(w);
                    out.weights.push_back(w);
                }
            } else if (acyclic) {
                // Orient low-to-high under the random permutation to stay acyclic.
                int a = i, b = j;
                if (rank[static_cast<std::size_t>(a)] > rank[static_cast<std::size_t>(b)]) std::swap(a, b);
                out.arcs.push_back({a, b});
                if (weighted) out.weights.push_back(w);
            } else {
                out.arcs.push_back({i, j});
                if (weighted) out.weights.push_back(w);
            }
        }
    return out;
}

GraphInstance make_instance(const std::string& algorithm, int n, Rng& rng) {
    AlgoTraits tr = traits_of(algorithm);
    GraphInstance inst;
    inst.algorithm = algorithm;
    inst.n = n;
    inst.base_n = n;

    if (tr.graph) {
        double p = static_cast<double>(uniform_int(rng, 1, 9)) / 10.0;
        AdjStructure adj = gen_er_graph(n, p, tr.weighted, tr.acyclic, tr.undirected, rng);
        struct Row {
            std::array<int, 2> e;
            double w;
        };
        std::vector<Row> rows;
        for (std::size_t i = 0; i < adj.arcs.size(); ++i)
            rows.push_back({adj.arcs[i], tr.weighted ? adj.weights[i] : 0.0});
        // Acyclic tasks get zero-weight reverse arcs so parent pointers stay
        // on edges; real weights never hit 0, which keeps the direction
        // recoverable and lets the oracle ignore the reverses.
        if (tr.acyclic)
            for (const auto& a : adj.arcs) rows.push_back({{a[1], a[0]}, 0.0});
        for (int v = 0; v < n; ++v) rows.push_back({{v, v}, 0.0});
        std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) { return a.e < b.e; });
        std::vector<double> w;
        for (const Row& r : rows) {
            inst.edges.push_back(r.e);
            if (tr.weighted) w.push_back(r.w);
        }
        inst.edge_types.assign(inst.edges.size(), 0);
        if (tr.weighted) inst.features["w"] = std::move(w);
    } else {
        // Array tasks live on the complete digraph, self-loops included,
        // in row-major order.
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) inst.edges.push_back({i, j});
        inst.edge_types.assign(inst.edges.size(), 0);
        std::vector<double> key(static_cast<std::size_t>(n));
        for (double& k : key) k = uniform(rng, 0.0, 1.0);
        if (tr.sorted_keys) std::sort(key.begin(), key.end());
        std::vector<double> pos(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i)
            pos[static_cast<std::size_t>(i)] = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
        if (tr.has_query) inst.features["x"] = {uniform(rng, 0.0, key.back())};
        inst.features["key"] = std::move(key);
        inst.features["pos"] = std::move(pos);
    }

    if (tr.has_source) {
        std::vector<double> s(static_cast<std::size_t>(n), 0.0);
        s[static_cast<std::size_t>(uniform_int(rng, 0, n - 1))] = 1.0;
        inst.features["s"] = std::move(s);
    }

    int steps = 0;
    auto outputs = run_oracle(algorithm, inst, &steps);
    for (auto& [name, vals] : outputs) inst.features[name] = std::move(vals);
    inst.steps = steps;
    validate_instance(inst);
    return inst;
}

Dataset make_dataset(const std::string& algorithm, int count, int size_lo, int size_hi,
                     std::uint64_t seed, const std::string& split) {
    if (size_lo < 1 || size_hi < size_lo)
        throw ContractViolation("make_dataset: bad size range [" + std::to_string(size_lo) + "," +
                                std::to_string(size_hi) + "]");
    Dataset ds;
    ds.algorithm = algorithm;
    ds.split = split;
    ds.seed = seed;
    std::uint64_t base = seed ^ fnv1a(split);
    for (int i = 0; i < count; ++i) {
        Rng rng(mix_seed(base, static_cast<std::uint64_t>(i)));
        int n = uniform_int(rng, size_lo, size_hi);
        ds.instances.push_back(make_instance(algorithm, n, rng));
    }
    return ds;
}

} // namespace deqr::tasks
