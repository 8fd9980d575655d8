#include "deqr/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace deqr::tasks {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Arc {
    int src, dst;
    double w;
};

/// Non-self arcs with weights pulled from the "w" feature (1.0 if absent).
/// Zero-weight arcs are structural reverses added for pointer support on
/// directed tasks, not part of the algorithm's graph.
std::vector<Arc> arcs_of(const GraphInstance& inst) {
    const std::vector<double>* w = nullptr;
    if (auto it = inst.features.find("w"); it != inst.features.end()) w = &it->second;
    std::vector<Arc> arcs;
    for (std::size_t i = 0; i < inst.edges.size(); ++i) {
        if (!inst.edge_types.empty() && inst.edge_types[i] != 0) continue;
        const auto& e = inst.edges[i];
        if (e[0] == e[1]) continue;
        if (w && (*w)[i] == 0.0) continue;
        arcs.push_back({e[0], e[1], w ? (*w)[i] : 1.0});
    }
    return arcs;
}

int source_of(const GraphInstance& inst) {
    const auto& s = inst.features.at("s");
    for (std::size_t v = 0; v < s.size(); ++v)
        if (s[v] == 1.0) return static_cast<int>(v);
    throw ContractViolation("mask_one feature 's' has no source");
}

std::vector<double> to_doubles(const std::vector<int>& xs) {
    return {xs.begin(), xs.end()};
}

std::map<std::string, std::vector<double>> oracle_bfs(const GraphInstance& inst, int* steps) {
    int n = inst.base_n > 0 ? inst.base_n : inst.n;
    int s = source_of(inst);
    std::vector<std::vector<int>> in_nbrs(static_cast<std::size_t>(n));
    for (const Arc& a : arcs_of(inst)) in_nbrs[static_cast<std::size_t>(a.dst)].push_back(a.src);
    for (auto& nb : in_nbrs) std::sort(nb.begin(), nb.end());

    std::vector<int> pi(static_cast<std::size_t>(n));
    std::iota(pi.begin(), pi.end(), 0);
    std::vector<bool> reached(static_cast<std::size_t>(n), false);
    std::vector<bool> in_frontier(static_cast<std::size_t>(n), false);
    reached[static_cast<std::size_t>(s)] = true;
    in_frontier[static_cast<std::size_t>(s)] = true;
    int rounds = 0;
    while (true) {
        std::vector<int> next;
        for (int v = 0; v < n; ++v) {
            if (reached[static_cast<std::size_t>(v)]) continue;
            for (int u : in_nbrs[static_cast<std::size_t>(v)]) {
                if (in_frontier[static_cast<std::size_t>(u)]) {
                    pi[static_cast<std::size_t>(v)] = u;
                    next.push_back(v);
                    break;
                }
            }
        }
        if (next.empty()) break;
        ++rounds;
        std::fill(in_frontier.begin(), in_frontier.end(), false);
        for (int v : next) {
            reached[static_cast<std::size_t>(v)] = true;
            in_frontier[static_cast<std::size_t>(v)] = true;
        }
    }
    if (steps) *steps = std::max(1, rounds);
    return {{"pi", to_doubles(pi)}};
}

/// Synchronous relaxation shared by bellman_ford and dag_shortest_paths:
/// both write the same shortest-path tree on their respective graph classes.
std::map<std::string, std::vector<double>> oracle_bellman(const GraphInstance& inst, int* steps) {
    int n = inst.base_n > 0 ? inst.base_n : inst.n;
    int s = source_of(inst);
    std::vector<Arc> arcs = arcs_of(inst);
    std::sort(arcs.begin(), arcs.end(), [](const Arc& a, const Arc& b) {
        return std::tie(a.dst, a.src) < std::tie(b.dst, b.src);
    });

    std::vector<double> dist(static_cast<std::size_t>(n), kInf);
    std::vector<int> pi(static_cast<std::size_t>(n));
    std::iota(pi.begin(), pi.end(), 0);
    dist[static_cast<std::size_t>(s)] = 0.0;
    int sweeps = 0;
    for (int round = 0; round < n; ++round) {
        std::vector<double> next = dist;
        std::vector<int> next_pi = pi;
        bool changed = false;
        for (const Arc& a : arcs) {
            if (dist[static_cast<std::size_t>(a.src)] == kInf) continue;
            double cand = dist[static_cast<std::size_t>(a.src)] + a.w;
            if (cand < next[static_cast<std::size_t>(a.dst)]) {
                next[static_cast<std::size_t>(a.dst)] = cand;
                next_pi[static_cast<std::size_t>(a.dst)] = a.src;
                changed = true;
            }
        }
        if (!changed) break;
        dist = std::move(next);
        pi = std::move(next_pi);
        ++sweeps;
    }
    if (steps) *steps = std::max(1, sweeps);
    return {{"pi", to_doubles(pi)}};
}

std::map<std::string, std::vector<double>> oracle_floyd(const GraphInstance& inst, int* steps) {
    int n = inst.base_n > 0 ? inst.base_n : inst.n;
    std::vector<std::vector<double>> dist(static_cast<std::size_t>(n),
                                          std::vector<double>(static_cast<std::size_t>(n), kInf));
    std::vector<std::vector<int>> pred(static_cast<std::size_t>(n),
                                       std::vector<int>(static_cast<std::size_t>(n)));
    for (int u = 0; u < n; ++u)
        for (int v = 0; v < n; ++v) pred[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] = u;
    for (int v = 0; v < n; ++v) {
        dist[static_cast<std::size_t>(v)][static_cast<std::size_t>(v)] = 0.0;
        pred[static_cast<std::size_t>(v)][static_cast<std::size_t>(v)] = v;
    }
    for (const Arc& a : arcs_of(inst)) {
        if (a.w < dist[static_cast<std::size_t>(a.src)][static_cast<std::size_t>(a.dst)]) {
            dist[static_cast<std::size_t>(a.src)][static_cast<std::size_t>(a.dst)] = a.w;
            pred[static_cast<std::size_t>(a.src)][static_cast<std::size_t>(a.dst)] = a.src;
        }
    }
    for (int k = 0; k < n; ++k)
        for (int u = 0; u < n; ++u)
            for (int v = 0; v < n; ++v) {
                double cand = dist[static_cast<std::size_t>(u)][static_cast<std::size_t>(k)] +
                              dist[static_cast<std::size_t>(k)][static_cast<std::size_t>(v)];
                if (cand < dist[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)]) {
                    dist[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] = cand;
                    pred[static_cast<std::size_t>(u)][static_cast<std::size_t>(v)] =
                        pred[static_cast<std::size_t>(k)][static_cast<std::size_t>(v)];
                }
            }
    std::vector<double> out;
    for (std::size_t i = 0; i < inst.edges.size(); ++i) {
        if (!inst.edge_types.empty() && inst.edge_types[i] != 0) continue;
        const auto& e = inst.edges[i];
        out.push_back(static_cast<double>(pred[static_cast<std::size_t>(e[0])][static_cast<std::size_t>(e[1])]));
    }
    if (steps) *steps = n;
    return {{"Pi", out}};
}

std::map<std::string, std::vector<double>> oracle_prim(const GraphInstance& inst, int* steps) {
    int n = inst.base_n > 0 ? inst.base_n : inst.n;
    int s = source_of(inst);
    std::vector<Arc> arcs = arcs_of(inst);
    std::vector<std::vector<std::pair<int, double>>> nbrs(static_cast<std::size_t>(n));
    for (const Arc& a : arcs) nbrs[static_cast<std::size_t>(a.src)].push_back({a.dst, a.w});

    std::vector<double> key(static_cast<std::size_t>(n), kInf);
    std::vector<int> pi(static_cast<std::size_t>(n));
    std::iota(pi.begin(), pi.end(), 0);
    std::vector<bool> in_tree(static_cast<std::size_t>(n), false);
    key[static_cast<std::size_t>(s)] = 0.0;
    for (int round = 0; round < n; ++round) {
        int u = -1;
        for (int v = 0; v < n; ++v)
            if (!in_tree[static_cast<std::size_t>(v)] &&
                (u < 0 || key[static_cast<std::size_t>(v)] < key[static_cast<std::size_t>(u)]))
                u = v;
        if (u < 0 || key[static_cast<std::size_t>(u)] == kInf) break;
        in_tree[static_cast<std::size_t>(u)] = true;
        for (auto [v, w] : nbrs[static_cast<std::size_t>(u)]) {
            if (!in_tree[static_cast<std::size_t>(v)] && w < key[static_cast<std::size_t>(v)]) {
                key[static_cast<std::size_t>(v)] = w;
                pi[static_cast<std::size_t>(v)] = u;
            }
        }
    }
    if (steps) *steps = n;
    return {{"pi", to_doubles(pi)}};
}

std::map<std::string, std::vector<double>> oracle_minimum(const GraphInstance& inst, int* steps) {
    const auto& key = inst.features.at("key");
    std::size_t best = 0;
    for (std::size_t i = 1; i < key.size(); ++i)
        if (key[i] < key[best]) best = i;
    std::vector<double> out(key.size(), 0.0);
    out[best] = 1.0;
    if (steps) *steps = static_cast<int>(key.size());
    return {{"min", out}};
}

std::map<std::string, std::vector<double>> oracle_insertion_sort(const GraphInstance& inst, int* steps) {
    const auto& key = inst.features.at("key");
    std::vector<int> order(key.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&key](int a, int b) { return key[static_cast<std::size_t>(a)] < key[static_cast<std::size_t>(b)]; });
    std::vector<double> pred(key.size(), 0.0);
    pred[static_cast<std::size_t>(order[0])] = static_cast<double>(order[0]);
    for (std::size_t i = 1; i < order.size(); ++i)
        pred[static_cast<std::size_t>(order[i])] = static_cast<double>(order[i - 1]);
    if (steps) *steps = static_cast<int>(key.size());
    return {{"pred", pred}};
}

void check_sorted(const std::vector<double>& key) {
    for (std::size_t i = 1; i < key.size(); ++i)
        if (key[i - 1] > key[i]) throw ContractViolation("search oracle requires an ascending key array");
}

/// Smallest index whose key exceeds x, counting the halving iterations.
int search_answer(const std::vector<double>& key, double x, int* iterations) {
    if (x < 0.0 || x >= key.back())
        throw ContractViolation("search query must lie in [0, max(key))");
    int lo = 0, hi = static_cast<int>(key.size());
    int it = 0;
    while (lo < hi) {
        int mid = (lo + hi) / 2;
        if (key[static_cast<std::size_t>(mid)] <= x)
            lo = mid + 1;
        else
            hi = mid;
        ++it;
    }
    if (iterations) *iterations = std::max(1, it);
    return lo;
}

std::map<std::string, std::vector<double>> oracle_binary_search(const GraphInstance& inst, int* steps) {
    const auto& key = inst.features.at("key");
    check_sorted(key);
    int it = 0;
    int idx = search_answer(key, inst.features.at("x")[0], &it);
    std::vector<double> out(key.size(), 0.0);
    out[static_cast<std::size_t>(idx)] = 1.0;
    if (steps) *steps = it;
    return {{"return", out}};
}

std::map<std::string, std::vector<double>> oracle_parallel_search(const GraphInstance& inst, int* steps) {
    const auto& key = inst.features.at("key");
    check_sorted(key);
    double x = inst.features.at("x")[0];
    int idx = search_answer(key, x, nullptr);
    std::vector<double> smaller(key.size(), 0.0);
    for (std::size_t i = 0; i < key.size(); ++i) smaller[i] = key[i] < x ? 1.0 : 0.0;
    if (steps) *steps = 1;
    return {{"return", {static_cast<double>(idx)}}, {"smaller", smaller}};
}

} // namespace

std::map<std::string, std::vector<double>> run_oracle(const std::string& algorithm,
                                                      const GraphInstance& inst, int* steps_out) {
    if (algorithm == "bfs") return oracle_bfs(inst, steps_out);
    if (algorithm == "bellman_ford" || algorithm == "dag_shortest_paths")
        return oracle_bellman(inst, steps_out);
    if (algorithm == "floyd_warshall") return oracle_floyd(inst, steps_out);
    if (algorithm == "mst_prim") return oracle_prim(inst, steps_out);
    if (algorithm == "minimum") return oracle_minimum(inst, steps_out);
    if (algorithm == "insertion_sort") return oracle_insertion_sort(inst, steps_out);
    if (algorithm == "binary_search") return oracle_binary_search(inst, steps_out);
    if (algorithm == "parallel_search") return oracle_parallel_search(inst, steps_out);
    throw ContractViolation("unknown algorithm '" + algorithm + "'");
}

} // namespace deqr::tasks
