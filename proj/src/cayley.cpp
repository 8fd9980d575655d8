#include "deqr/cayley.hpp"

#include <algorithm>
#include <map>
#include <queue>
#include <set>

namespace deqr::cayley {

Mat2 mat_mul(const Mat2& x, const Mat2& y, int n) {
    auto m = [n](long long v) { return static_cast<int>(((v % n) + n) % n); };
    return Mat2{m(1LL * x[0] * y[0] + 1LL * x[1] * y[2]), m(1LL * x[0] * y[1] + 1LL * x[1] * y[3]),
                m(1LL * x[2] * y[0] + 1LL * x[3] * y[2]), m(1LL * x[2] * y[1] + 1LL * x[3] * y[3])};
}

namespace {

std::vector<Mat2> generators(int n) {
    auto m = [n](int v) { return ((v % n) + n) % n; };
    return {Mat2{1, 1, 0, 1}, Mat2{1, 0, 1, 1}, Mat2{1, m(-1), 0, 1}, Mat2{1, 0, m(-1), 1}};
}

} // namespace

std::vector<Mat2> sl2_group(int n) {
    if (n < 2) throw ContractViolation("sl2_group: modulus must be >= 2, got " + std::to_string(n));
    const std::vector<Mat2> gens = generators(n);
    std::set<Mat2> seen;
    std::queue<Mat2> frontier;
    Mat2 id{1, 0, 0, 1};
    seen.insert(id);
    frontier.push(id);
    while (!frontier.empty()) {
        Mat2 cur = frontier.front();
        frontier.pop();
        for (const Mat2& g : gens) {
            Mat2 nxt = mat_mul(cur, g, n);
            if (seen.insert(nxt).second) frontier.push(nxt);
        }
    }
    return {seen.begin(), seen.end()};
}

CayleyGraph cayley_graph(int n) {
    CayleyGraph g;
    g.n = n;
    g.vertices = sl2_group(n);
    std::map<Mat2, int> index;
    for (std::size_t i = 0; i < g.vertices.size(); ++i) index[g.vertices[i]] = static_cast<int>(i);
    const std::vector<Mat2> gens = generators(n);
    std::set<std::array<int, 2>> edges;
    for (std::size_t i = 0; i < g.vertices.size(); ++i)
        for (const Mat2& gen : gens) {
            int j = index.at(mat_mul(g.vertices[i], gen, n));
            if (static_cast<int>(i) != j) edges.insert({static_cast<int>(i), j});
        }
    g.edges.assign(edges.begin(), edges.end());
    return g;
}

int choose_n(int num_nodes) {
    if (num_nodes < 1) throw ContractViolation("choose_n: need a positive node count");
    for (int n = 2;; ++n) {
        CayleyGraph g = cayley_graph(n);
        if (g.order() >= num_nodes) return n;
    }
}

CgpAugmentation attach_cgp(tasks::GraphInstance& instance) {
    if (instance.cgp_augmented)
        throw ContractViolation("attach_cgp: instance is already augmented");
    if (instance.n <= 0) throw ContractViolation("attach_cgp: empty instance");

    CgpAugmentation aug;
    aug.n = choose_n(instance.n);
    CayleyGraph g = cayley_graph(aug.n);
    aug.order = g.order();
    aug.base_n = instance.n;
    aug.virtual_count = aug.order - instance.n;

    instance.base_n = instance.n;
    instance.n = aug.order;
    if (instance.edge_types.size() != instance.edges.size())
        instance.edge_types.assign(instance.edges.size(), 0);
    // Base node i is Cayley vertex i; surplus vertices become virtual nodes.
    for (const auto& e : g.edges) {
        instance.edges.push_back(e);
        instance.edge_types.push_back(1);
        ++aug.cayley_edge_count;
    }
    for (int v = aug.base_n; v < aug.order; ++v) {
        instance.edges.push_back({v, v});
        instance.edge_types.push_back(1);
        ++aug.cayley_edge_count;
    }
    instance.cgp_augmented = true;
    return aug;
}

} // namespace deqr::cayley
