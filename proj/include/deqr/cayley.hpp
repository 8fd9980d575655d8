#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "deqr/common.hpp"
#include "deqr/tasks.hpp"

namespace deqr::cayley {

/// 2x2 matrix over Z_n, row-major (a, b, c, d).
using Mat2 = std::array<int, 4>;

Mat2 mat_mul(const Mat2& x, const Mat2& y, int n);

/// All elements of SL(2, Z_n), canonically sorted. Built as the closure of
/// the two shear generators and their inverses from the identity.
std::vector<Mat2> sl2_group(int n);

struct CayleyGraph {
    int n = 0;
    std::vector<Mat2> vertices;
    // Unique directed pairs; contains both directions since the generator set
    // is closed under inversion. No self-loops.
    std::vector<std::array<int, 2>> edges;
    int order() const { return static_cast<int>(vertices.size()); }
};

/// Cayley graph of SL(2, Z_n) under {[[1,1],[0,1]], [[1,0],[1,1]]} and
/// their inverses.
CayleyGraph cayley_graph(int n);

/// Smallest n >= 2 whose graph order is at least num_nodes.
int choose_n(int num_nodes);

struct CgpAugmentation {
    int n = 0;          // modulus actually used
    int order = 0;      // Cayley graph order = total node count after augmentation
    int base_n = 0;
    int virtual_count = 0;
    std::int64_t cayley_edge_count = 0;
};

/// Expands the instance in place: appends virtual nodes up to the Cayley
/// order, adds generator edges and virtual self-loops as cayley-typed edges,
/// and marks the instance augmented. Augmenting twice is rejected.
CgpAugmentation attach_cgp(tasks::GraphInstance& instance);

} // namespace deqr::cayley
