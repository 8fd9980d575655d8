#pragma once

#include <cmath>
#include <vector>

#include "deqr/tensor.hpp"

namespace testutil {

inline deqr::ad::Tensor rand_tensor(deqr::Rng& rng, std::vector<std::int64_t> shape, double lo = -1.0,
                                    double hi = 1.0) {
    deqr::ad::Tensor t = deqr::ad::Tensor::zeros(std::move(shape));
    for (double& v : t.vec()) v = deqr::uniform(rng, lo, hi);
    return t;
}

inline double max_abs_diff(const deqr::ad::Tensor& a, const deqr::ad::Tensor& b) {
    if (!a.same_shape(b)) return std::numeric_limits<double>::infinity();
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a(i) - b(i)));
    return m;
}

inline double rel_diff(const deqr::ad::Tensor& a, const deqr::ad::Tensor& b) {
    deqr::ad::Tensor d = a;
    deqr::ad::axpy(-1.0, b, d);
    return deqr::ad::norm2(d) / (deqr::ad::norm2(b) + 1e-12);
}

} // namespace testutil
