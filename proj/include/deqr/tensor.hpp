#pragma once

#include <cstdint>
#include <vector>

#include "deqr/common.hpp"

namespace deqr::ad {

/// Dense row-major tensor of doubles. Rank is 1 or 2 everywhere in this
/// project; the solver treats any tensor as a flat vector.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<std::int64_t> shape);
    static Tensor full(std::vector<std::int64_t> shape, double value);
    static Tensor scalar(double value);
    static Tensor from_data(std::vector<std::int64_t> shape, std::vector<double> data);

    const std::vector<std::int64_t>& shape() const { return shape_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    std::int64_t rows() const;
    std::int64_t cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec() { return data_; }
    const std::vector<double>& vec() const { return data_; }

    double& operator()(std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator()(std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }
    double& operator()(std::int64_t r, std::int64_t c) { return data_[static_cast<std::size_t>(r * cols() + c)]; }
    double operator()(std::int64_t r, std::int64_t c) const { return data_[static_cast<std::size_t>(r * cols() + c)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    std::string shape_str() const;

private:
    std::vector<std::int64_t> shape_;
    std::vector<double> data_;
};

/// In-place y += alpha * x over raw storage; shapes must match.
void axpy(double alpha, const Tensor& x, Tensor& y);
double dot(const Tensor& a, const Tensor& b);
double norm2(const Tensor& a);

namespace kernels {

// Raw (untaped) kernels. Every kernel validates shapes and throws
// ContractViolation naming both shapes on mismatch.

Tensor matmul(const Tensor& a, const Tensor& b);
// add/sub/mul broadcast b against a: same shape, row vector [c]/[1,c],
// column [r,1], or scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
// Leaky ReLU with the kink moved to (k, k): x >= k ? x : k + alpha * (x - k).
Tensor leaky_relu_offset(const Tensor& x, double k, double alpha);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);
// Row-wise logsumexp: [r, c] -> [r, 1].
Tensor logsumexp(const Tensor& x);
// Concatenate 2-D tensors with equal row counts along columns.
Tensor concat(const std::vector<const Tensor*>& parts);
// Select rows: [r, c] + k indices -> [k, c].
Tensor gather(const Tensor& values, const std::vector<std::int64_t>& indices);
// Per-segment row reduction: values [k, c], segments of length k -> [num_segments, c].
Tensor scatter_segment_sum(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments);
// Empty segments produce kEmptySegmentMax; winners (for the gradient) are the
// lowest row index per segment/column.
Tensor scatter_segment_max(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments, std::vector<std::int64_t>* argmax = nullptr);
// log-softmax of a column vector within each segment: values [k, 1].
Tensor segment_log_softmax(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments);
// Row-wise layer norm without affine terms.
Tensor layer_norm(const Tensor& x, double eps = 1e-5);
Tensor mean(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor l2_norm(const Tensor& x);
Tensor transpose(const Tensor& x);
Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape);

inline constexpr double kEmptySegmentMax = -1e9;

} // namespace kernels

} // namespace deqr::ad
