#include "deqr/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace deqr::ad {

namespace {

std::int64_t shape_size(const std::vector<std::int64_t>& shape) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) {
        if (d < 0) throw ContractViolation("negative tensor dimension");
        n *= d;
    }
    return n;
}

using EigenMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using EigenConstMap = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

} // namespace

Tensor Tensor::zeros(std::vector<std::int64_t> shape) {
    Tensor t;
    std::int64_t n = shape_size(shape);
    t.shape_ = std::move(shape);
    t.data_.assign(static_cast<std::size_t>(n), 0.0);
    return t;
}

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

Tensor Tensor::scalar(double value) {
    return from_data({1, 1}, {value});
}

Tensor Tensor::from_data(std::vector<std::int64_t> shape, std::vector<double> data) {
    std::int64_t n = shape_size(shape);
    if (n != static_cast<std::int64_t>(data.size()))
        throw ContractViolation("tensor data size " + std::to_string(data.size()) +
                                " does not match shape size " + std::to_string(n));
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

std::int64_t Tensor::rows() const {
    if (shape_.empty()) return 0;
    return shape_[0];
}

std::int64_t Tensor::cols() const {
    if (shape_.size() < 2) return shape_.empty() ? 0 : 1;
    return shape_[1];
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
}

void axpy(double alpha, const Tensor& x, Tensor& y) {
    if (x.size() != y.size())
        throw ContractViolation("axpy size mismatch " + x.shape_str() + " vs " + y.shape_str());
    const double* xs = x.data();
    double* ys = y.data();
    for (std::int64_t i = 0; i < x.size(); ++i) ys[i] += alpha * xs[i];
}

double dot(const Tensor& a, const Tensor& b) {
    if (a.size() != b.size())
        throw ContractViolation("dot size mismatch " + a.shape_str() + " vs " + b.shape_str());
    return std::inner_product(a.vec().begin(), a.vec().end(), b.vec().begin(), 0.0);
}

double norm2(const Tensor& a) {
    return std::sqrt(dot(a, a));
}

namespace kernels {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractViolation(msg);
}

void require_2d(const Tensor& x, const char* op) {
    require(x.shape().size() == 2, std::string(op) + ": expected 2-D tensor, got " + x.shape_str());
}

enum class Broadcast { Same, Row, Col, Scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.same_shape(b)) return Broadcast::Same;
    if (b.size() == 1) return Broadcast::Scalar;
    if (a.shape().size() == 2) {
        std::int64_t r = a.shape()[0], c = a.shape()[1];
        if ((b.shape().size() == 1 && b.shape()[0] == c) ||
            (b.shape().size() == 2 && b.shape()[0] == 1 && b.shape()[1] == c))
            return Broadcast::Row;
        if (b.shape().size() == 2 && b.shape()[0] == r && b.shape()[1] == 1)
            return Broadcast::Col;
    }
    throw ContractViolation(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
    Broadcast kind = broadcast_kind(a, b, op);
    Tensor out = a;
    double* o = out.data();
    const double* bp = b.data();
    std::int64_t n = a.size();
    switch (kind) {
        case Broadcast::Same:
            for (std::int64_t i = 0; i < n; ++i) o[i] = f(o[i], bp[i]);
            break;
        case Broadcast::Scalar:
            for (std::int64_t i = 0; i < n; ++i) o[i] = f(o[i], bp[0]);
            break;
        case Broadcast::Row: {
            std::int64_t c = a.shape()[1];
            for (std::int64_t i = 0; i < n; ++i) o[i] = f(o[i], bp[i % c]);
            break;
        }
        case Broadcast::Col: {
            std::int64_t c = a.shape()[1];
            for (std::int64_t i = 0; i < n; ++i) o[i] = f(o[i], bp[i / c]);
            break;
        }
    }
    return out;
}

template <typename F>
Tensor map(const Tensor& x, F f) {
    Tensor out = x;
    for (double& v : out.vec()) v = f(v);
    return out;
}

} // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    require(a.shape()[1] == b.shape()[0],
            "matmul: inner dimensions disagree " + a.shape_str() + " vs " + b.shape_str());
    Tensor out = Tensor::zeros({a.shape()[0], b.shape()[1]});
    if (out.size() == 0 || a.shape()[1] == 0) return out;
    EigenConstMap ma(a.data(), a.shape()[0], a.shape()[1]);
    EigenConstMap mb(b.data(), b.shape()[0], b.shape()[1]);
    EigenMap mo(out.data(), out.shape()[0], out.shape()[1]);
    mo.noalias() = ma * mb;
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor relu(const Tensor& x) {
    return map(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

Tensor leaky_relu_offset(const Tensor& x, double k, double alpha) {
    return map(x, [k, alpha](double v) { return v >= k ? v : k + alpha * (v - k); });
}

Tensor sigmoid(const Tensor& x) {
    return map(x, [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
    });
}

Tensor tanh(const Tensor& x) {
    return map(x, [](double v) { return std::tanh(v); });
}

namespace {

// Shared row-wise softmax core: writes exp(x - rowmax) and returns row sums.
void row_softmax_parts(const Tensor& x, Tensor& shifted, std::vector<double>& rowmax,
                       std::vector<double>& rowsum) {
    std::int64_t r = x.shape()[0], c = x.shape()[1];
    rowmax.assign(static_cast<std::size_t>(r), -std::numeric_limits<double>::infinity());
    rowsum.assign(static_cast<std::size_t>(r), 0.0);
    const double* xs = x.data();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            rowmax[static_cast<std::size_t>(i)] = std::max(rowmax[static_cast<std::size_t>(i)], xs[i * c + j]);
    shifted = x;
    double* sh = shifted.data();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) {
            double e = xs[i * c + j] - rowmax[static_cast<std::size_t>(i)];
            sh[i * c + j] = e;
            rowsum[static_cast<std::size_t>(i)] += std::exp(e);
        }
}

} // namespace

Tensor softmax_rows(const Tensor& x) {
    require_2d(x, "softmax_rows");
    require(x.shape()[1] > 0, "softmax_rows: empty rows");
    Tensor shifted;
    std::vector<double> rowmax, rowsum;
    row_softmax_parts(x, shifted, rowmax, rowsum);
    std::int64_t r = x.shape()[0], c = x.shape()[1];
    double* sh = shifted.data();
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j)
            sh[i * c + j] = std::exp(sh[i * c + j]) / rowsum[static_cast<std::size_t>(i)];
    return shifted;
}

Tensor log_softmax_rows(const Tensor& x) {
    require_2d(x, "log_softmax_rows");
    require(x.shape()[1] > 0, "log_softmax_rows: empty rows");
    Tensor shifted;
    std::vector<double> rowmax, rowsum;
    row_softmax_parts(x, shifted, rowmax, rowsum);
    std::int64_t r = x.shape()[0], c = x.shape()[1];
    double* sh = shifted.data();
    for (std::int64_t i = 0; i < r; ++i) {
        double lse = std::log(rowsum[static_cast<std::size_t>(i)]);
        for (std::int64_t j = 0; j < c; ++j) sh[i * c + j] -= lse;
    }
    return shifted;
}

Tensor logsumexp(const Tensor& x) {
    require_2d(x, "logsumexp");
    require(x.shape()[1] > 0, "logsumexp: empty rows");
    Tensor shifted;
    std::vector<double> rowmax, rowsum;
    row_softmax_parts(x, shifted, rowmax, rowsum);
    std::int64_t r = x.shape()[0];
    Tensor out = Tensor::zeros({r, 1});
    for (std::int64_t i = 0; i < r; ++i)
        out(i) = rowmax[static_cast<std::size_t>(i)] + std::log(rowsum[static_cast<std::size_t>(i)]);
    return out;
}

Tensor concat(const std::vector<const Tensor*>& parts) {
    require(!parts.empty(), "concat: no inputs");
    std::int64_t r = -1, total = 0;
    for (const Tensor* p : parts) {
        require_2d(*p, "concat");
        if (r < 0) r = p->shape()[0];
        require(p->shape()[0] == r, "concat: row mismatch " + parts[0]->shape_str() + " vs " + p->shape_str());
        total += p->shape()[1];
    }
    Tensor out = Tensor::zeros({r, total});
    double* o = out.data();
    for (std::int64_t i = 0; i < r; ++i) {
        std::int64_t off = 0;
        for (const Tensor* p : parts) {
            std::int64_t c = p->shape()[1];
            const double* ps = p->data() + i * c;
            std::copy(ps, ps + c, o + i * total + off);
            off += c;
        }
    }
    return out;
}

Tensor gather(const Tensor& values, const std::vector<std::int64_t>& indices) {
    require_2d(values, "gather");
    std::int64_t r = values.shape()[0], c = values.shape()[1];
    Tensor out = Tensor::zeros({static_cast<std::int64_t>(indices.size()), c});
    double* o = out.data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::int64_t idx = indices[i];
        require(idx >= 0 && idx < r,
                "gather: index " + std::to_string(idx) + " out of range for " + values.shape_str());
        std::copy(values.data() + idx * c, values.data() + (idx + 1) * c,
                  o + static_cast<std::int64_t>(i) * c);
    }
    return out;
}

namespace {

void check_segments(const Tensor& values, const std::vector<std::int64_t>& segments,
                    std::int64_t num_segments, const char* op) {
    require_2d(values, op);
    require(static_cast<std::int64_t>(segments.size()) == values.shape()[0],
            std::string(op) + ": segment count " + std::to_string(segments.size()) +
                " does not match rows of " + values.shape_str());
    for (std::int64_t s : segments)
        require(s >= 0 && s < num_segments,
                std::string(op) + ": segment id " + std::to_string(s) + " out of range [0," +
                    std::to_string(num_segments) + ")");
}

} // namespace

Tensor scatter_segment_sum(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments) {
    check_segments(values, segments, num_segments, "scatter_segment_sum");
    std::int64_t c = values.shape()[1];
    Tensor out = Tensor::zeros({num_segments, c});
    for (std::size_t i = 0; i < segments.size(); ++i)
        for (std::int64_t j = 0; j < c; ++j)
            out(segments[i], j) += values(static_cast<std::int64_t>(i), j);
    return out;
}

Tensor scatter_segment_max(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments, std::vector<std::int64_t>* argmax) {
    check_segments(values, segments, num_segments, "scatter_segment_max");
    std::int64_t c = values.shape()[1];
    Tensor out = Tensor::full({num_segments, c}, kEmptySegmentMax);
    std::vector<std::int64_t> win(static_cast<std::size_t>(num_segments * c), -1);
    for (std::size_t i = 0; i < segments.size(); ++i) {
        std::int64_t s = segments[i];
        for (std::int64_t j = 0; j < c; ++j) {
            double v = values(static_cast<std::int64_t>(i), j);
            if (win[static_cast<std::size_t>(s * c + j)] < 0 || v > out(s, j)) {
                out(s, j) = v;
                win[static_cast<std::size_t>(s * c + j)] = static_cast<std::int64_t>(i);
            }
        }
    }
    if (argmax) *argmax = std::move(win);
    return out;
}

Tensor segment_log_softmax(const Tensor& values, const std::vector<std::int64_t>& segments,
                           std::int64_t num_segments) {
    check_segments(values, segments, num_segments, "segment_log_softmax");
    require(values.shape()[1] == 1, "segment_log_softmax: expected a column vector, got " + values.shape_str());
    std::vector<double> segmax(static_cast<std::size_t>(num_segments),
                               -std::numeric_limits<double>::infinity());
    std::vector<double> segsum(static_cast<std::size_t>(num_segments), 0.0);
    for (std::size_t i = 0; i < segments.size(); ++i)
        segmax[static_cast<std::size_t>(segments[i])] =
            std::max(segmax[static_cast<std::size_t>(segments[i])], values(static_cast<std::int64_t>(i)));
    for (std::size_t i = 0; i < segments.size(); ++i)
        segsum[static_cast<std::size_t>(segments[i])] +=
            std::exp(values(static_cast<std::int64_t>(i)) - segmax[static_cast<std::size_t>(segments[i])]);
    Tensor out = values;
    for (std::size_t i = 0; i < segments.size(); ++i) {
        std::size_t s = static_cast<std::size_t>(segments[i]);
        out(static_cast<std::int64_t>(i)) -= segmax[s] + std::log(segsum[s]);
    }
    return out;
}

Tensor layer_norm(const Tensor& x, double eps) {
    require_2d(x, "layer_norm");
    require(x.shape()[1] > 0, "layer_norm: empty rows");
    std::int64_t r = x.shape()[0], c = x.shape()[1];
    Tensor out = x;
    for (std::int64_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += x(i, j);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
        var /= static_cast<double>(c);
        double inv = 1.0 / std::sqrt(var + eps);
        for (std::int64_t j = 0; j < c; ++j) out(i, j) = (x(i, j) - mu) * inv;
    }
    return out;
}

Tensor mean(const Tensor& x) {
    require(x.size() > 0, "mean: empty tensor");
    double s = 0.0;
    for (double v : x.vec()) s += v;
    return Tensor::scalar(s / static_cast<double>(x.size()));
}

Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.vec()) s += v;
    return Tensor::scalar(s);
}

Tensor l2_norm(const Tensor& x) {
    return Tensor::scalar(norm2(x));
}

Tensor transpose(const Tensor& x) {
    require_2d(x, "transpose");
    std::int64_t r = x.shape()[0], c = x.shape()[1];
    Tensor out = Tensor::zeros({c, r});
    for (std::int64_t i = 0; i < r; ++i)
        for (std::int64_t j = 0; j < c; ++j) out(j, i) = x(i, j);
    return out;
}

Tensor reshape(const Tensor& x, std::vector<std::int64_t> shape) {
    Tensor out = Tensor::from_data(std::move(shape), x.vec());
    require(out.size() == x.size(), "reshape: size mismatch " + x.shape_str() + " vs " + out.shape_str());
    return out;
}

} // namespace kernels

} // namespace deqr::ad
