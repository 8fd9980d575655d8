#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "deqr/tensor.hpp"

namespace deqr::ad {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
    Tape* tape = nullptr;
    std::int32_t id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
};

/// Reverse-mode tape. Nodes are recorded in topological order; backward walks
/// them in reverse, visiting each node once. A non-recording tape evaluates
/// the same ops without storing backward closures (inference mode).
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Tensor& gout)>;

    struct Node {
        Tensor value;
        BackwardFn backward; // empty for leaves and pruned nodes
        bool requires_grad = false;
    };

    explicit Tape(bool recording = true) : recording_(recording) {}

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    const Tensor& value(Var v) const { return node(v).value; }
    bool requires_grad(Var v) const { return node(v).requires_grad; }
    bool recording() const { return recording_; }

    std::size_t size() const { return nodes_.size(); }
    /// Drop nodes with id >= mark, keeping earlier ones (and their grads) intact.
    void truncate(std::size_t mark);
    void reset() { truncate(0); }

    /// Backward from a scalar loss with seed 1.
    void backward(Var loss);
    /// Backward from any node with an explicit cotangent of the same shape.
    void backward_seeded(Var out, const Tensor& seed);

    bool has_grad(Var v) const;
    const Tensor& grad(Var v) const;
    Tensor grad_or_zero(Var v) const;
    void zero_grads();

    void accumulate_grad(std::int32_t id, const Tensor& g);
    Var record(Tensor value, bool requires_grad, BackwardFn backward);

private:
    const Node& node(Var v) const;

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_; // parallel to nodes_; empty tensor means "no grad yet"
    bool recording_;
};

// Taped ops mirroring the raw kernels. All operands must live on one tape.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var relu(Var x);
Var leaky_relu_offset(Var x, double k, double alpha);
Var sigmoid(Var x);
Var tanh(Var x);
Var softmax_rows(Var x);
Var log_softmax_rows(Var x);
Var logsumexp(Var x);
Var concat(const std::vector<Var>& parts);
Var gather(Var values, const std::vector<std::int64_t>& indices);
Var scatter_segment_sum(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments);
Var scatter_segment_max(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments);
Var segment_log_softmax(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments);
Var layer_norm(Var x, double eps = 1e-5);
Var mean(Var x);
Var sum(Var x);
Var l2_norm(Var x);
Var transpose(Var x);
Var reshape(Var x, std::vector<std::int64_t> shape);
Var scale(Var x, double factor);

/// Vector-Jacobian product of y = f(z) at z with cotangent u. Throws
/// ContractViolation when u's shape differs from f(z)'s shape.
Tensor vjp(const std::function<Var(Tape&, Var)>& f, const Tensor& z, const Tensor& u);

/// Compares the tape gradient of a scalar-valued f against central
/// differences. Returns the max relative error over coordinates; a non-finite
/// f(x) yields +infinity so callers treat it as a failure.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps = 1e-5);

/// Generic evaluation by op name, used by tests and the bindings. Index-like
/// arguments (gather indices, segment ids, num_segments, k/alpha) are passed
/// as tensors of integral doubles.
Tensor eval(const std::string& op, const std::vector<Tensor>& args);

} // namespace deqr::ad
