#include "deqr/tape.hpp"

#include <cmath>
#include <utility>

namespace deqr::ad {

namespace {

void require(bool ok, const std::string& msg) {
    if (!ok) throw ContractViolation(msg);
}

Tape& same_tape(Var a, Var b) {
    require(a.valid() && b.valid(), "op on invalid Var");
    require(a.tape == b.tape, "operands live on different tapes");
    return *a.tape;
}

Tape& tape_of(Var a) {
    require(a.valid(), "op on invalid Var");
    return *a.tape;
}

/// Reduce a full-shaped gradient down to the shape of a broadcast operand.
Tensor reduce_to_shape(const Tensor& g, const std::vector<std::int64_t>& shape) {
    if (g.shape() == shape) return g;
    std::int64_t target = 1;
    for (std::int64_t d : shape) target *= d;
    if (target == 1) {
        Tensor out = Tensor::zeros(shape);
        double s = 0.0;
        for (double v : g.vec()) s += v;
        out.vec()[0] = s;
        return out;
    }
    std::int64_t r = g.shape()[0], c = g.shape()[1];
    Tensor out = Tensor::zeros(shape);
    if (target == c) { // row vector [c] or [1, c]
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) out.vec()[static_cast<std::size_t>(j)] += g(i, j);
        return out;
    }
    if (shape.size() == 2 && shape[0] == r && shape[1] == 1) {
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) out(i, 0) += g(i, j);
        return out;
    }
    throw ContractViolation("cannot reduce gradient to broadcast shape");
}

/// Expand a broadcast operand to the full shape (for mul gradients).
Tensor expand_like(const Tensor& b, const Tensor& like) {
    if (b.same_shape(like)) return b;
    Tensor out = Tensor::zeros(like.shape());
    std::int64_t r = like.rows(), c = like.cols();
    if (b.size() == 1) {
        std::fill(out.vec().begin(), out.vec().end(), b.vec()[0]);
    } else if (b.size() == c && (b.shape().size() == 1 || b.shape()[0] == 1)) {
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) out(i, j) = b.vec()[static_cast<std::size_t>(j)];
    } else {
        for (std::int64_t i = 0; i < r; ++i)
            for (std::int64_t j = 0; j < c; ++j) out(i, j) = b(i, 0);
    }
    return out;
}

} // namespace

const Tape::Node& Tape::node(Var v) const {
    require(v.valid() && v.tape == this && static_cast<std::size_t>(v.id) < nodes_.size(),
            "Var does not belong to this tape");
    return nodes_[static_cast<std::size_t>(v.id)];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad});
    grads_.emplace_back();
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::record(Tensor value, bool requires_grad, BackwardFn backward) {
    bool keep = recording_ && requires_grad;
    nodes_.push_back(Node{std::move(value), keep ? std::move(backward) : BackwardFn{}, keep});
    grads_.emplace_back();
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

void Tape::truncate(std::size_t mark) {
    require(mark <= nodes_.size(), "truncate beyond tape size");
    nodes_.resize(mark);
    grads_.resize(mark);
}

void Tape::accumulate_grad(std::int32_t id, const Tensor& g) {
    Tensor& slot = grads_[static_cast<std::size_t>(id)];
    if (slot.empty())
        slot = g;
    else
        axpy(1.0, g, slot);
}

void Tape::backward(Var loss) {
    require(value(loss).size() == 1, "backward expects a scalar loss, got " + value(loss).shape_str());
    Tensor seed = value(loss);
    std::fill(seed.vec().begin(), seed.vec().end(), 1.0);
    backward_seeded(loss, seed);
}

void Tape::backward_seeded(Var out, const Tensor& seed) {
    const Node& n = node(out);
    require(seed.same_shape(n.value),
            "backward seed shape " + seed.shape_str() + " does not match output " + n.value.shape_str());
    require(recording_, "backward on a non-recording tape");
    accumulate_grad(out.id, seed);
    for (std::int32_t i = out.id; i >= 0; --i) {
        const Node& cur = nodes_[static_cast<std::size_t>(i)];
        const Tensor& g = grads_[static_cast<std::size_t>(i)];
        if (g.empty() || !cur.backward) continue;
        cur.backward(*this, g);
    }
}

bool Tape::has_grad(Var v) const {
    node(v);
    return !grads_[static_cast<std::size_t>(v.id)].empty();
}

const Tensor& Tape::grad(Var v) const {
    node(v);
    const Tensor& g = grads_[static_cast<std::size_t>(v.id)];
    require(!g.empty(), "no gradient recorded for this Var");
    return g;
}

Tensor Tape::grad_or_zero(Var v) const {
    node(v);
    const Tensor& g = grads_[static_cast<std::size_t>(v.id)];
    if (g.empty()) return Tensor::zeros(node(v).value.shape());
    return g;
}

void Tape::zero_grads() {
    for (Tensor& g : grads_) g = Tensor();
}

namespace {

template <typename Fwd, typename Bwd>
Var binary_op(Var a, Var b, Fwd fwd, Bwd bwd) {
    Tape& t = same_tape(a, b);
    Tensor val = fwd(t.value(a), t.value(b));
    bool rg = t.requires_grad(a) || t.requires_grad(b);
    return t.record(std::move(val), rg, [a, b, bwd](Tape& t2, const Tensor& g) { bwd(t2, a, b, g); });
}

template <typename Fwd, typename Bwd>
Var unary_op(Var x, Fwd fwd, Bwd bwd) {
    Tape& t = tape_of(x);
    Tensor val = fwd(t.value(x));
    return t.record(std::move(val), t.requires_grad(x),
                    [x, bwd](Tape& t2, const Tensor& g) { bwd(t2, x, g); });
}

} // namespace

Var matmul(Var a, Var b) {
    return binary_op(
        a, b, [](const Tensor& x, const Tensor& y) { return kernels::matmul(x, y); },
        [](Tape& t, Var a2, Var b2, const Tensor& g) {
            if (t.requires_grad(a2))
                t.accumulate_grad(a2.id, kernels::matmul(g, kernels::transpose(t.value(b2))));
            if (t.requires_grad(b2))
                t.accumulate_grad(b2.id, kernels::matmul(kernels::transpose(t.value(a2)), g));
        });
}

Var add(Var a, Var b) {
    return binary_op(
        a, b, [](const Tensor& x, const Tensor& y) { return kernels::add(x, y); },
        [](Tape& t, Var a2, Var b2, const Tensor& g) {
            if (t.requires_grad(a2)) t.accumulate_grad(a2.id, g);
            if (t.requires_grad(b2)) t.accumulate_grad(b2.id, reduce_to_shape(g, t.value(b2).shape()));
        });
}

Var sub(Var a, Var b) {
    return binary_op(
        a, b, [](const Tensor& x, const Tensor& y) { return kernels::sub(x, y); },
        [](Tape& t, Var a2, Var b2, const Tensor& g) {
            if (t.requires_grad(a2)) t.accumulate_grad(a2.id, g);
            if (t.requires_grad(b2)) {
                Tensor gb = reduce_to_shape(g, t.value(b2).shape());
                for (double& v : gb.vec()) v = -v;
                t.accumulate_grad(b2.id, gb);
            }
        });
}

Var mul(Var a, Var b) {
    return binary_op(
        a, b, [](const Tensor& x, const Tensor& y) { return kernels::mul(x, y); },
        [](Tape& t, Var a2, Var b2, const Tensor& g) {
            const Tensor& av = t.value(a2);
            const Tensor& bv = t.value(b2);
            if (t.requires_grad(a2))
                t.accumulate_grad(a2.id, kernels::mul(g, expand_like(bv, av)));
            if (t.requires_grad(b2))
                t.accumulate_grad(b2.id, reduce_to_shape(kernels::mul(g, av), bv.shape()));
        });
}

Var relu(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::relu(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            const Tensor& v = t.value(x2);
            Tensor gx = g;
            for (std::int64_t i = 0; i < gx.size(); ++i)
                if (v(i) <= 0.0) gx(i) = 0.0;
            t.accumulate_grad(x2.id, gx);
        });
}

Var leaky_relu_offset(Var x, double k, double alpha) {
    return unary_op(
        x, [k, alpha](const Tensor& v) { return kernels::leaky_relu_offset(v, k, alpha); },
        [k, alpha](Tape& t, Var x2, const Tensor& g) {
            const Tensor& v = t.value(x2);
            Tensor gx = g;
            for (std::int64_t i = 0; i < gx.size(); ++i)
                if (v(i) < k) gx(i) *= alpha;
            t.accumulate_grad(x2.id, gx);
        });
}

Var sigmoid(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::sigmoid(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            Tensor s = kernels::sigmoid(t.value(x2));
            Tensor gx = g;
            for (std::int64_t i = 0; i < gx.size(); ++i) gx(i) *= s(i) * (1.0 - s(i));
            t.accumulate_grad(x2.id, gx);
        });
}

Var tanh(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::tanh(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            Tensor th = kernels::tanh(t.value(x2));
            Tensor gx = g;
            for (std::int64_t i = 0; i < gx.size(); ++i) gx(i) *= 1.0 - th(i) * th(i);
            t.accumulate_grad(x2.id, gx);
        });
}

Var softmax_rows(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::softmax_rows(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            Tensor s = kernels::softmax_rows(t.value(x2));
            std::int64_t r = s.rows(), c = s.cols();
            Tensor gx = Tensor::zeros(s.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                double inner = 0.0;
                for (std::int64_t j = 0; j < c; ++j) inner += g(i, j) * s(i, j);
                for (std::int64_t j = 0; j < c; ++j) gx(i, j) = s(i, j) * (g(i, j) - inner);
            }
            t.accumulate_grad(x2.id, gx);
        });
}

Var log_softmax_rows(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::log_softmax_rows(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            Tensor s = kernels::softmax_rows(t.value(x2));
            std::int64_t r = s.rows(), c = s.cols();
            Tensor gx = Tensor::zeros(s.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                double gsum = 0.0;
                for (std::int64_t j = 0; j < c; ++j) gsum += g(i, j);
                for (std::int64_t j = 0; j < c; ++j) gx(i, j) = g(i, j) - s(i, j) * gsum;
            }
            t.accumulate_grad(x2.id, gx);
        });
}

Var logsumexp(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::logsumexp(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            Tensor s = kernels::softmax_rows(t.value(x2));
            std::int64_t r = s.rows(), c = s.cols();
            Tensor gx = Tensor::zeros(s.shape());
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j) gx(i, j) = g(i, 0) * s(i, j);
            t.accumulate_grad(x2.id, gx);
        });
}

Var concat(const std::vector<Var>& parts) {
    require(!parts.empty(), "concat: no inputs");
    Tape& t = tape_of(parts[0]);
    std::vector<const Tensor*> vals;
    bool rg = false;
    for (Var p : parts) {
        same_tape(parts[0], p);
        vals.push_back(&t.value(p));
        rg = rg || t.requires_grad(p);
    }
    Tensor out = kernels::concat(vals);
    std::vector<Var> ps = parts;
    return t.record(std::move(out), rg, [ps](Tape& t2, const Tensor& g) {
        std::int64_t r = g.rows(), off = 0, total = g.cols();
        for (Var p : ps) {
            std::int64_t c = t2.value(p).cols();
            if (t2.requires_grad(p)) {
                Tensor gp = Tensor::zeros({r, c});
                for (std::int64_t i = 0; i < r; ++i)
                    for (std::int64_t j = 0; j < c; ++j) gp(i, j) = g.data()[i * total + off + j];
                t2.accumulate_grad(p.id, gp);
            }
            off += c;
        }
    });
}

Var gather(Var values, const std::vector<std::int64_t>& indices) {
    return unary_op(
        values, [&indices](const Tensor& v) { return kernels::gather(v, indices); },
        [indices](Tape& t, Var v2, const Tensor& g) {
            const Tensor& src = t.value(v2);
            Tensor gx = Tensor::zeros(src.shape());
            std::int64_t c = src.cols();
            for (std::size_t i = 0; i < indices.size(); ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    gx(indices[i], j) += g(static_cast<std::int64_t>(i), j);
            t.accumulate_grad(v2.id, gx);
        });
}

Var scatter_segment_sum(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments) {
    return unary_op(
        values,
        [&segments, num_segments](const Tensor& v) {
            return kernels::scatter_segment_sum(v, segments, num_segments);
        },
        [segments](Tape& t, Var v2, const Tensor& g) {
            const Tensor& src = t.value(v2);
            Tensor gx = Tensor::zeros(src.shape());
            std::int64_t c = src.cols();
            for (std::size_t i = 0; i < segments.size(); ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    gx(static_cast<std::int64_t>(i), j) = g(segments[i], j);
            t.accumulate_grad(v2.id, gx);
        });
}

Var scatter_segment_max(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments) {
    Tape& t = tape_of(values);
    std::vector<std::int64_t> argmax;
    Tensor out = kernels::scatter_segment_max(t.value(values), segments, num_segments, &argmax);
    std::int64_t c = out.cols();
    Var v2 = values;
    return t.record(std::move(out), t.requires_grad(values),
                    [v2, argmax, c](Tape& t2, const Tensor& g) {
                        Tensor gx = Tensor::zeros(t2.value(v2).shape());
                        for (std::size_t k = 0; k < argmax.size(); ++k) {
                            std::int64_t win = argmax[k];
                            if (win < 0) continue;
                            std::int64_t s = static_cast<std::int64_t>(k) / c;
                            std::int64_t j = static_cast<std::int64_t>(k) % c;
                            gx(win, j) += g(s, j);
                        }
                        t2.accumulate_grad(v2.id, gx);
                    });
}

Var segment_log_softmax(Var values, const std::vector<std::int64_t>& segments, std::int64_t num_segments) {
    return unary_op(
        values,
        [&segments, num_segments](const Tensor& v) {
            return kernels::segment_log_softmax(v, segments, num_segments);
        },
        [segments, num_segments](Tape& t, Var v2, const Tensor& g) {
            // dv_i = g_i - softmax_i * sum_{j in segment(i)} g_j
            Tensor logs = kernels::segment_log_softmax(t.value(v2), segments, num_segments);
            std::vector<double> gsum(static_cast<std::size_t>(num_segments), 0.0);
            for (std::size_t i = 0; i < segments.size(); ++i)
                gsum[static_cast<std::size_t>(segments[i])] += g(static_cast<std::int64_t>(i));
            Tensor gx = g;
            for (std::size_t i = 0; i < segments.size(); ++i)
                gx(static_cast<std::int64_t>(i)) -=
                    std::exp(logs(static_cast<std::int64_t>(i))) * gsum[static_cast<std::size_t>(segments[i])];
            t.accumulate_grad(v2.id, gx);
        });
}

Var layer_norm(Var x, double eps) {
    return unary_op(
        x, [eps](const Tensor& v) { return kernels::layer_norm(v, eps); },
        [eps](Tape& t, Var x2, const Tensor& g) {
            const Tensor& v = t.value(x2);
            Tensor xhat = kernels::layer_norm(v, eps);
            std::int64_t r = v.rows(), c = v.cols();
            Tensor gx = Tensor::zeros(v.shape());
            for (std::int64_t i = 0; i < r; ++i) {
                double mu = 0.0;
                for (std::int64_t j = 0; j < c; ++j) mu += v(i, j);
                mu /= static_cast<double>(c);
                double var = 0.0;
                for (std::int64_t j = 0; j < c; ++j) var += (v(i, j) - mu) * (v(i, j) - mu);
                var /= static_cast<double>(c);
                double inv = 1.0 / std::sqrt(var + eps);
                double gmean = 0.0, gxmean = 0.0;
                for (std::int64_t j = 0; j < c; ++j) {
                    gmean += g(i, j);
                    gxmean += g(i, j) * xhat(i, j);
                }
                gmean /= static_cast<double>(c);
                gxmean /= static_cast<double>(c);
                for (std::int64_t j = 0; j < c; ++j)
                    gx(i, j) = inv * (g(i, j) - gmean - xhat(i, j) * gxmean);
            }
            t.accumulate_grad(x2.id, gx);
        });
}

Var mean(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::mean(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            const Tensor& v = t.value(x2);
            Tensor gx = Tensor::full(v.shape(), g(0) / static_cast<double>(v.size()));
            t.accumulate_grad(x2.id, gx);
        });
}

Var sum(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::sum(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            t.accumulate_grad(x2.id, Tensor::full(t.value(x2).shape(), g(0)));
        });
}

Var l2_norm(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::l2_norm(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            const Tensor& v = t.value(x2);
            double nrm = norm2(v);
            Tensor gx = v;
            double f = g(0) / std::max(nrm, 1e-12);
            for (double& e : gx.vec()) e *= f;
            t.accumulate_grad(x2.id, gx);
        });
}

Var transpose(Var x) {
    return unary_op(
        x, [](const Tensor& v) { return kernels::transpose(v); },
        [](Tape& t, Var x2, const Tensor& g) {
            t.accumulate_grad(x2.id, kernels::transpose(g));
        });
}

Var reshape(Var x, std::vector<std::int64_t> shape) {
    return unary_op(
        x, [&shape](const Tensor& v) { return kernels::reshape(v, shape); },
        [](Tape& t, Var x2, const Tensor& g) {
            t.accumulate_grad(x2.id, kernels::reshape(g, t.value(x2).shape()));
        });
}

Var scale(Var x, double factor) {
    Tape& t = tape_of(x);
    return mul(x, t.constant(Tensor::scalar(factor)));
}

Tensor vjp(const std::function<Var(Tape&, Var)>& f, const Tensor& z, const Tensor& u) {
    Tape t(true);
    Var zv = t.leaf(z, true);
    Var y = f(t, zv);
    if (!t.value(y).same_shape(u))
        throw ContractViolation("vjp cotangent shape " + u.shape_str() + " does not match output " +
                                t.value(y).shape_str());
    t.backward_seeded(y, u);
    return t.grad_or_zero(zv);
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double eps) {
    auto eval_at = [&f](const Tensor& p) -> double {
        Tape t(false);
        Var pv = t.leaf(p, false);
        Var y = f(t, pv);
        if (t.value(y).size() != 1)
            throw ContractViolation("grad_check expects a scalar-valued function");
        return t.value(y)(0);
    };
    Tape t(true);
    Var xv = t.leaf(x, true);
    Var y = f(t, xv);
    if (t.value(y).size() != 1)
        throw ContractViolation("grad_check expects a scalar-valued function");
    if (!t.value(y).all_finite()) return std::numeric_limits<double>::infinity();
    t.backward(y);
    Tensor analytic = t.grad_or_zero(xv);

    double worst = 0.0;
    Tensor probe = x;
    for (std::int64_t i = 0; i < x.size(); ++i) {
        double orig = probe(i);
        probe(i) = orig + eps;
        double fp = eval_at(probe);
        probe(i) = orig - eps;
        double fm = eval_at(probe);
        probe(i) = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) return std::numeric_limits<double>::infinity();
        double numeric = (fp - fm) / (2.0 * eps);
        double err = std::abs(analytic(i) - numeric) / (std::abs(numeric) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

namespace {

std::vector<std::int64_t> to_indices(const Tensor& t) {
    std::vector<std::int64_t> out;
    out.reserve(static_cast<std::size_t>(t.size()));
    for (double v : t.vec()) out.push_back(static_cast<std::int64_t>(std::llround(v)));
    return out;
}

} // namespace

Tensor eval(const std::string& op, const std::vector<Tensor>& args) {
    auto arity = [&](std::size_t n) {
        if (args.size() != n)
            throw ContractViolation("eval(" + op + "): expected " + std::to_string(n) + " args, got " +
                                    std::to_string(args.size()));
    };
    using namespace kernels;
    if (op == "matmul") { arity(2); return matmul(args[0], args[1]); }
    if (op == "add") { arity(2); return add(args[0], args[1]); }
    if (op == "sub") { arity(2); return sub(args[0], args[1]); }
    if (op == "mul") { arity(2); return mul(args[0], args[1]); }
    if (op == "relu") { arity(1); return relu(args[0]); }
    if (op == "leaky_relu_offset") { arity(3); return leaky_relu_offset(args[0], args[1](0), args[2](0)); }
    if (op == "sigmoid") { arity(1); return sigmoid(args[0]); }
    if (op == "tanh") { arity(1); return tanh(args[0]); }
    if (op == "softmax_rows") { arity(1); return softmax_rows(args[0]); }
    if (op == "log_softmax_rows") { arity(1); return log_softmax_rows(args[0]); }
    if (op == "logsumexp") { arity(1); return logsumexp(args[0]); }
    if (op == "concat") {
        std::vector<const Tensor*> parts;
        for (const Tensor& a : args) parts.push_back(&a);
        return concat(parts);
    }
    if (op == "gather") { arity(2); return gather(args[0], to_indices(args[1])); }
    if (op == "scatter_segment_sum") {
        arity(3);
        return scatter_segment_sum(args[0], to_indices(args[1]), static_cast<std::int64_t>(args[2](0)));
    }
    if (op == "scatter_segment_max") {
        arity(3);
        return scatter_segment_max(args[0], to_indices(args[1]), static_cast<std::int64_t>(args[2](0)));
    }
    if (op == "segment_log_softmax") {
        arity(3);
        return segment_log_softmax(args[0], to_indices(args[1]), static_cast<std::int64_t>(args[2](0)));
    }
    if (op == "layer_norm") { arity(1); return layer_norm(args[0]); }
    if (op == "mean") { arity(1); return mean(args[0]); }
    if (op == "sum") { arity(1); return sum(args[0]); }
    if (op == "l2_norm") { arity(1); return l2_norm(args[0]); }
    if (op == "transpose") { arity(1); return transpose(args[0]); }
    if (op == "reshape") { arity(2); return reshape(args[0], to_indices(args[1])); }
    throw ContractViolation("eval: unknown op '" + op + "'");
}

} // namespace deqr::ad
