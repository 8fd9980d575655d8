#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "deqr/tape.hpp"
#include "test_util.hpp"

using namespace deqr;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using testutil::rand_tensor;

namespace {

constexpr double kPrimTol = 1e-6;

using Fn = std::function<Var(Tape&, Var)>;

double check(const Fn& f, const Tensor& x) { return ad::grad_check(f, x); }

} // namespace

TEST_CASE("grad check covers every primitive") {
    Rng rng(11);
    const Tensor x34 = rand_tensor(rng, {3, 4});
    const Tensor w45 = rand_tensor(rng, {4, 5});
    const Tensor x31 = rand_tensor(rng, {3, 1});

    SUBCASE("matmul lhs") {
        Tensor w = w45;
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::matmul(v, t.constant(w))); }, x34) < kPrimTol);
    }
    SUBCASE("matmul rhs") {
        Tensor a = x34;
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::matmul(t.constant(a), v)); }, w45) < kPrimTol);
    }
    SUBCASE("add broadcast row") {
        Tensor row = rand_tensor(rng, {1, 4});
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::add(v, t.constant(row))); }, x34) < kPrimTol);
        Tensor a = x34;
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::add(t.constant(a), v)); },
                    rand_tensor(rng, {1, 4})) < kPrimTol);
    }
    SUBCASE("sub broadcast col") {
        Tensor a = x34;
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::sub(t.constant(a), v)); },
                    rand_tensor(rng, {3, 1})) < kPrimTol);
    }
    SUBCASE("mul broadcast scalar") {
        Tensor a = x34;
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::mul(t.constant(a), v)); },
                    rand_tensor(rng, {1}, 0.2, 1.0)) < kPrimTol);
        CHECK(check([&](Tape& t, Var v) { return ad::sum(ad::mul(v, v)); }, x34) < kPrimTol);
    }
    SUBCASE("relu away from the kink") {
        Tensor x = rand_tensor(rng, {3, 4}, 0.2, 1.0);
        for (std::int64_t i = 0; i < x.size(); ++i)
            if (i % 2 == 0) x(i) = -x(i);
        CHECK(check([](Tape&, Var v) { return ad::sum(ad::relu(v)); }, x) < kPrimTol);
    }
    SUBCASE("leaky relu offset") {
        Tensor x = rand_tensor(rng, {2, 5}, -12.0, 2.0);
        for (double& v : x.vec())
            if (std::abs(v + 6.0) < 0.3) v += 1.0;
        CHECK(check([](Tape&, Var v) { return ad::sum(ad::leaky_relu_offset(v, -6.0, 0.01)); }, x) <
              kPrimTol);
    }
    SUBCASE("sigmoid tanh") {
        CHECK(check([](Tape&, Var v) { return ad::sum(ad::sigmoid(v)); }, x34) < kPrimTol);
        CHECK(check([](Tape&, Var v) { return ad::sum(ad::tanh(v)); }, x34) < kPrimTol);
    }
    SUBCASE("softmax and log softmax") {
        Tensor probe = rand_tensor(rng, {3, 4});
        CHECK(check([&](Tape& t, Var v) {
                  return ad::sum(ad::mul(ad::softmax_rows(v), t.constant(probe)));
              }, x34) < kPrimTol);
        CHECK(check([&](Tape& t, Var v) {
                  return ad::sum(ad::mul(ad::log_softmax_rows(v), t.constant(probe)));
              }, x34) < kPrimTol);
    }
    SUBCASE("logsumexp") {
        CHECK(check([](Tape&, Var v) { return ad::sum(ad::logsumexp(v)); }, x34) < kPrimTol);
    }
    SUBCASE("concat") {
        Tensor b = rand_tensor(rng, {3, 2});
        CHECK(check([&](Tape& t, Var v) {
                  Var c = ad::concat({v, t.constant(b)});
                  return ad::sum(ad::mul(c, c));
              }, x34) < kPrimTol);
    }
    SUBCASE("gather") {
        CHECK(check([](Tape&, Var v) {
                  Var g = ad::gather(v, {2, 0, 2, 1});
                  return ad::sum(ad::mul(g, g));
              }, x34) < kPrimTol);
    }
    SUBCASE("scatter segment sum") {
        CHECK(check([](Tape&, Var v) {
                  Var s = ad::scatter_segment_sum(v, {0, 1, 0}, 2);
                  return ad::sum(ad::mul(s, s));
              }, x34) < kPrimTol);
    }
    SUBCASE("scatter segment max") {
        // distinct entries keep the argmax stable under the probe shift
        Tensor x = Tensor::from_data({4, 2}, {0.1, 0.9, 0.45, 0.3, 0.8, 0.2, 0.6, 0.7});
        CHECK(check([](Tape&, Var v) {
                  Var s = ad::scatter_segment_max(v, {0, 0, 1, 1}, 2);
                  return ad::sum(ad::mul(s, s));
              }, x) < kPrimTol);
    }
    SUBCASE("segment log softmax") {
        Tensor probe = rand_tensor(rng, {3, 1});
        CHECK(check([&](Tape& t, Var v) {
                  Var s = ad::segment_log_softmax(v, {0, 0, 1}, 2);
                  return ad::sum(ad::mul(s, t.constant(probe)));
              }, x31) < kPrimTol);
    }
    SUBCASE("layer norm") {
        Tensor probe = rand_tensor(rng, {3, 4});
        CHECK(check([&](Tape& t, Var v) {
                  return ad::sum(ad::mul(ad::layer_norm(v), t.constant(probe)));
              }, x34) < kPrimTol);
    }
    SUBCASE("mean sum l2 scale") {
        CHECK(check([](Tape&, Var v) { return ad::mean(ad::mul(v, v)); }, x34) < kPrimTol);
        CHECK(check([](Tape&, Var v) { return ad::l2_norm(v); }, x34) < kPrimTol);
        CHECK(check([](Tape&, Var v) { return ad::scale(ad::sum(v), -2.5); }, x34) < kPrimTol);
    }
    SUBCASE("transpose reshape") {
        CHECK(check([](Tape&, Var v) {
                  Var y = ad::transpose(v);
                  return ad::sum(ad::mul(y, y));
              }, x34) < kPrimTol);
        CHECK(check([](Tape&, Var v) {
                  Var y = ad::reshape(v, {4, 3});
                  Var z = ad::matmul(y, ad::transpose(y));
                  return ad::sum(z);
              }, x34) < kPrimTol);
    }
}

TEST_CASE("composed expression gradient") {
    Rng rng(12);
    Tensor x = rand_tensor(rng, {4, 3});
    Tensor w1 = rand_tensor(rng, {3, 6});
    Tensor w2 = rand_tensor(rng, {6, 2});
    auto f = [&](Tape& t, Var v) {
        Var h = ad::relu(ad::add(ad::matmul(v, t.constant(w1)), t.constant(Tensor::full({1, 6}, 0.3))));
        Var o = ad::tanh(ad::matmul(h, t.constant(w2)));
        Var ls = ad::log_softmax_rows(o);
        return ad::add(ad::mean(ad::mul(ls, ls)), ad::l2_norm(v));
    };
    CHECK(ad::grad_check(f, x) < 1e-5);
}

TEST_CASE("vjp matches a finite-difference jacobian") {
    Rng rng(13);
    Tensor z = rand_tensor(rng, {2, 3});
    Tensor w = rand_tensor(rng, {3, 3});
    auto f = [&](Tape& t, Var v) { return ad::tanh(ad::matmul(ad::sigmoid(v), t.constant(w))); };

    Tensor u = rand_tensor(rng, {2, 3});
    Tensor got = ad::vjp(f, z, u);
    REQUIRE(got.same_shape(z));

    const double eps = 1e-6;
    for (std::int64_t i = 0; i < z.size(); ++i) {
        Tensor zp = z, zm = z;
        zp(i) += eps;
        zm(i) -= eps;
        Tape tp(false), tm(false);
        Tensor yp = tp.value(f(tp, tp.constant(zp)));
        Tensor ym = tm.value(f(tm, tm.constant(zm)));
        double expect = 0.0;
        for (std::int64_t j = 0; j < yp.size(); ++j) expect += u(j) * (yp(j) - ym(j)) / (2 * eps);
        CHECK(got(i) == doctest::Approx(expect).epsilon(1e-5));
    }

    CHECK_THROWS_AS(ad::vjp(f, z, Tensor::zeros({3, 2})), ContractViolation);
}

TEST_CASE("seeded backward accumulates and resets") {
    Tape t;
    Var x = t.leaf(Tensor::from_data({2}, {1.0, 2.0}), true);
    Var y = ad::mul(x, x);

    t.backward_seeded(y, Tensor::from_data({2}, {1.0, 1.0}));
    Tensor g1 = t.grad(x);
    CHECK(g1(0) == doctest::Approx(2.0));
    CHECK(g1(1) == doctest::Approx(4.0));

    // second backward without clearing adds in
    t.backward_seeded(y, Tensor::from_data({2}, {1.0, 1.0}));
    CHECK(t.grad(x)(0) == doctest::Approx(4.0));

    t.zero_grads();
    CHECK_FALSE(t.has_grad(x));
    t.backward_seeded(y, Tensor::from_data({2}, {0.5, 0.0}));
    CHECK(t.grad(x)(0) == doctest::Approx(1.0));
    CHECK(t.grad_or_zero(x)(1) == doctest::Approx(0.0));

    CHECK_THROWS_AS(t.backward_seeded(y, Tensor::zeros({3})), ContractViolation);
}

TEST_CASE("constants are pruned from backward") {
    Tape t;
    Var c = t.constant(Tensor::full({2}, 3.0));
    Var x = t.leaf(Tensor::full({2}, 2.0), true);
    Var y = ad::sum(ad::mul(x, c));
    t.backward(y);
    CHECK(t.grad(x)(0) == doctest::Approx(3.0));
    CHECK_FALSE(t.has_grad(c));
}

TEST_CASE("truncate keeps the prefix intact") {
    Tape t;
    Var x = t.leaf(Tensor::full({2}, 1.0), true);
    std::size_t mark = t.size();
    Var y1 = ad::sum(ad::mul(x, x));
    t.backward(y1);
    CHECK(t.grad(x)(0) == doctest::Approx(2.0));

    t.truncate(mark);
    CHECK(t.size() == mark);
    Var y2 = ad::sum(ad::scale(x, 5.0));
    t.zero_grads();
    t.backward(y2);
    CHECK(t.grad(x)(0) == doctest::Approx(5.0));
}

TEST_CASE("non-recording tape computes identical values") {
    Rng rng(14);
    Tensor x = rand_tensor(rng, {3, 3});
    Tape rec(true), inf(false);
    Var a = rec.constant(x), b = inf.constant(x);
    Tensor va = rec.value(ad::softmax_rows(ad::matmul(a, a)));
    Tensor vb = inf.value(ad::softmax_rows(ad::matmul(b, b)));
    CHECK(testutil::max_abs_diff(va, vb) == 0.0);
}

TEST_CASE("eval dispatcher mirrors the kernels") {
    Rng rng(15);
    Tensor a = rand_tensor(rng, {2, 3});
    Tensor b = rand_tensor(rng, {2, 3});
    CHECK(testutil::max_abs_diff(ad::eval("add", {a, b}), ad::kernels::add(a, b)) == 0.0);
    CHECK(testutil::max_abs_diff(ad::eval("relu", {a}), ad::kernels::relu(a)) == 0.0);
    Tensor idx = Tensor::from_data({2}, {1.0, 0.0});
    CHECK(testutil::max_abs_diff(ad::eval("gather", {a, idx}), ad::kernels::gather(a, {1, 0})) == 0.0);
    CHECK_THROWS_AS(ad::eval("nonsense", {a}), ContractViolation);
}
