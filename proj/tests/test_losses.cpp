#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <set>

#include "deqr/cayley.hpp"
#include "deqr/losses.hpp"
#include "deqr/tasks.hpp"
#include "test_util.hpp"

using namespace deqr;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

tasks::FeatureSpec out_spec(std::string name, tasks::DType d,
                            tasks::Location loc = tasks::Location::Node) {
    tasks::FeatureSpec s;
    s.name = std::move(name);
    s.stage = tasks::Stage::Output;
    s.location = loc;
    s.dtype = d;
    return s;
}

Tensor col(const std::vector<double>& v) {
    return Tensor::from_data({static_cast<std::int64_t>(v.size()), 1}, v);
}

Tensor mat(std::int64_t r, std::int64_t c, const std::vector<double>& v) {
    return Tensor::from_data({r, c}, v);
}

double scalar_of(const Tape& t, Var v) { return t.value(v)(0); }

/// Hand-assembled decoded features over a bare instance; the tape member must
/// outlive every Var handed out, so fixtures live on the stack and never move.
struct SynthFixture {
    Tape t;
    tasks::GraphInstance inst;
    model::GraphPlan plan;
    std::vector<model::DecodedFeature> feats;

    SynthFixture() {
        inst.algorithm = "synthetic";
        plan.inst = &inst;
    }

    Var add(tasks::FeatureSpec spec, const Tensor& scores, std::vector<double> target,
            std::vector<std::int64_t> segments = {}, std::int64_t num_segments = 0,
            std::vector<std::int64_t> candidates = {}, bool grad = false) {
        inst.features[spec.name] = std::move(target);
        model::DecodedFeature f;
        f.spec = std::move(spec);
        f.scores = t.leaf(scores, grad);
        f.segments = std::move(segments);
        f.num_segments = num_segments;
        f.candidates = std::move(candidates);
        feats.push_back(f);
        return f.scores;
    }

    double loss() { return scalar_of(t, eq::task_loss(t, feats, plan)); }
    double loss_of(std::size_t i) {
        std::vector<model::DecodedFeature> one{feats[i]};
        return scalar_of(t, eq::task_loss(t, one, plan));
    }
};

double log_sigmoid(double z) {
    // Stable log sigma(z) evaluated without forming exp(z) for large z.
    return z >= 0.0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

/// Independent reading of the per-feature objectives straight from the score
/// tensors and targets: squared-error mean for scalars, per-node binary
/// cross-entropy for masks, picked log-probability means for the rest.
double oracle_task_loss(const Tape& t, const std::vector<model::DecodedFeature>& decoded,
                        const tasks::GraphInstance& inst) {
    double total = 0.0;
    for (const model::DecodedFeature& f : decoded) {
        const std::vector<double>& y = inst.features.at(f.spec.name);
        const Tensor& s = t.value(f.scores);
        switch (f.spec.dtype) {
            case tasks::DType::Scalar: {
                double sq = 0.0;
                for (std::int64_t i = 0; i < s.size(); ++i) {
                    double d = s(i) - y[static_cast<std::size_t>(i)];
                    sq += d * d;
                }
                total += sq / static_cast<double>(s.size());
                break;
            }
            case tasks::DType::Mask: {
                double acc = 0.0;
                for (std::int64_t i = 0; i < s.rows(); ++i) {
                    double z = s(i, 0);
                    acc += y[static_cast<std::size_t>(i)] == 1.0 ? log_sigmoid(z) : log_sigmoid(-z);
                }
                total += -acc / static_cast<double>(s.rows());
                break;
            }
            case tasks::DType::MaskOne: {
                std::size_t idx = static_cast<std::size_t>(
                    std::find(y.begin(), y.end(), 1.0) - y.begin());
                total += -s(static_cast<std::int64_t>(idx), 0);
                break;
            }
            case tasks::DType::Categorical: {
                double acc = 0.0;
                for (std::int64_t i = 0; i < s.rows(); ++i)
                    acc += s(i, static_cast<std::int64_t>(std::llround(y[static_cast<std::size_t>(i)])));
                total += -acc / static_cast<double>(s.rows());
                break;
            }
            case tasks::DType::Pointer: {
                if (f.spec.location == tasks::Location::Graph) {
                    total += -s(static_cast<std::int64_t>(std::llround(y.at(0))), 0);
                } else {
                    double acc = 0.0;
                    for (std::size_t r = 0; r < f.segments.size(); ++r) {
                        std::size_t seg = static_cast<std::size_t>(f.segments[r]);
                        if (f.candidates[r] == static_cast<std::int64_t>(std::llround(y[seg])))
                            acc += s(static_cast<std::int64_t>(r), 0);
                    }
                    total += -acc / static_cast<double>(f.num_segments);
                }
                break;
            }
            case tasks::DType::PermutationPointer: {
                double acc = 0.0;
                for (std::int64_t v = 0; v < s.rows(); ++v)
                    acc += s(v, static_cast<std::int64_t>(std::llround(y[static_cast<std::size_t>(v)])));
                total += -acc / static_cast<double>(s.rows());
                break;
            }
        }
    }
    return total;
}

double dist_between(const std::vector<Tensor>& a, std::size_t i, const std::vector<Tensor>& b,
                    std::size_t j) {
    Tensor d = a[i];
    ad::axpy(-1.0, b[j], d);
    return ad::norm2(d);
}

/// Exhaustive monotone matching of the given trajectory rows onto teacher
/// columns 1..teacher.size()-2 (strictly increasing, or non-decreasing when
/// rows outnumber columns). Returns the unnormalized best cost.
double brute_dp_part(const std::vector<Tensor>& traj, const std::vector<Tensor>& teacher,
                     const std::vector<int>& rows) {
    const int last_col = static_cast<int>(teacher.size()) - 2;
    const int n = static_cast<int>(rows.size());
    const bool repeats = n > last_col;
    double best = std::numeric_limits<double>::infinity();
    std::function<void(int, int, double)> rec = [&](int i, int lo, double acc) {
        if (i == n) {
            best = std::min(best, acc);
            return;
        }
        for (int c = lo; c <= last_col; ++c)
            rec(i + 1, repeats ? c : c + 1,
                acc + dist_between(traj, static_cast<std::size_t>(rows[static_cast<std::size_t>(i)]),
                                   teacher, static_cast<std::size_t>(c)));
    };
    rec(0, 1, 0.0);
    return best;
}

double brute_alignment_value(const std::vector<Tensor>& traj, const std::vector<Tensor>& teacher) {
    double last = dist_between(traj, traj.size() - 1, teacher, teacher.size() - 1);
    const int interior = static_cast<int>(traj.size()) - 2;
    if (interior <= 0 || static_cast<int>(teacher.size()) - 2 < 1) return last;
    std::vector<int> rows(static_cast<std::size_t>(interior));
    std::iota(rows.begin(), rows.end(), 1);
    return brute_dp_part(traj, teacher, rows) / static_cast<double>(interior) + last;
}

std::vector<Tensor> random_states(Rng& rng, std::size_t count, std::vector<std::int64_t> shape) {
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < count; ++i) out.push_back(testutil::rand_tensor(rng, shape));
    return out;
}

/// Checks the reported matches form a valid monotone matching whose summed
/// distances reproduce dp_part.
void check_matches(const eq::AlignmentResult& res, const std::vector<Tensor>& traj,
                   const std::vector<Tensor>& teacher) {
    const int last_col = static_cast<int>(teacher.size()) - 2;
    REQUIRE(res.matches.size() == res.rows.size());
    double sum = 0.0;
    int prev = 0;
    for (std::size_t k = 0; k < res.matches.size(); ++k) {
        auto [ri, j] = res.matches[k];
        CHECK(ri == static_cast<int>(k));
        CHECK(j >= 1);
        CHECK(j <= last_col);
        if (k > 0) {
            if (res.repeats)
                CHECK(j >= prev);
            else
                CHECK(j > prev);
        }
        prev = j;
        sum += dist_between(traj, static_cast<std::size_t>(res.rows[static_cast<std::size_t>(ri)]),
                            teacher, static_cast<std::size_t>(j));
    }
    CHECK(sum == doctest::Approx(res.dp_part).epsilon(1e-9));
}

} // namespace

TEST_CASE("task_loss matches hand-computed values per dtype") {
    SynthFixture fx;

    // scalar: mean squared error
    fx.add(out_spec("s", tasks::DType::Scalar), col({0.5, -1.0, 2.0}), {0.0, 1.0, 2.0});
    double expect_scalar = (0.25 + 4.0 + 0.0) / 3.0;

    // mask: per-node binary cross-entropy on raw logits
    fx.add(out_spec("m", tasks::DType::Mask), col({0.0, 2.0, -1.0}), {1.0, 0.0, 1.0});
    double expect_mask = -(log_sigmoid(0.0) + log_sigmoid(-2.0) + log_sigmoid(-1.0)) / 3.0;

    // mask_one: negative log-probability at the single hot index
    fx.add(out_spec("m1", tasks::DType::MaskOne),
           col({std::log(0.1), std::log(0.2), std::log(0.3), std::log(0.4)}),
           {0.0, 0.0, 1.0, 0.0});
    double expect_mask_one = -std::log(0.3);

    // categorical: mean negative picked log-probability over rows
    fx.add(out_spec("c", tasks::DType::Categorical),
           mat(2, 3,
               {std::log(0.2), std::log(0.3), std::log(0.5), std::log(0.25), std::log(0.25),
                std::log(0.5)}),
           {2.0, 0.0});
    double expect_cat = -(std::log(0.5) + std::log(0.25)) / 2.0;

    // graph pointer: negative log-probability at the target node
    fx.add(out_spec("g", tasks::DType::Pointer, tasks::Location::Graph),
           col({std::log(0.4), std::log(0.3), std::log(0.2), std::log(0.1)}), {2.0});
    double expect_graph = -std::log(0.2);

    // node pointer: ragged rows grouped by segment, one candidate per row
    fx.add(out_spec("p", tasks::DType::Pointer),
           col({std::log(0.5), std::log(0.5), std::log(0.2), std::log(0.3), std::log(0.5)}),
           {1.0, 3.0}, {0, 0, 1, 1, 1}, 2, {2, 1, 0, 1, 3});
    double expect_ptr = -(std::log(0.5) + std::log(0.5)) / 2.0;

    // permutation pointer: rows pick their target column
    fx.add(out_spec("perm", tasks::DType::PermutationPointer),
           mat(3, 3,
               {std::log(0.2), std::log(0.7), std::log(0.1), std::log(0.6), std::log(0.3),
                std::log(0.1), std::log(0.25), std::log(0.25), std::log(0.5)}),
           {1.0, 0.0, 2.0});
    double expect_perm = -(std::log(0.7) + std::log(0.6) + std::log(0.5)) / 3.0;

    const std::vector<double> expected{expect_scalar, expect_mask,  expect_mask_one, expect_cat,
                                       expect_graph,  expect_ptr,   expect_perm};
    double sum = 0.0;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        CHECK(fx.loss_of(i) == doctest::Approx(expected[i]).epsilon(1e-12));
        sum += expected[i];
    }

    SUBCASE("total is the sum over features") {
        CHECK(fx.loss() == doctest::Approx(sum).epsilon(1e-12));
    }

    SUBCASE("uniform pointer scores cost ln k") {
        SynthFixture u;
        int k = 5;
        u.add(out_spec("p", tasks::DType::Pointer),
              col(std::vector<double>(static_cast<std::size_t>(k), std::log(1.0 / k))), {3.0},
              std::vector<std::int64_t>(static_cast<std::size_t>(k), 0), 1, {0, 1, 2, 3, 4});
        CHECK(u.loss() == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }

    SUBCASE("perfect predictions cost zero") {
        SynthFixture p;
        p.add(out_spec("s", tasks::DType::Scalar), col({0.25, -3.0}), {0.25, -3.0});
        p.add(out_spec("m1", tasks::DType::MaskOne), col({-50.0, 0.0, -50.0}), {0.0, 1.0, 0.0});
        p.add(out_spec("g", tasks::DType::Pointer, tasks::Location::Graph), col({0.0, -40.0}),
              {0.0});
        CHECK(p.loss() == doctest::Approx(0.0).epsilon(1e-15));
    }
}

TEST_CASE("task_loss rejects malformed targets and empty feature lists") {
    SynthFixture fx;
    CHECK_THROWS_AS(eq::task_loss(fx.t, fx.feats, fx.plan), ContractViolation);

    SUBCASE("mask_one target without a hot entry") {
        fx.add(out_spec("m1", tasks::DType::MaskOne), col({0.0, 0.0}), {0.0, 0.0});
        CHECK_THROWS_AS(eq::task_loss(fx.t, fx.feats, fx.plan), ContractViolation);
    }
    SUBCASE("pointer target outside the candidate set") {
        fx.add(out_spec("p", tasks::DType::Pointer), col({0.0, 0.0}), {3.0}, {0, 0}, 1, {1, 2});
        CHECK_THROWS_AS(eq::task_loss(fx.t, fx.feats, fx.plan), ContractViolation);
    }
}

TEST_CASE("task_loss gradients agree with centered finite differences") {
    Rng rng(70);
    // Rebuild the fixture from raw tensors so single entries can be nudged.
    auto build_loss = [&](const Tensor& mask_scores, const Tensor& ptr_scores, Tape& t,
                          SynthFixture& fx, bool grad) {
        fx.add(out_spec("m", tasks::DType::Mask), mask_scores, {1.0, 0.0, 1.0, 0.0}, {}, 0, {},
               grad);
        fx.add(out_spec("p", tasks::DType::Pointer), ptr_scores, {1.0, 0.0}, {0, 0, 1, 1}, 2,
               {0, 1, 0, 2}, grad);
        return eq::task_loss(t, fx.feats, fx.plan);
    };
    Tensor mask_scores = testutil::rand_tensor(rng, {4, 1});
    Tensor ptr_scores = testutil::rand_tensor(rng, {4, 1});

    SynthFixture fx;
    Var loss = build_loss(mask_scores, ptr_scores, fx.t, fx, true);
    fx.t.backward(loss);
    Tensor g_mask = fx.t.grad(fx.feats[0].scores);
    Tensor g_ptr = fx.t.grad(fx.feats[1].scores);

    const double eps = 1e-6;
    auto value_at = [&](const Tensor& ms, const Tensor& ps) {
        SynthFixture local;
        return scalar_of(local.t, build_loss(ms, ps, local.t, local, false));
    };
    for (std::int64_t i = 0; i < 4; ++i) {
        Tensor up = mask_scores, dn = mask_scores;
        up(i) += eps;
        dn(i) -= eps;
        double fd = (value_at(up, ptr_scores) - value_at(dn, ptr_scores)) / (2 * eps);
        CHECK(g_mask(i) == doctest::Approx(fd).epsilon(1e-6));
    }
    for (std::int64_t i = 0; i < 4; ++i) {
        Tensor up = ptr_scores, dn = ptr_scores;
        up(i) += eps;
        dn(i) -= eps;
        double fd = (value_at(mask_scores, up) - value_at(mask_scores, dn)) / (2 * eps);
        CHECK(g_ptr(i) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("task_loss over real decodes matches the score-level oracle") {
    Rng rng(71);
    for (const std::string& algorithm :
         {std::string("bellman_ford"), std::string("binary_search"), std::string("parallel_search"),
          std::string("insertion_sort"), std::string("floyd_warshall")}) {
        CAPTURE(algorithm);
        model::ModelConfig cfg;
        cfg.algorithm = algorithm;
        cfg.latent_dim = 8;
        tasks::GraphInstance inst = tasks::make_instance(algorithm, 6, rng);
        model::GraphPlan plan = model::build_plan(inst);
        model::ModelParams params = model::init_params(cfg, rng);
        Tape t;
        model::VarParams vp = model::lift(t, params, false);
        model::Encoded enc = model::encode(t, plan, vp, cfg);
        Var H = t.leaf(testutil::rand_tensor(rng, {plan.n, cfg.latent_dim}), true);
        auto feats = model::decode(t, H, enc, plan, vp, cfg);
        REQUIRE(!feats.empty());

        Var loss = eq::task_loss(t, feats, plan);
        CHECK(scalar_of(t, loss) ==
              doctest::Approx(oracle_task_loss(t, feats, inst)).epsilon(1e-10));

        t.backward(loss);
        REQUIRE(t.has_grad(H));
        const Tensor& g = t.grad(H);
        double mass = 0.0;
        for (std::int64_t i = 0; i < g.size(); ++i) {
            REQUIRE(std::isfinite(g(i)));
            mass += std::abs(g(i));
        }
        CHECK(mass > 0.0);
    }
}

TEST_CASE("feature_accuracy applies the exact-match and F1 rules") {
    SUBCASE("mask F1 counts thresholded predictions, empty case scores one") {
        SynthFixture fx;
        fx.add(out_spec("m", tasks::DType::Mask), col({1.0, -1.0, 1.0, -1.0}),
               {1.0, 0.0, 0.0, 1.0});
        auto acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan);
        // tp=1 fp=1 fn=1 -> F1 = 2/4
        CHECK(acc.at("m") == doctest::Approx(0.5));

        SynthFixture z;
        z.add(out_spec("m", tasks::DType::Mask), col({0.0}), {1.0});
        CHECK(eq::feature_accuracy(z.t, z.feats, z.plan).at("m") == 0.0); // score 0 predicts negative

        SynthFixture e;
        e.add(out_spec("m", tasks::DType::Mask), col({-2.0, -3.0}), {0.0, 0.0});
        CHECK(eq::feature_accuracy(e.t, e.feats, e.plan).at("m") == 1.0);
    }

    SUBCASE("mask_one argmax breaks ties toward the lowest index") {
        SynthFixture fx;
        fx.add(out_spec("a", tasks::DType::MaskOne), col({0.5, 0.5}), {1.0, 0.0});
        fx.add(out_spec("b", tasks::DType::MaskOne), col({0.5, 0.5}), {0.0, 1.0});
        auto acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan);
        CHECK(acc.at("a") == 1.0);
        CHECK(acc.at("b") == 0.0);
    }

    SUBCASE("categorical and permutation report per-row match fractions") {
        SynthFixture fx;
        fx.add(out_spec("c", tasks::DType::Categorical), mat(2, 3, {0, 1, 0, 1, 0, 0}),
               {1.0, 2.0});
        fx.add(out_spec("perm", tasks::DType::PermutationPointer),
               mat(3, 3, {9, 0, 0, 0, 9, 0, 9, 0, 0}), {0.0, 1.0, 2.0});
        auto acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan);
        CHECK(acc.at("c") == doctest::Approx(0.5));
        CHECK(acc.at("perm") == doctest::Approx(2.0 / 3.0));
    }

    SUBCASE("graph pointer is a single argmax hit or miss") {
        SynthFixture fx;
        fx.add(out_spec("g", tasks::DType::Pointer, tasks::Location::Graph), col({0.1, 0.9, 0.0}),
               {1.0});
        fx.add(out_spec("g2", tasks::DType::Pointer, tasks::Location::Graph), col({0.1, 0.9, 0.0}),
               {2.0});
        auto acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan);
        CHECK(acc.at("g") == 1.0);
        CHECK(acc.at("g2") == 0.0);
    }

    SUBCASE("node pointer scores per-segment argmax candidates, absent segments miss") {
        SynthFixture fx;
        fx.add(out_spec("p", tasks::DType::Pointer), col({2.0, 1.0, 0.0, 3.0}), {1.0, 2.0, 0.0},
               {0, 0, 1, 1}, 3, {1, 2, 0, 2});
        // seg 0 argmax row 0 -> candidate 1 (hit); seg 1 argmax row 3 -> 2 (hit); seg 2 empty.
        CHECK(eq::feature_accuracy(fx.t, fx.feats, fx.plan).at("p") ==
              doctest::Approx(2.0 / 3.0));
    }

    SUBCASE("scalars are skipped entirely") {
        SynthFixture fx;
        fx.add(out_spec("s", tasks::DType::Scalar), col({1.0}), {2.0});
        fx.add(out_spec("m1", tasks::DType::MaskOne), col({1.0, 0.0}), {1.0, 0.0});
        auto acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan);
        CHECK(acc.count("s") == 0);
        CHECK(acc.size() == 1);
        CHECK(eq::mean_accuracy(acc) == 1.0);
    }

    SUBCASE("random pointer scores land near one over the candidate count") {
        Rng rng(72);
        const int segs = 600, k = 4;
        std::vector<std::int64_t> segments, candidates;
        std::vector<double> target;
        for (int s = 0; s < segs; ++s) {
            for (int c = 0; c < k; ++c) {
                segments.push_back(s);
                candidates.push_back(c);
            }
            target.push_back(0.0); // always the first candidate
        }
        SynthFixture fx;
        fx.add(out_spec("p", tasks::DType::Pointer),
               testutil::rand_tensor(rng, {static_cast<std::int64_t>(segs * k), 1}), target,
               segments, segs, candidates);
        double acc = eq::feature_accuracy(fx.t, fx.feats, fx.plan).at("p");
        CHECK(acc == doctest::Approx(1.0 / k).epsilon(0.35));
    }
}

TEST_CASE("mean_accuracy averages the map and zeroes the empty case") {
    CHECK(eq::mean_accuracy({}) == 0.0);
    CHECK(eq::mean_accuracy({{"a", 1.0}, {"b", 0.5}}) == doctest::Approx(0.75));
}

TEST_CASE("alignment_loss equals exhaustive monotone matching") {
    Rng rng(73);
    for (std::size_t traj_states = 2; traj_states <= 6; ++traj_states)
        for (std::size_t teacher_states = 2; teacher_states <= 6; ++teacher_states) {
            CAPTURE(traj_states);
            CAPTURE(teacher_states);
            for (int trial = 0; trial < 40; ++trial) {
                auto traj = random_states(rng, traj_states, {2, 3});
                auto teacher = random_states(rng, teacher_states, {2, 3});
                eq::AlignmentResult res = eq::alignment_loss(traj, teacher, false, nullptr);

                CHECK(res.value ==
                      doctest::Approx(brute_alignment_value(traj, teacher)).epsilon(1e-9));
                CHECK(res.last_term == doctest::Approx(dist_between(traj, traj_states - 1, teacher,
                                                                    teacher_states - 1))
                                           .epsilon(1e-12));
                std::vector<int> want_rows(traj_states - 2);
                std::iota(want_rows.begin(), want_rows.end(), 1);
                CHECK(res.rows == want_rows);

                const int n_rows = static_cast<int>(traj_states) - 2;
                const int cols = static_cast<int>(teacher_states) - 2;
                if (n_rows >= 1 && cols >= 1) {
                    CHECK(res.repeats == (n_rows > cols));
                    REQUIRE(res.dp.size() == static_cast<std::size_t>(n_rows) + 1);
                    REQUIRE(res.dp[0].size() == static_cast<std::size_t>(cols) + 1);
                    CHECK(res.dp_part ==
                          doctest::Approx(res.dp.back().back()).epsilon(1e-12));
                    CHECK(res.value == doctest::Approx(res.dp_part / n_rows + res.last_term)
                                           .epsilon(1e-12));
                    check_matches(res, traj, teacher);
                } else {
                    CHECK(res.value == doctest::Approx(res.last_term).epsilon(1e-12));
                    CHECK(res.dp.empty());
                    CHECK(res.matches.empty());
                }
            }
        }
}

TEST_CASE("alignment_loss degenerate, tie, and error behavior") {
    Rng rng(74);

    SUBCASE("too-short trajectories are rejected") {
        auto one = random_states(rng, 1, {1, 2});
        auto two = random_states(rng, 2, {1, 2});
        CHECK_THROWS_AS(eq::alignment_loss(one, two, false, nullptr), ContractViolation);
        CHECK_THROWS_AS(eq::alignment_loss(two, one, false, nullptr), ContractViolation);
    }

    SUBCASE("ties prefer the match branch, pinning a unique diagonal path") {
        std::vector<Tensor> traj(4, Tensor::zeros({1, 2}));
        std::vector<Tensor> teacher(5, Tensor::zeros({1, 2}));
        eq::AlignmentResult res = eq::alignment_loss(traj, teacher, false, nullptr);
        CHECK(res.value == 0.0);
        REQUIRE(res.matches.size() == 2);
        CHECK(res.matches[0] == std::pair<int, int>{0, 2});
        CHECK(res.matches[1] == std::pair<int, int>{1, 3});
    }

    SUBCASE("every row repeats the single teacher column when forced") {
        auto traj = random_states(rng, 6, {2, 2});
        auto teacher = random_states(rng, 3, {2, 2});
        eq::AlignmentResult res = eq::alignment_loss(traj, teacher, false, nullptr);
        CHECK(res.repeats);
        REQUIRE(res.matches.size() == 4);
        double sum = 0.0;
        for (auto [ri, j] : res.matches) {
            CHECK(j == 1);
            sum += dist_between(traj, static_cast<std::size_t>(res.rows[static_cast<std::size_t>(ri)]),
                                teacher, 1);
        }
        CHECK(res.value == doctest::Approx(sum / 4.0 + res.last_term).epsilon(1e-12));
    }
}

TEST_CASE("alignment subsampling keeps half the interior rows, reproducibly") {
    Rng rng(75);
    auto teacher = random_states(rng, 6, {2, 2});

    SUBCASE("kept counts follow max(interior/2, 1)") {
        for (auto [traj_states, want] : std::vector<std::pair<std::size_t, std::size_t>>{
                 {4, 1}, {5, 1}, {6, 2}, {7, 2}, {11, 4}}) {
            auto traj = random_states(rng, traj_states, {2, 2});
            Rng sub_rng(9000 + static_cast<unsigned>(traj_states));
            eq::AlignmentResult res = eq::alignment_loss(traj, teacher, true, &sub_rng);
            CHECK(res.rows.size() == want);
            for (std::size_t k = 0; k < res.rows.size(); ++k) {
                CHECK(res.rows[k] >= 1);
                CHECK(res.rows[k] <= static_cast<int>(traj_states) - 2);
                if (k > 0) CHECK(res.rows[k] > res.rows[k - 1]);
            }
            // The value is the exact DP on the surviving rows.
            CHECK(res.value == doctest::Approx(brute_dp_part(traj, teacher, res.rows) /
                                                   static_cast<double>(res.rows.size()) +
                                               res.last_term)
                                   .epsilon(1e-9));
        }
    }

    SUBCASE("same seed picks the same rows") {
        auto traj = random_states(rng, 11, {2, 2});
        Rng a(77), b(77);
        CHECK(eq::alignment_loss(traj, teacher, true, &a).rows ==
              eq::alignment_loss(traj, teacher, true, &b).rows);
    }

    SUBCASE("subsampling with multiple interior rows requires an rng") {
        auto traj = random_states(rng, 6, {2, 2});
        CHECK_THROWS_AS(eq::alignment_loss(traj, teacher, true, nullptr), ContractViolation);
    }

    SUBCASE("a single interior row never needs the rng") {
        auto traj = random_states(rng, 3, {2, 2});
        eq::AlignmentResult res = eq::alignment_loss(traj, teacher, true, nullptr);
        CHECK(res.rows == std::vector<int>{1});
    }
}

TEST_CASE("alignment_loss_on_tape reproduces the value and differentiates it") {
    Rng rng(76);

    for (auto [traj_states, teacher_states] :
         std::vector<std::pair<std::size_t, std::size_t>>{{6, 5}, {5, 8}}) {
        CAPTURE(traj_states);
        CAPTURE(teacher_states);
        auto traj = random_states(rng, traj_states, {2, 3});
        auto teacher = random_states(rng, teacher_states, {2, 3});
        eq::AlignmentResult plain = eq::alignment_loss(traj, teacher, false, nullptr);

        Tape t;
        std::vector<Var> vars;
        for (const Tensor& s : traj) vars.push_back(t.leaf(s, true));
        auto [loss, res] = eq::alignment_loss_on_tape(t, vars, teacher, false, nullptr);

        CHECK(res.value == doctest::Approx(plain.value).epsilon(1e-12));
        CHECK(res.dp_part == doctest::Approx(plain.dp_part).epsilon(1e-12));
        CHECK(res.last_term == doctest::Approx(plain.last_term).epsilon(1e-12));
        CHECK(res.rows == plain.rows);
        CHECK(res.matches == plain.matches);
        CHECK(res.repeats == plain.repeats);
        CHECK(scalar_of(t, loss) == doctest::Approx(res.value).epsilon(1e-12));

        // Analytic gradient of the matched-distance sum: unit vectors toward
        // each matched teacher state, scaled by 1/N, plus the final-state term.
        t.backward(loss);
        std::vector<Tensor> expect(traj.size(), Tensor::zeros({2, 3}));
        {
            Tensor d = traj.back();
            ad::axpy(-1.0, teacher.back(), d);
            double nrm = ad::norm2(d);
            for (double& e : d.vec()) e /= nrm;
            expect.back() = d;
        }
        for (auto [ri, j] : res.matches) {
            std::size_t r = static_cast<std::size_t>(res.rows[static_cast<std::size_t>(ri)]);
            Tensor d = traj[r];
            ad::axpy(-1.0, teacher[static_cast<std::size_t>(j)], d);
            double nrm = ad::norm2(d) * static_cast<double>(res.rows.size());
            for (double& e : d.vec()) e /= nrm;
            ad::axpy(1.0, d, expect[r]);
        }
        for (std::size_t i = 0; i < vars.size(); ++i)
            CHECK(testutil::max_abs_diff(t.grad_or_zero(vars[i]), expect[i]) < 1e-9);
        CHECK(!t.has_grad(vars[0])); // the initial state never enters the loss
    }

    SUBCASE("subsampled tape value matches the tensor path under a shared seed") {
        auto traj = random_states(rng, 9, {2, 2});
        auto teacher = random_states(rng, 6, {2, 2});
        Rng a(501), b(501);
        eq::AlignmentResult plain = eq::alignment_loss(traj, teacher, true, &a);
        Tape t;
        std::vector<Var> vars;
        for (const Tensor& s : traj) vars.push_back(t.leaf(s, false));
        auto [loss, res] = eq::alignment_loss_on_tape(t, vars, teacher, true, &b);
        CHECK(res.rows == plain.rows);
        CHECK(res.matches == plain.matches);
        CHECK(scalar_of(t, loss) == doctest::Approx(plain.value).epsilon(1e-12));
    }

    SUBCASE("rejects too-short inputs") {
        Tape t;
        std::vector<Var> one{t.constant(Tensor::zeros({1, 1}))};
        std::vector<Tensor> teacher2(2, Tensor::zeros({1, 1}));
        CHECK_THROWS_AS(eq::alignment_loss_on_tape(t, one, teacher2, false, nullptr),
                        ContractViolation);
    }
}

TEST_CASE("jacobian_penalty probes ||Jv||^2 with a Rademacher direction") {
    Rng rng(78);

    SUBCASE("linear map: exact ||vW||^2 with the rng replicated") {
        Tensor W = testutil::rand_tensor(rng, {3, 3});
        Tensor h = testutil::rand_tensor(rng, {2, 3});
        auto step = [&W](Tape& tp, Var x) { return ad::matmul(x, tp.constant(W)); };

        Rng used(301), twin(301);
        Tape t;
        double got = scalar_of(t, eq::jacobian_penalty(t, step, h, used, 1e-3));

        Tensor v = h;
        std::uniform_int_distribution<int> coin(0, 1);
        for (double& x : v.vec()) x = coin(twin) == 0 ? -1.0 : 1.0;
        double want = 0.0;
        for (std::int64_t i = 0; i < 2; ++i)
            for (std::int64_t j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < 3; ++k) acc += v(i, k) * W(k, j);
                want += acc * acc;
            }
        CHECK(got == doctest::Approx(want).epsilon(1e-8));
    }

    SUBCASE("the probe direction is a sign pattern") {
        Tensor W = testutil::rand_tensor(rng, {4, 4});
        Tensor h = testutil::rand_tensor(rng, {1, 4});
        auto step = [&W](Tape& tp, Var x) { return ad::matmul(x, tp.constant(W)); };
        Rng fresh(302);
        Tape t;
        double got = scalar_of(t, eq::jacobian_penalty(t, step, h, fresh, 1e-3));

        double best = std::numeric_limits<double>::infinity();
        for (int bits = 0; bits < 16; ++bits) {
            double val = 0.0;
            for (std::int64_t j = 0; j < 4; ++j) {
                double acc = 0.0;
                for (std::int64_t k = 0; k < 4; ++k)
                    acc += ((bits >> k) & 1 ? 1.0 : -1.0) * W(k, j);
                val += acc * acc;
            }
            best = std::min(best, std::abs(val - got));
        }
        CHECK(best < 1e-8 * std::max(1.0, got));
    }

    SUBCASE("nonlinear map: centered difference at eps, near the true Jacobian") {
        Tensor h = testutil::rand_tensor(rng, {2, 3});
        auto step = [](Tape& tp, Var x) {
            (void)tp;
            return ad::tanh(x);
        };
        const double eps = 1e-3;
        Rng used(303), twin(303);
        Tape t;
        double got = scalar_of(t, eq::jacobian_penalty(t, step, h, used, eps));

        Tensor v = h;
        std::uniform_int_distribution<int> coin(0, 1);
        for (double& x : v.vec()) x = coin(twin) == 0 ? -1.0 : 1.0;
        double fd_oracle = 0.0, analytic = 0.0;
        for (std::int64_t i = 0; i < h.size(); ++i) {
            double jv = (std::tanh(h(i) + eps * v(i)) - std::tanh(h(i) - eps * v(i))) *
                        (1.0 / (2.0 * eps));
            fd_oracle += jv * jv;
            double d = 1.0 - std::tanh(h(i)) * std::tanh(h(i));
            analytic += d * d; // v(i)^2 == 1
        }
        CHECK(got == doctest::Approx(fd_oracle).epsilon(1e-12));
        // Centered differences are second order: a one-sided scheme would sit
        // ~1e-3 away, far outside this band.
        CHECK(got == doctest::Approx(analytic).epsilon(1e-5));
    }

    SUBCASE("default eps is 1e-3 and the rng advances between calls") {
        Tensor W = testutil::rand_tensor(rng, {3, 3});
        Tensor h = testutil::rand_tensor(rng, {2, 3});
        auto step = [&W](Tape& tp, Var x) { return ad::matmul(x, tp.constant(W)); };

        Rng a(304), b(304);
        Tape t1, t2;
        double def = scalar_of(t1, eq::jacobian_penalty(t1, step, h, a));
        double exp3 = scalar_of(t2, eq::jacobian_penalty(t2, step, h, b, 1e-3));
        CHECK(def == exp3);

        Tape t3;
        double again = scalar_of(t3, eq::jacobian_penalty(t3, step, h, a));
        CHECK(def != again); // a fresh Rademacher draw each call
    }
}
