#include "deqr/model.hpp"

#include <algorithm>
#include <cmath>

namespace deqr::model {

using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

Var mlp2(Tape& t, Var x, const VarParams& p, const std::string& prefix) {
    Var h = ad::relu(ad::add(ad::matmul(x, p.at(prefix + "/w1")), p.at(prefix + "/b1")));
    return ad::add(ad::matmul(h, p.at(prefix + "/w2")), p.at(prefix + "/b2"));
}

Tensor column(const std::vector<double>& vals) {
    return Tensor::from_data({static_cast<std::int64_t>(vals.size()), 1}, vals);
}

Tensor one_hot(const std::vector<double>& vals, int k) {
    Tensor t = Tensor::zeros({static_cast<std::int64_t>(vals.size()), k});
    for (std::size_t i = 0; i < vals.size(); ++i)
        t(static_cast<std::int64_t>(i), static_cast<std::int64_t>(std::llround(vals[i]))) = 1.0;
    return t;
}

const std::vector<double>& feature_values(const GraphPlan& plan, const std::string& name) {
    auto it = plan.inst->features.find(name);
    if (it == plan.inst->features.end())
        throw ContractViolation("instance lacks input feature '" + name + "'");
    return it->second;
}

} // namespace

Encoded encode(Tape& t, const GraphPlan& plan, const VarParams& p, const ModelConfig& cfg) {
    if (plan.inst->algorithm != cfg.algorithm)
        throw ContractViolation("instance algorithm '" + plan.inst->algorithm +
                                "' does not match model '" + cfg.algorithm + "'");
    const std::int64_t nb = plan.base_n;
    Var u_base{};
    bool have_u = false;

    for (const tasks::FeatureSpec& spec : tasks::input_specs(cfg.algorithm)) {
        if (spec.location == tasks::Location::Edge) continue;
        const std::vector<double>& vals = feature_values(plan, spec.name);
        Tensor raw;
        if (spec.location == tasks::Location::Graph)
            raw = Tensor::full({nb, 1}, vals.at(0));
        else if (spec.dtype == tasks::DType::Categorical)
            raw = one_hot(vals, spec.num_classes);
        else
            raw = column(vals);
        Var proj = ad::add(ad::matmul(t.constant(std::move(raw)), p.at("enc/" + spec.name + "/w")),
                           p.at("enc/" + spec.name + "/b"));
        u_base = have_u ? ad::add(u_base, proj) : proj;
        have_u = true;
    }
    if (!have_u) u_base = t.constant(Tensor::zeros({nb, cfg.latent_dim}));
    Var U = plan.n == plan.base_n
                ? u_base
                : ad::scatter_segment_sum(u_base, plan.iota_base, plan.n);

    std::vector<std::int64_t> types(static_cast<std::size_t>(plan.m), 0);
    if (!plan.inst->edge_types.empty())
        for (std::int64_t i = 0; i < plan.m; ++i)
            types[static_cast<std::size_t>(i)] = plan.inst->edge_types[static_cast<std::size_t>(i)];
    Var E = ad::gather(p.at("enc/edge_type/emb"), types);

    for (const tasks::FeatureSpec& spec : tasks::input_specs(cfg.algorithm)) {
        if (spec.location != tasks::Location::Edge) continue;
        const std::vector<double>& vals = feature_values(plan, spec.name);
        if (vals.size() != plan.base_rows.size())
            throw ContractViolation("edge feature '" + spec.name + "' has wrong length");
        Tensor raw = spec.dtype == tasks::DType::Categorical ? one_hot(vals, spec.num_classes)
                                                             : column(vals);
        Var proj = ad::add(ad::matmul(t.constant(std::move(raw)), p.at("enc/" + spec.name + "/w")),
                           p.at("enc/" + spec.name + "/b"));
        E = ad::add(E, ad::scatter_segment_sum(proj, plan.base_rows, plan.m));
    }
    return Encoded{U, E};
}

Tensor sample_noise(const ModelConfig& cfg, int n, Rng& rng) {
    if (cfg.norm != Normalization::Granola) return Tensor();
    Tensor noise = Tensor::zeros({n, cfg.latent_dim});
    std::normal_distribution<double> dist(0.0, 1.0);
    for (double& v : noise.vec()) v = dist(rng);
    return noise;
}

Var normalize_candidate(Tape& t, Var cand, const Tensor& noise, const VarParams& p,
                        const ModelConfig& cfg) {
    Var xn = ad::add(ad::mul(ad::layer_norm(cand), p.at("norm/ln/gamma")), p.at("norm/ln/beta"));
    if (cfg.norm != Normalization::Granola) return xn;
    if (noise.empty() || !noise.same_shape(t.value(cand)))
        throw ContractViolation("granola normalization needs a noise tensor shaped like the state");
    Var r = t.constant(noise);
    Var hidden = ad::relu(
        ad::add(ad::matmul(ad::concat({xn, r}), p.at("norm/granola/w1")), p.at("norm/granola/b1")));
    Var s = ad::add(ad::matmul(hidden, p.at("norm/granola/ws")), p.at("norm/granola/bs"));
    Var shift = ad::add(ad::matmul(hidden, p.at("norm/granola/wt")), p.at("norm/granola/bt"));
    return ad::add(ad::add(xn, ad::mul(xn, s)), shift);
}

namespace {

Var pgn_pass(Tape& t, Var H, Var U, Var E, const GraphPlan::Pass& pass, std::int64_t n,
             const VarParams& p, const ModelConfig& cfg, const Tensor& noise) {
    Var hs = ad::gather(H, pass.src);
    Var hd = ad::gather(H, pass.dst);
    Var us = ad::gather(U, pass.src);
    Var ud = ad::gather(U, pass.dst);
    Var ev = ad::gather(E, pass.rows);
    Var msg = mlp2(t, ad::concat({hs, hd, ev, us, ud}), p, "proc/msg");
    Var agg = ad::scatter_segment_max(msg, pass.dst, n);
    Var ctx = ad::concat({H, U, agg});
    Var cand = normalize_candidate(t, mlp2(t, ctx, p, "proc/upd"), noise, p, cfg);
    Var gate = ad::sigmoid(mlp2(t, ctx, p, "proc/gate"));
    return ad::add(H, ad::mul(gate, ad::sub(cand, H)));
}

Var triplet_edges(Tape& t, Var H, Var E, const GraphPlan& plan, const VarParams& p) {
    const std::int64_t n = plan.n;
    std::vector<std::int64_t> pair_of_edge(static_cast<std::size_t>(plan.m));
    for (std::int64_t i = 0; i < plan.m; ++i)
        pair_of_edge[static_cast<std::size_t>(i)] =
            plan.src[static_cast<std::size_t>(i)] * n + plan.dst[static_cast<std::size_t>(i)];
    Var e_dense = ad::scatter_segment_sum(E, pair_of_edge, n * n);

    std::vector<std::int64_t> iu, iv, iw, iuv, ivw, pair_seg;
    iu.reserve(static_cast<std::size_t>(n * n * n));
    for (std::int64_t u = 0; u < n; ++u)
        for (std::int64_t v = 0; v < n; ++v)
            for (std::int64_t w = 0; w < n; ++w) {
                iu.push_back(u);
                iv.push_back(v);
                iw.push_back(w);
                iuv.push_back(u * n + v);
                ivw.push_back(v * n + w);
                pair_seg.push_back(u * n + v);
            }
    Var tin = ad::concat({ad::gather(H, iu), ad::gather(H, iv), ad::gather(H, iw),
                          ad::gather(e_dense, iuv), ad::gather(e_dense, ivw)});
    Var tri = mlp2(t, tin, p, "proc/tri");
    Var red = ad::scatter_segment_max(tri, pair_seg, n * n);
    Var proj = ad::add(ad::matmul(red, p.at("proc/tri/proj_w")), p.at("proc/tri/proj_b"));
    return ad::add(E, ad::gather(proj, pair_of_edge));
}

} // namespace

Var processor_step(Tape& t, Var H, const Encoded& enc, const GraphPlan& plan, const VarParams& p,
                   const ModelConfig& cfg, const Tensor& noise) {
    Var E = enc.E;
    if (cfg.processor == Processor::TripletPgn) E = triplet_edges(t, H, E, plan, p);
    Var h = H;
    for (const GraphPlan::Pass& pass : plan.passes)
        h = pgn_pass(t, h, enc.U, E, pass, plan.n, p, cfg, noise);
    return h;
}

Var sinkhorn(Tape& t, Var logits, int iters, double temp) {
    const Tensor& v = t.value(logits);
    if (v.shape().size() != 2 || v.shape()[0] != v.shape()[1])
        throw ContractViolation("sinkhorn expects a square matrix, got " + v.shape_str());
    if (temp <= 0.0) throw ContractViolation("sinkhorn temperature must be positive");
    Var x = ad::scale(logits, 1.0 / temp);
    for (int i = 0; i < iters; ++i) {
        x = ad::sub(x, ad::logsumexp(x));
        x = ad::transpose(ad::sub(ad::transpose(x), ad::logsumexp(ad::transpose(x))));
    }
    return x;
}

namespace {

constexpr double kPermClampKink = -6.0;
constexpr double kPermClampSlope = 0.01;

std::vector<std::int64_t> zeros_idx(std::int64_t k) {
    return std::vector<std::int64_t>(static_cast<std::size_t>(k), 0);
}

Var base_latents(Tape& t, Var H, const GraphPlan& plan) {
    if (plan.n == plan.base_n) return H;
    (void)t;
    return ad::gather(H, plan.iota_base);
}

Var mean_latent(Var hb, std::int64_t nb) {
    return ad::scale(ad::scatter_segment_sum(hb, zeros_idx(nb), 1), 1.0 / static_cast<double>(nb));
}

} // namespace

std::vector<DecodedFeature> decode(Tape& t, Var H, const Encoded& enc, const GraphPlan& plan,
                                   const VarParams& p, const ModelConfig& cfg) {
    const std::int64_t nb = plan.base_n;
    Var hb = base_latents(t, H, plan);

    // Base-edge endpoints, used by the pointer decoders.
    std::vector<std::int64_t> bsrc, bdst;
    for (std::int64_t r : plan.base_rows) {
        bsrc.push_back(plan.src[static_cast<std::size_t>(r)]);
        bdst.push_back(plan.dst[static_cast<std::size_t>(r)]);
    }

    std::vector<DecodedFeature> out;
    for (const tasks::FeatureSpec& spec : tasks::output_specs(cfg.algorithm)) {
        DecodedFeature f;
        f.spec = spec;
        const std::string base = "dec/" + spec.name;
        using tasks::DType;
        using tasks::Location;
        switch (spec.dtype) {
            case DType::Scalar:
            case DType::Mask: {
                Var in{};
                if (spec.location == Location::Node)
                    in = hb;
                else if (spec.location == Location::Graph)
                    in = mean_latent(hb, nb);
                else
                    in = ad::concat({ad::gather(H, bsrc), ad::gather(H, bdst),
                                     ad::gather(enc.E, plan.base_rows)});
                f.scores = ad::add(ad::matmul(in, p.at(base + "/w")), p.at(base + "/b"));
                break;
            }
            case DType::MaskOne: {
                if (spec.location != Location::Node)
                    throw ContractViolation("mask_one outputs must be node-located");
                Var raw = ad::add(ad::matmul(hb, p.at(base + "/w")), p.at(base + "/b"));
                f.scores = ad::segment_log_softmax(raw, zeros_idx(nb), 1);
                break;
            }
            case DType::Categorical: {
                Var in = spec.location == Location::Graph ? mean_latent(hb, nb) : hb;
                f.scores = ad::log_softmax_rows(
                    ad::add(ad::matmul(in, p.at(base + "/w")), p.at(base + "/b")));
                break;
            }
            case DType::Pointer: {
                if (spec.location == Location::Node) {
                    Var in = ad::concat({ad::gather(H, bsrc), ad::gather(H, bdst),
                                         ad::gather(enc.E, plan.base_rows)});
                    Var raw = mlp2(t, in, p, base + "/ptr");
                    f.segments = bsrc;
                    f.num_segments = nb;
                    f.candidates = bdst;
                    f.scores = ad::segment_log_softmax(raw, f.segments, f.num_segments);
                } else if (spec.location == Location::Graph) {
                    Var bar = mean_latent(hb, nb);
                    Var in = ad::concat({hb, ad::gather(bar, zeros_idx(nb))});
                    Var raw = mlp2(t, in, p, base + "/ptr");
                    f.scores = ad::segment_log_softmax(raw, zeros_idx(nb), 1);
                } else {
                    // Edge pointer: for each base edge (u, v), candidates are
                    // the in-neighbors k of v over base edges.
                    std::vector<std::vector<std::int64_t>> in_rows(static_cast<std::size_t>(nb));
                    for (std::size_t i = 0; i < bdst.size(); ++i)
                        in_rows[static_cast<std::size_t>(bdst[i])].push_back(
                            static_cast<std::int64_t>(i));
                    std::vector<std::int64_t> fu, fv, fk, fe, fkv;
                    for (std::size_t e = 0; e < bsrc.size(); ++e)
                        for (std::int64_t r2 : in_rows[static_cast<std::size_t>(bdst[e])]) {
                            fu.push_back(bsrc[e]);
                            fv.push_back(bdst[e]);
                            fk.push_back(bsrc[static_cast<std::size_t>(r2)]);
                            fe.push_back(plan.base_rows[e]);
                            fkv.push_back(plan.base_rows[static_cast<std::size_t>(r2)]);
                            f.segments.push_back(static_cast<std::int64_t>(e));
                            f.candidates.push_back(bsrc[static_cast<std::size_t>(r2)]);
                        }
                    f.num_segments = static_cast<std::int64_t>(bsrc.size());
                    Var in = ad::concat({ad::gather(H, fu), ad::gather(H, fv), ad::gather(H, fk),
                                         ad::gather(enc.E, fe), ad::gather(enc.E, fkv)});
                    Var raw = mlp2(t, in, p, base + "/ptr");
                    f.scores = ad::segment_log_softmax(raw, f.segments, f.num_segments);
                }
                break;
            }
            case DType::PermutationPointer: {
                if (static_cast<std::int64_t>(plan.base_rows.size()) != nb * nb)
                    throw ContractViolation(
                        "permutation_pointer decoding requires a complete base graph");
                for (std::size_t i = 0; i < plan.base_rows.size(); ++i)
                    if (bsrc[i] != static_cast<std::int64_t>(i) / nb ||
                        bdst[i] != static_cast<std::int64_t>(i) % nb)
                        throw ContractViolation(
                            "permutation_pointer decoding requires row-major base edges");
                Var in = ad::concat({ad::gather(H, bsrc), ad::gather(H, bdst),
                                     ad::gather(enc.E, plan.base_rows)});
                Var raw = ad::reshape(mlp2(t, in, p, base + "/ptr"), {nb, nb});
                Var sk = sinkhorn(t, raw, cfg.sinkhorn_iters, cfg.sinkhorn_temp);
                f.scores = ad::leaky_relu_offset(sk, kPermClampKink, kPermClampSlope);
                break;
            }
        }
        out.push_back(std::move(f));
    }
    return out;
}

} // namespace deqr::model
