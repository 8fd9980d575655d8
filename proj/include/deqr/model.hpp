#pragma once

#include <map>
#include <string>
#include <vector>

#include "deqr/tape.hpp"
#include "deqr/tasks.hpp"

namespace deqr::model {

enum class Processor { Pgn, TripletPgn };
enum class Normalization { LayerNorm, Granola };

std::string to_string(Processor p);
std::string to_string(Normalization n);
Processor processor_from_string(const std::string& s);
Normalization normalization_from_string(const std::string& s);

struct ModelConfig {
    std::string algorithm;
    int latent_dim = 128;
    Processor processor = Processor::Pgn;
    Normalization norm = Normalization::LayerNorm;
    bool cgp = false;
    int sinkhorn_iters = 10;
    double sinkhorn_temp = 0.1;
    double gate_bias_init = -3.0;
    double init_scale = 1.0; // multiplies the Glorot range; tests shrink it
};

/// Named parameter tensors. Iteration order (and hence init, flattening and
/// checkpoint layout) is the map's name order.
struct ModelParams {
    std::map<std::string, ad::Tensor> tensors;

    ad::Tensor& at(const std::string& name);
    const ad::Tensor& at(const std::string& name) const;
    bool has(const std::string& name) const { return tensors.count(name) > 0; }
    std::int64_t total_size() const;
};

ModelParams init_params(const ModelConfig& cfg, Rng& rng);

/// Parameters lifted onto a tape as leaves.
struct VarParams {
    std::map<std::string, ad::Var> vars;
    ad::Var at(const std::string& name) const;
};

VarParams lift(ad::Tape& tape, const ModelParams& params, bool learnable);

/// Edge bookkeeping for one instance: gather/scatter index arrays and the
/// message-passing schedule (one pass, or base + Cayley passes under CGP,
/// each including every node's self-loop).
struct GraphPlan {
    const tasks::GraphInstance* inst = nullptr;
    int n = 0;
    int base_n = 0;
    std::int64_t m = 0;
    std::vector<std::int64_t> src, dst; // all edges
    struct Pass {
        std::vector<std::int64_t> rows, src, dst;
    };
    std::vector<Pass> passes;
    std::vector<std::int64_t> base_rows; // rows of base (type-0) edges, in order
    std::vector<std::int64_t> iota_base; // 0..base_n-1
};

GraphPlan build_plan(const tasks::GraphInstance& inst);

struct Encoded {
    ad::Var U, E;
};

/// Linear per-feature input encoders summed into node and edge latents, plus
/// a learned edge-type embedding. Virtual nodes get all-zero encodings.
Encoded encode(ad::Tape& tape, const GraphPlan& plan, const VarParams& p, const ModelConfig& cfg);

/// Per-forward-pass normalization noise: standard normal [n, d] for granola,
/// empty for layer_norm.
ad::Tensor sample_noise(const ModelConfig& cfg, int n, Rng& rng);

/// Candidate normalization, applied before gating: affine layer norm, plus the
/// noise-conditioned scale/shift for granola (zero weights reduce it to layer
/// norm exactly).
ad::Var normalize_candidate(ad::Tape& tape, ad::Var cand, const ad::Tensor& noise, const VarParams& p,
                            const ModelConfig& cfg);

/// One application of the equilibrium map: per pass, gated message passing
/// with elementwise-max aggregation. The triplet variant first max-reduces a
/// dense triplet MLP into edge updates; zero triplet output weights make it
/// coincide with the plain step.
ad::Var processor_step(ad::Tape& tape, ad::Var H, const Encoded& enc, const GraphPlan& plan,
                       const VarParams& p, const ModelConfig& cfg, const ad::Tensor& noise);

/// Log-space Sinkhorn: divides by temp, then alternates row and column
/// normalization. At unit temperature, rows/columns exponentiate to doubly
/// stochastic within 1e-3 after 10 iterations; sharper temperatures trade
/// balance for a harder permutation and need more iterations.
ad::Var sinkhorn(ad::Tape& tape, ad::Var logits, int iters, double temp);

struct DecodedFeature {
    tasks::FeatureSpec spec;
    ad::Var scores;
    // Ragged layouts (node/edge pointers) carry per-row segment ids and the
    // node each row would point to; dense layouts leave these empty.
    std::vector<std::int64_t> segments;
    std::int64_t num_segments = 0;
    std::vector<std::int64_t> candidates;
};

/// Readouts over base nodes/edges only. Pointer scores are per-candidate
/// log-probabilities; mask_one and graph pointers are log-probabilities over
/// base nodes; permutation pointers are clamped log-Sinkhorn matrices.
std::vector<DecodedFeature> decode(ad::Tape& tape, ad::Var H, const Encoded& enc, const GraphPlan& plan,
                                   const VarParams& p, const ModelConfig& cfg);

} // namespace deqr::model
