#pragma once

#include <filesystem>
#include <functional>
#include <optional>

#include "deqr/equilibrium.hpp"

namespace deqr::harness {

enum class ModelKind { Dear, NarUnrolled };
std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct RunConfig {
    std::string algorithm;
    ModelKind model_kind = ModelKind::Dear;
    model::ModelConfig model;
    eq::EquilibriumConfig eq;
    int batch_size = 32;
    double learning_rate = 3e-4;
    int epochs = 100;
    std::uint64_t seed = 1;
    std::string train_path, valid_path, test_path;
    std::string out_dir;
    std::string teacher_checkpoint;
    int unrolled_eval_steps = 0; // 0 = use each instance's ground-truth count
    bool deterministic = false;  // zero the timing column so logs are reproducible
};

/// Fail-fast JSON config parsing: unknown keys are errors, absent keys take
/// the documented defaults.
RunConfig config_from_json_text(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string config_to_json_text(const RunConfig& cfg);

/// Named experiment scales. Sizes are train lo-hi / valid / test; the test
/// split is sized past the training range to probe size generalization.
struct Profile {
    std::string name;
    int train_count, valid_count, test_count;
    int train_lo, train_hi, valid_size, test_size;
    int epochs;
    int latent_dim;
    double learning_rate;
};
Profile get_profile(const std::string& name); // "desk" or "paper"
void apply_profile(RunConfig& cfg, const Profile& p);

struct MetricsRow {
    int epoch = 0;
    std::string split;
    double task_loss = 0.0, align_loss = 0.0, jac_loss = 0.0, accuracy = 0.0;
    double solver_steps_mean = 0.0;
    int solver_steps_max = 0;
    double seconds_per_sample = 0.0;
};
std::string metrics_csv_header();
std::string to_csv(const MetricsRow& row);
void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

/// Index of the row with the lowest validation task loss (earliest on ties).
std::optional<std::size_t> select_model(const std::vector<MetricsRow>& rows);

struct Checkpoint {
    int epoch = 0;
    double valid_loss = 0.0;
    std::int64_t adam_step = 0;
    RunConfig config;
    model::ModelParams params;
    eq::GradMap adam_m, adam_v;
};

/// Single-file container: magic + JSON metadata (with an array directory)
/// followed by raw little-endian f64 payloads. Loading restores evaluation
/// bit for bit; unknown versions are rejected.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct Adam {
    double lr = 3e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    eq::GradMap m, v;
    std::int64_t step = 0;
    void update(model::ModelParams& params, const eq::GradMap& grads);
};

/// A dataset with CGP augmentation applied (when requested) and plans built.
struct LoadedData {
    tasks::Dataset dataset;
    std::vector<model::GraphPlan> plans;
};
LoadedData load_data(const std::filesystem::path& path, const RunConfig& cfg);

struct EvalSummary {
    double task_loss = 0.0;
    double accuracy = 0.0;
    std::map<std::string, double> per_feature;
    double solver_steps_mean = 0.0;
    int solver_steps_max = 0;
    double seconds_per_sample = 0.0;
    int count = 0;
    int converged_count = 0;
    // True iff every converged instance re-verified residual(H*, P(H*)) < tol.
    bool stability_ok = true;
};

EvalSummary evaluate_run(const RunConfig& cfg, const model::ModelParams& params, LoadedData& data,
                         Rng& rng);

struct TrainResult {
    std::vector<MetricsRow> rows;
    Checkpoint best;
    int best_epoch = 0;
    bool aborted = false; // loss went non-finite; best checkpoint is still valid
};

/// Full training run: epoch loop with shuffled batches, Adam updates,
/// per-epoch train/valid metrics rows, best-checkpoint selection by
/// validation task loss. Writes metrics.csv, best.ckpt and last.ckpt under
/// cfg.out_dir. on_row (optional) observes each metrics row as it lands.
TrainResult train_run(const RunConfig& cfg,
                      const std::function<void(const MetricsRow&)>& on_row = {});

struct TimingRow {
    std::string model_kind;
    double seconds_per_sample = 0.0;
    double steps_mean = 0.0;
    int steps_max = 0;
};

/// Forward-only wall-clock comparison on one dataset: the equilibrium model
/// against the unrolled baseline at ground-truth step counts, sharing the
/// same weights.
std::vector<TimingRow> timing_run(const RunConfig& cfg, const model::ModelParams& params,
                                  LoadedData& data, Rng& rng);

/// Trajectory files for align-debug: JSON with a shared state shape and one
/// flat row per state.
void write_trajectory(const std::vector<ad::Tensor>& states, const std::filesystem::path& path);
std::vector<ad::Tensor> read_trajectory(const std::filesystem::path& path);

} // namespace deqr::harness
