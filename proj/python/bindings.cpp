#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "deqr/cayley.hpp"
#include "deqr/harness.hpp"

namespace py = pybind11;
using namespace deqr;

namespace {

py::dict summary_dict(const harness::EvalSummary& s) {
    py::dict per;
    for (const auto& [name, a] : s.per_feature) per[py::str(name)] = a;
    py::dict d;
    d["task_loss"] = s.task_loss;
    d["accuracy"] = s.accuracy;
    d["per_feature"] = per;
    d["solver_steps_mean"] = s.solver_steps_mean;
    d["solver_steps_max"] = s.solver_steps_max;
    d["seconds_per_sample"] = s.seconds_per_sample;
    d["count"] = s.count;
    d["converged_count"] = s.converged_count;
    d["stability_ok"] = s.stability_ok;
    return d;
}

} // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Deep-equilibrium algorithmic reasoning core";

    m.def("algorithms", [] { return tasks::kAlgorithms; }, "Names of the nine supported tasks");

    m.def("cayley_order", [](int n) { return cayley::cayley_graph(n).order(); }, py::arg("n"),
          "Order of the SL(2, Z_n) Cayley graph");
    m.def("choose_n", &cayley::choose_n, py::arg("num_nodes"),
          "Smallest modulus whose Cayley graph covers num_nodes vertices");
    m.def(
        "cayley_edges",
        [](int n) {
            const auto g = cayley::cayley_graph(n);
            std::vector<std::pair<int, int>> out;
            out.reserve(g.edges.size());
            for (const auto& e : g.edges) out.emplace_back(e[0], e[1]);
            return out;
        },
        py::arg("n"), "Directed edge list of the SL(2, Z_n) Cayley graph");

    m.def(
        "generate_dataset",
        [](const std::string& algorithm, int count, int size_lo, int size_hi, std::uint64_t seed,
           const std::string& split, const std::string& path) {
            tasks::Dataset ds = tasks::make_dataset(algorithm, count, size_lo, size_hi, seed, split);
            tasks::write_dataset(ds, path);
            return static_cast<int>(ds.instances.size());
        },
        py::arg("algorithm"), py::arg("count"), py::arg("size_lo"), py::arg("size_hi"),
        py::arg("seed"), py::arg("split"), py::arg("path"),
        "Generate a dataset and write it as JSON lines; returns the instance count");

    m.def(
        "train",
        [](const std::string& config_text) {
            harness::RunConfig cfg = harness::config_from_json_text(config_text);
            harness::TrainResult res = harness::train_run(cfg);
            py::dict d;
            d["best_epoch"] = res.best_epoch;
            d["best_valid_loss"] = res.best.valid_loss;
            d["epochs_run"] = static_cast<int>(res.rows.size() / 2);
            d["aborted"] = res.aborted;
            d["out_dir"] = cfg.out_dir;
            return d;
        },
        py::arg("config_json"),
        "Run training from a JSON config string; returns a summary dict");

    m.def(
        "evaluate",
        [](const std::string& checkpoint_path, const std::string& data_path) {
            harness::Checkpoint ckpt = harness::load_checkpoint(checkpoint_path);
            harness::LoadedData data = harness::load_data(data_path, ckpt.config);
            Rng rng(mix_seed(ckpt.config.seed, 77));
            return summary_dict(harness::evaluate_run(ckpt.config, ckpt.params, data, rng));
        },
        py::arg("checkpoint"), py::arg("data"),
        "Evaluate a stored checkpoint on a dataset; returns a metrics dict");

    m.def(
        "timing",
        [](const std::string& checkpoint_path, const std::string& data_path) {
            harness::Checkpoint ckpt = harness::load_checkpoint(checkpoint_path);
            harness::LoadedData data = harness::load_data(data_path, ckpt.config);
            Rng rng(mix_seed(ckpt.config.seed, 79));
            py::list rows;
            for (const auto& r : harness::timing_run(ckpt.config, ckpt.params, data, rng)) {
                py::dict d;
                d["model_kind"] = r.model_kind;
                d["seconds_per_sample"] = r.seconds_per_sample;
                d["steps_mean"] = r.steps_mean;
                d["steps_max"] = r.steps_max;
                rows.append(d);
            }
            return rows;
        },
        py::arg("checkpoint"), py::arg("data"),
        "Forward-timing comparison of the equilibrium model and the unrolled baseline");
}
