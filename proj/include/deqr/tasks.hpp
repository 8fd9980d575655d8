#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "deqr/common.hpp"

namespace deqr::tasks {

enum class Stage { Input, Output };
enum class Location { Node, Edge, Graph };
enum class DType { Scalar, Mask, MaskOne, Categorical, Pointer, PermutationPointer };

std::string to_string(Stage s);
std::string to_string(Location l);
std::string to_string(DType d);
Stage stage_from_string(const std::string& s);
Location location_from_string(const std::string& s);
DType dtype_from_string(const std::string& s);

struct FeatureSpec {
    std::string name;
    Stage stage = Stage::Input;
    Location location = Location::Node;
    DType dtype = DType::Scalar;
    int num_classes = 0; // categorical only
};

/// One problem instance. Node-located feature values have length n, edge
/// ones |edges|, graph ones 1. Pointer values are node indices; every
/// (v, pointer[v]) pair must be an edge of the instance.
struct GraphInstance {
    std::string algorithm;
    int n = 0;
    int base_n = 0; // task nodes; n > base_n only after CGP augmentation
    std::vector<std::array<int, 2>> edges; // directed, self-loops included
    std::vector<std::uint8_t> edge_types;  // 0 = base, 1 = cayley
    std::map<std::string, std::vector<double>> features;
    int steps = 0; // ground-truth iteration count of the classical algorithm
    bool cgp_augmented = false;

    bool has_edge(int src, int dst) const;
};

extern const std::vector<std::string> kAlgorithms;
bool is_known_algorithm(const std::string& algorithm);

/// Full feature list (inputs then outputs) for one of the nine algorithms.
const std::vector<FeatureSpec>& algorithm_specs(const std::string& algorithm);
std::vector<FeatureSpec> input_specs(const std::string& algorithm);
std::vector<FeatureSpec> output_specs(const std::string& algorithm);

struct AdjStructure {
    std::vector<std::array<int, 2>> arcs; // directed, no self-loops
    std::vector<double> weights;          // aligned with arcs; empty if unweighted
};

/// Erdos-Renyi sampler: each unordered pair is kept with probability p.
/// Undirected graphs emit both directions (sharing the weight); acyclic ones
/// orient each pair low-to-high under a random permutation. Weights are
/// uniform in [0.02, 1.0].
AdjStructure gen_er_graph(int n, double p, bool weighted, bool acyclic, bool undirected, Rng& rng);

/// Samples inputs for the algorithm at size n and fills in the outputs and
/// step count via run_oracle.
GraphInstance make_instance(const std::string& algorithm, int n, Rng& rng);

/// Reference executor. Reads input features from `inst`, returns the output
/// feature map, and sets `steps_out` to the number of iterations the
/// classical algorithm takes. Malformed inputs throw ContractViolation.
std::map<std::string, std::vector<double>> run_oracle(const std::string& algorithm,
                                                      const GraphInstance& inst, int* steps_out = nullptr);

struct Dataset {
    std::string algorithm;
    std::string split;
    std::uint64_t seed = 0;
    std::vector<GraphInstance> instances;
};

Dataset make_dataset(const std::string& algorithm, int count, int size_lo, int size_hi,
                     std::uint64_t seed, const std::string& split);

/// JSON-lines round trip: a header line followed by one instance per line.
/// read(write(dataset)) reproduces the dataset bit for bit.
void write_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset read_dataset(const std::filesystem::path& path);

/// Validates an instance against its algorithm's specs (lengths, mask
/// values, pointer edges, sortedness for the search tasks).
void validate_instance(const GraphInstance& inst);

} // namespace deqr::tasks
