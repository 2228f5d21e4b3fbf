#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedtree/aggregation.hpp"
#include "fedtree/lora.hpp"
#include "fedtree/similarity.hpp"
#include "fedtree/topology.hpp"

namespace fedtree {

enum class Mode {
    FedTree,               // depth schedule cut from the global merge tree
    FedIt,                 // one universal cluster at every layer
    LocalOnly,             // no aggregation after warmup
    FixedK,                // constant cluster count at every layer
    IndependentLayerwise,  // fresh tree and free count per layer (ablation)
};

enum class Weighting { Uniform, BySamples };

// Synthetic layered-regression task. Clients are split into equal groups;
// each group's teacher shares the backbone plus planted low-rank deltas that
// are identical across groups for the first `shared_depth` layers and
// group-specific (scaled by divergence_scale) below.
struct SyntheticSpec {
    int group_count = 2;
    int clients_per_group = 4;
    int shared_depth = 3;
    double divergence_scale = 2.5;
    double noise_std = 0.7;
    int train_samples = 256;
    int test_samples = 128;
    int input_dim = 16;
};

struct FederationConfig {
    std::uint64_t seed = 42;
    int clients = 8;             // N
    int layers = 6;              // L
    std::vector<int> dims;       // output width per layer; empty -> 16 everywhere
    int rank = 2;
    Metric metric = Metric::Frobenius;
    double tau = 0.03;
    int window = 4;              // K
    int warmup_epochs = 5;       // E_warm
    int local_epochs = 2;        // E
    int rounds = 30;             // T
    double eta = 0.01;
    int batch_size = 32;
    Activation activation = Activation::Tanh;
    Variant variant = Variant::ScalarMixed;
    Mode mode = Mode::FedTree;
    int fixed_k = 1;
    Weighting weighting = Weighting::Uniform;
    SyntheticSpec data;

    // Layer widths including the input: [input_dim, dims...].
    std::vector<int> width_chain() const;

    // Throws ConfigError naming the offending key.
    void validate() const;
};

struct ClientState {
    int id = 0;
    std::vector<Sample> train;
    std::vector<Sample> test;
    std::vector<LayerExperts> experts;
};

struct Federation {
    FrozenBackbone backbone;
    std::vector<ClientState> clients;
    // teachers[g][l]: group g's planted delta at layer l.
    std::vector<std::vector<AdapterPair>> teachers;
};

struct Topology {
    MergeTree tree;
    DepthSchedule schedule;
    std::vector<DistanceMatrix> layer_distances;
    DistanceMatrix global_distance;
};

struct RoundReport {
    int round = 0;
    std::vector<double> train_loss;           // per client, post local training
    std::vector<double> test_loss;            // per client
    std::vector<std::vector<double>> lambdas; // [client][layer]
    double mean_train_loss = 0.0;
    double mean_test_loss = 0.0;
};

struct ExperimentReport {
    FederationConfig config;
    MergeTree tree;
    DepthSchedule schedule;
    std::vector<RoundReport> rounds;
    std::vector<double> final_test_loss;  // last round, per client
    bool completed = false;
    std::string error;  // set when a numeric failure aborted the run
};

// Deterministic world-building: backbone, per-group teachers, and clients
// with generated train/test splits and identically initialized adapters
// (A Gaussian with std 0.02 broadcast to everyone, B zero).
Federation generate_federation(const FederationConfig& config);

// Local-only pre-training for every client; returns each client's adapters
// (the inputs to topology construction) and leaves the trained state on the
// clients. warmup_epochs == 0 is a no-op that returns the shared init.
std::vector<std::vector<AdapterPair>> warmup(const FrozenBackbone& backbone,
                                             std::vector<ClientState>& clients,
                                             const FederationConfig& config, int max_threads);

// Distance matrices from the warmup B factors, the global merge tree, and
// the depth schedule for fedtree mode. Runs once per experiment.
Topology build_topology(const std::vector<std::vector<AdapterPair>>& warm_adapters,
                        const FederationConfig& config);

// One federated round: aggregate uploads under the per-layer partitions,
// hand every client fresh experts, train local_epochs locally (clients in
// parallel, results slotted by id), and measure losses. LocalOnly skips the
// aggregation exchange entirely.
RoundReport run_round(std::vector<ClientState>& clients, const FrozenBackbone& backbone,
                      std::span<const Partition> partitions, const FederationConfig& config,
                      int round, int max_threads);

// End-to-end experiment. A NumericError mid-run is recorded on the report
// (completed = false, rounds up to the failure) instead of propagating.
// max_threads <= 0 uses the hardware concurrency.
ExperimentReport run_experiment(const FederationConfig& config, int max_threads = 0);

}  // namespace fedtree
