#pragma once

#include <span>
#include <vector>

#include "fedtree/lora.hpp"
#include "fedtree/topology.hpp"

namespace fedtree {

// What a client sends the server at a round boundary: its trained cluster
// adapters, one per layer. Uploads are indexed by client id.
struct ClientUpload {
    int client_id = 0;
    std::vector<AdapterPair> layers;
};

// What the server hands back: fresh experts for every layer.
struct ExpertAssignment {
    int client_id = 0;
    std::vector<LayerExperts> layers;
};

enum class Variant {
    ScalarMixed,    // cluster and external experts blended by learnable lambda
    Isolationist,   // external experts zeroed, lambda pinned to 1
};

struct PeerGroups {
    std::vector<int> peers;     // the client's own cluster, ascending, includes the client
    std::vector<int> external;  // everyone else, ascending; empty iff the cluster is universal
};

PeerGroups peer_groups(const Partition& partition, int client);

// Builds one layer's experts for one client: cluster expert = mean of the
// peers' uploads, external expert = mean of the others' (zero matrices of
// matching shape when there are no others). Means run in ascending client id
// with optional per-client weights (uniform when `weights` is empty).
// `persisted_lambda` is the client's own lambda carried across rounds; it is
// replaced by a frozen 1 when the external side is empty.
LayerExperts build_experts(std::span<const ClientUpload> uploads, const Partition& partition,
                           int client, int layer, double persisted_lambda,
                           std::span<const double> weights = {});

// Full server-side aggregation for one round boundary: experts for every
// client and layer under the given per-layer partitions.
// persisted_lambdas[k][l] is client k's current lambda at layer l. Uploads
// must be complete and ordered by client id.
std::vector<ExpertAssignment> assemble_round(std::span<const ClientUpload> uploads,
                                             std::span<const Partition> partitions,
                                             const std::vector<std::vector<double>>& persisted_lambdas,
                                             Variant variant,
                                             std::span<const double> weights = {});

}  // namespace fedtree
