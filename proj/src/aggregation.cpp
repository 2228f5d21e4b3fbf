#include "fedtree/aggregation.hpp"

#include <stdexcept>
#include <string>

#include "fedtree/errors.hpp"

namespace fedtree {

namespace {

void check_uploads(std::span<const ClientUpload> uploads, int expected_clients) {
    if (static_cast<int>(uploads.size()) != expected_clients) {
        throw ProtocolError("aggregation: " + std::to_string(uploads.size()) + " uploads for " +
                            std::to_string(expected_clients) + " clients");
    }
    for (int k = 0; k < expected_clients; ++k) {
        if (uploads[k].client_id != k) {
            throw ProtocolError("aggregation: missing upload from client " + std::to_string(k));
        }
    }
}

// Weighted mean of the named clients' layer-l adapters, ascending client id.
AdapterPair mean_adapter(std::span<const ClientUpload> uploads, const std::vector<int>& members,
                         int layer, std::span<const double> weights) {
    const AdapterPair& head = uploads[members.front()].layers[layer];
    Matrix sum_a = Matrix::Zero(head.A.rows(), head.A.cols());
    Matrix sum_b = Matrix::Zero(head.B.rows(), head.B.cols());
    double total = 0.0;
    for (int member : members) {
        const AdapterPair& pair = uploads[member].layers[layer];
        if (pair.A.rows() != head.A.rows() || pair.A.cols() != head.A.cols() ||
            pair.B.rows() != head.B.rows() || pair.B.cols() != head.B.cols()) {
            throw ProtocolError("aggregation: client " + std::to_string(member) +
                                " uploaded mismatched adapter shapes at layer " +
                                std::to_string(layer));
        }
        const double w = weights.empty() ? 1.0 : weights[member];
        sum_a += w * pair.A;
        sum_b += w * pair.B;
        total += w;
    }
    if (!(total > 0.0)) {
        throw ProtocolError("aggregation: nonpositive total weight at layer " +
                            std::to_string(layer));
    }
    return AdapterPair{sum_a / total, sum_b / total};
}

}  // namespace

PeerGroups peer_groups(const Partition& partition, int client) {
    if (client < 0 || client >= partition.size()) {
        throw std::invalid_argument("peer_groups: client " + std::to_string(client) +
                                    " outside partition of size " +
                                    std::to_string(partition.size()));
    }
    PeerGroups groups;
    const int own = partition.assignment[client];
    for (int k = 0; k < partition.size(); ++k) {
        if (partition.assignment[k] == own) {
            groups.peers.push_back(k);
        } else {
            groups.external.push_back(k);
        }
    }
    return groups;
}

LayerExperts build_experts(std::span<const ClientUpload> uploads, const Partition& partition,
                           int client, int layer, double persisted_lambda,
                           std::span<const double> weights) {
    check_uploads(uploads, partition.size());
    if (layer < 0 || layer >= static_cast<int>(uploads.front().layers.size())) {
        throw std::invalid_argument("build_experts: layer " + std::to_string(layer) +
                                    " out of range");
    }
    if (!weights.empty() && static_cast<int>(weights.size()) != partition.size()) {
        throw ProtocolError("aggregation: " + std::to_string(weights.size()) + " weights for " +
                            std::to_string(partition.size()) + " clients");
    }

    const PeerGroups groups = peer_groups(partition, client);
    LayerExperts experts;
    experts.cluster = mean_adapter(uploads, groups.peers, layer, weights);
    if (groups.external.empty()) {
        // Universal cluster: nothing to mix against, lambda pinned to 1.
        const AdapterPair& shape = experts.cluster;
        experts.external = AdapterPair::zeros(static_cast<int>(shape.B.rows()),
                                              static_cast<int>(shape.A.cols()), shape.rank());
        experts.external_zeroed = true;
        experts.lambda = 1.0;
        experts.lambda_frozen = true;
    } else {
        experts.external = mean_adapter(uploads, groups.external, layer, weights);
        experts.external_zeroed = false;
        experts.lambda = persisted_lambda;
        experts.lambda_frozen = false;
    }
    return experts;
}

std::vector<ExpertAssignment> assemble_round(std::span<const ClientUpload> uploads,
                                             std::span<const Partition> partitions,
                                             const std::vector<std::vector<double>>& persisted_lambdas,
                                             Variant variant,
                                             std::span<const double> weights) {
    const int n = static_cast<int>(uploads.size());
    if (n == 0) throw ProtocolError("assemble_round: no uploads");
    check_uploads(uploads, n);
    const int depth = static_cast<int>(uploads.front().layers.size());
    if (static_cast<int>(partitions.size()) != depth) {
        throw ProtocolError("assemble_round: " + std::to_string(partitions.size()) +
                            " partitions for " + std::to_string(depth) + " layers");
    }
    if (static_cast<int>(persisted_lambdas.size()) != n) {
        throw ProtocolError("assemble_round: lambda state covers " +
                            std::to_string(persisted_lambdas.size()) + " clients, expected " +
                            std::to_string(n));
    }

    std::vector<ExpertAssignment> assignments(n);
    for (int k = 0; k < n; ++k) {
        if (static_cast<int>(persisted_lambdas[k].size()) != depth) {
            throw ProtocolError("assemble_round: client " + std::to_string(k) +
                                " lambda state covers " +
                                std::to_string(persisted_lambdas[k].size()) + " layers");
        }
        assignments[k].client_id = k;
        assignments[k].layers.reserve(depth);
        for (int l = 0; l < depth; ++l) {
            LayerExperts experts =
                build_experts(uploads, partitions[l], k, l, persisted_lambdas[k][l], weights);
            if (variant == Variant::Isolationist && !experts.external_zeroed) {
                // Ablation: keep the cluster expert but refuse the mix.
                experts.external = AdapterPair::zeros(static_cast<int>(experts.cluster.B.rows()),
                                                      static_cast<int>(experts.cluster.A.cols()),
                                                      experts.cluster.rank());
                experts.external_zeroed = true;
                experts.lambda = 1.0;
                experts.lambda_frozen = true;
            }
            assignments[k].layers.push_back(std::move(experts));
        }
    }
    return assignments;
}

}  // namespace fedtree
