#include <doctest.h>

#include "fedtree/aggregation.hpp"
#include "fedtree/errors.hpp"

using namespace fedtree;

namespace {

// Four clients, one layer (2x2 weights, rank 1), with easily averaged values:
// client k uploads A = k+1 everywhere, B = 10(k+1) everywhere.
std::vector<ClientUpload> four_uploads() {
    std::vector<ClientUpload> uploads(4);
    for (int k = 0; k < 4; ++k) {
        uploads[k].client_id = k;
        uploads[k].layers.push_back(AdapterPair{Matrix::Constant(1, 2, k + 1.0),
                                                Matrix::Constant(2, 1, 10.0 * (k + 1))});
    }
    return uploads;
}

const Partition kPairs{2, {0, 0, 1, 1}};
const Partition kUniversal{1, {0, 0, 0, 0}};

}  // namespace

TEST_CASE("peer_groups splits a partition around one client") {
    const PeerGroups g1 = peer_groups(kPairs, 1);
    CHECK(g1.peers == std::vector<int>{0, 1});
    CHECK(g1.external == std::vector<int>{2, 3});

    const PeerGroups g2 = peer_groups(kPairs, 2);
    CHECK(g2.peers == std::vector<int>{2, 3});
    CHECK(g2.external == std::vector<int>{0, 1});

    const PeerGroups all = peer_groups(kUniversal, 3);
    CHECK(all.peers == std::vector<int>{0, 1, 2, 3});
    CHECK(all.external.empty());

    CHECK_THROWS_AS(peer_groups(kPairs, 7), std::invalid_argument);
}

TEST_CASE("build_experts averages peers and externals separately") {
    const auto uploads = four_uploads();
    const LayerExperts e = build_experts(uploads, kPairs, 0, 0, 0.37);

    // Peers {0,1}: A mean 1.5, B mean 15; externals {2,3}: A mean 3.5, B mean 35.
    CHECK(e.cluster.A(0, 0) == 1.5);
    CHECK(e.cluster.B(1, 0) == 15.0);
    CHECK(e.external.A(0, 1) == 3.5);
    CHECK(e.external.B(0, 0) == 35.0);
    CHECK(e.lambda == 0.37);
    CHECK_FALSE(e.lambda_frozen);
    CHECK_FALSE(e.external_zeroed);
}

TEST_CASE("a universal cluster zeroes the external expert and pins lambda") {
    const auto uploads = four_uploads();
    const LayerExperts e = build_experts(uploads, kUniversal, 2, 0, 0.37);
    CHECK(e.cluster.A(0, 0) == 2.5);
    CHECK(e.cluster.B(0, 0) == 25.0);
    CHECK(e.external.A.isZero(0.0));
    CHECK(e.external.B.isZero(0.0));
    CHECK(e.external_zeroed);
    CHECK(e.lambda == 1.0);
    CHECK(e.lambda_frozen);
}

TEST_CASE("sample weights bias the means") {
    const auto uploads = four_uploads();
    const std::vector<double> weights{1.0, 3.0, 1.0, 1.0};
    const LayerExperts e = build_experts(uploads, kPairs, 0, 0, 0.5, weights);
    // Peers {0,1} with weights {1,3}: (1*1 + 3*2) / 4 and (1*10 + 3*20) / 4.
    CHECK(e.cluster.A(0, 0) == 1.75);
    CHECK(e.cluster.B(0, 0) == 17.5);
    // Externals {2,3} carry equal weights, so their mean is plain.
    CHECK(e.external.B(0, 0) == 35.0);
}

TEST_CASE("assemble_round hands out per-layer experts") {
    auto uploads = four_uploads();
    // Second layer with distinct shapes (3x2, rank 1) to catch cross-layer mixups.
    for (int k = 0; k < 4; ++k) {
        uploads[k].layers.push_back(AdapterPair{Matrix::Constant(1, 2, 2.0 * (k + 1)),
                                                Matrix::Constant(3, 1, 5.0 * (k + 1))});
    }
    const std::vector<Partition> partitions{kUniversal, kPairs};
    const std::vector<std::vector<double>> lambdas(4, std::vector<double>{0.9, 0.6});

    const auto assignments =
        assemble_round(uploads, partitions, lambdas, Variant::ScalarMixed);
    REQUIRE(assignments.size() == 4);
    for (int k = 0; k < 4; ++k) {
        CHECK(assignments[k].client_id == k);
        REQUIRE(assignments[k].layers.size() == 2);
        // Layer 0 is universal: frozen lambda, zero external.
        CHECK(assignments[k].layers[0].lambda == 1.0);
        CHECK(assignments[k].layers[0].external_zeroed);
        // Layer 1 mixes: persisted lambda survives.
        CHECK(assignments[k].layers[1].lambda == 0.6);
        CHECK_FALSE(assignments[k].layers[1].lambda_frozen);
    }

    // Same cluster, same layer: bit-identical cluster experts.
    CHECK((assignments[0].layers[1].cluster.A.array() ==
           assignments[1].layers[1].cluster.A.array())
              .all());
    CHECK((assignments[2].layers[1].cluster.B.array() ==
           assignments[3].layers[1].cluster.B.array())
              .all());
    // Different clusters disagree.
    CHECK(assignments[0].layers[1].cluster.A(0, 0) != assignments[2].layers[1].cluster.A(0, 0));
}

TEST_CASE("the isolationist variant refuses every external expert") {
    const auto uploads = four_uploads();
    const std::vector<Partition> partitions{kPairs};
    const std::vector<std::vector<double>> lambdas(4, std::vector<double>{0.5});

    const auto assignments =
        assemble_round(uploads, partitions, lambdas, Variant::Isolationist);
    for (const ExpertAssignment& a : assignments) {
        CHECK(a.layers[0].external_zeroed);
        CHECK(a.layers[0].external.A.isZero(0.0));
        CHECK(a.layers[0].external.B.isZero(0.0));
        CHECK(a.layers[0].lambda == 1.0);
        CHECK(a.layers[0].lambda_frozen);
    }
    // The cluster mean itself is unchanged by the variant.
    CHECK(assignments[0].layers[0].cluster.A(0, 0) == 1.5);
}

TEST_CASE("incomplete or inconsistent exchanges raise ProtocolError") {
    auto uploads = four_uploads();

    std::vector<ClientUpload> missing(uploads.begin(), uploads.begin() + 3);
    CHECK_THROWS_AS(build_experts(missing, kPairs, 0, 0, 0.5), ProtocolError);

    auto swapped = uploads;
    swapped[2].client_id = 3;
    CHECK_THROWS_WITH_AS(build_experts(swapped, kPairs, 0, 0, 0.5),
                         "aggregation: missing upload from client 2", ProtocolError);

    const std::vector<double> short_weights{1.0, 2.0};
    CHECK_THROWS_AS(build_experts(uploads, kPairs, 0, 0, 0.5, short_weights), ProtocolError);

    const std::vector<Partition> partitions{kPairs};
    const std::vector<std::vector<double>> bad_lambdas(3, std::vector<double>{0.5});
    CHECK_THROWS_AS(assemble_round(uploads, partitions, bad_lambdas, Variant::ScalarMixed),
                    ProtocolError);

    auto ragged = uploads;
    ragged[1].layers[0].A = Matrix::Constant(1, 3, 1.0);  // wrong d_in
    CHECK_THROWS_AS(build_experts(ragged, kPairs, 0, 0, 0.5), ProtocolError);
}
