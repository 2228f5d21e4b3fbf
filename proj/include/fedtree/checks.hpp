#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedtree/similarity.hpp"
#include "fedtree/topology.hpp"

namespace fedtree {

// Self-contained verification battery behind `fedtree check`. Every check
// compares the production code against an oracle written independently in
// this module (naive dense forward passes, textbook silhouette, brute-force
// agglomeration), so a regression in the main path cannot hide in the
// reference values.

struct CheckResult {
    std::string name;
    bool pass = false;
    double max_error = 0.0;
    std::string detail;
};

// Analytic adapter/effective-weight gradients vs central finite differences
// of the batch loss on randomized small models.
CheckResult check_gradient_fidelity(int cases = 120, std::uint64_t seed = 61214);

// silhouette() vs a direct transcription of the mean silhouette width.
CheckResult check_silhouette_oracle(int cases = 500, std::uint64_t seed = 80310);

// build_merge_tree() vs a brute-force average-linkage agglomerator.
CheckResult check_ahc_brute_force(int cases = 200, std::uint64_t seed = 90125);

// Depth schedules on random inputs: monotone counts, partitions are cuts of
// the tree, consecutive layers refine.
CheckResult check_schedule_structure(int cases = 100, std::uint64_t seed = 70211);

// Random SGD trajectories keep lambda in [0, 1] and never move the external
// expert. Fails when the clamp test hook is disabled.
CheckResult check_lambda_invariants(int cases = 200, std::uint64_t seed = 50515);

// With tau high enough that every layer stays at one cluster, fedtree mode
// must reproduce the fedit baseline byte for byte.
CheckResult check_fedavg_reduction();

std::vector<CheckResult> run_all_checks();

// Oracles, exposed for the test suites.
namespace oracle {

// Dense forward pass materializing every effective weight with plain loops.
Vector dense_model_forward(const std::vector<Matrix>& w0, const std::vector<Matrix>& cluster_a,
                           const std::vector<Matrix>& cluster_b, const std::vector<Matrix>& ext_a,
                           const std::vector<Matrix>& ext_b, const std::vector<double>& lambda,
                           bool tanh_activation, const Vector& x);

double silhouette_reference(const DistanceMatrix& distances, const Partition& partition);

MergeTree ahc_reference(const DistanceMatrix& distances);

}  // namespace oracle

}  // namespace fedtree
