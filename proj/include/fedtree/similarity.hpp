#pragma once

#include <span>
#include <vector>

#include "fedtree/lora.hpp"

namespace fedtree {

enum class Metric { Frobenius, Cosine };

// Client-by-client distance matrix: symmetric, nonnegative, zero diagonal.
struct DistanceMatrix {
    Matrix entries;

    int size() const { return static_cast<int>(entries.rows()); }

    // Throws std::invalid_argument when the invariants above are violated.
    void validate() const;
};

// Distance between two equally shaped matrices.
//   Frobenius: ||X - Y||_F
//   Cosine:    1 - <X, Y> / (||X|| ||Y||), with the conventions that two
//              zero matrices have distance 0 and exactly one zero matrix has
//              distance 1. Clamped to [0, 2] against rounding.
double pairwise_distance(const Matrix& x, const Matrix& y, Metric metric);

// Pairwise distances between the clients' B factors at one layer.
DistanceMatrix layer_distance_matrix(std::span<const Matrix> bs, Metric metric);

// Mean of the per-layer distance matrices; layers[l][k] is client k's B at
// layer l. Every layer must cover the same clients.
DistanceMatrix global_distance_matrix(std::span<const std::vector<Matrix>> layers, Metric metric);

}  // namespace fedtree
