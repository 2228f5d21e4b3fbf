#pragma once

#include <span>
#include <vector>

#include "fedtree/similarity.hpp"

namespace fedtree {

// One agglomerative merge. Nodes are numbered like the leaves-first
// convention used by scipy: leaves are 0..N-1 and the i-th merge creates
// node N+i. `height` is the average-linkage distance at which the two
// children were merged.
struct MergeRecord {
    int left = 0;
    int right = 0;
    double height = 0.0;
    int id = 0;
};

struct MergeTree {
    int leaf_count = 0;
    std::vector<MergeRecord> merges;
};

// Flat clustering: assignment[k] is client k's cluster. Cluster ids are
// contiguous from 0 and ordered by each cluster's smallest member.
struct Partition {
    int cluster_count = 0;
    std::vector<int> assignment;

    int size() const { return static_cast<int>(assignment.size()); }

    bool operator==(const Partition& other) const = default;
};

// Per-layer cluster counts and partitions chosen for an experiment, shallow
// to deep.
struct DepthSchedule {
    std::vector<int> counts;
    std::vector<Partition> partitions;
    std::vector<double> scores;

    int depth() const { return static_cast<int>(counts.size()); }

    // Asserts the monotone-refinement invariants: counts never decrease with
    // depth and each layer's partition refines the previous one. Only
    // meaningful for schedules cut from a single tree.
    void validate() const;
};

// Average-linkage (UPGMA) agglomerative clustering. Linkage values are
// recomputed from the base matrix at every step, summing members in
// ascending index order, so results are independent of merge history
// round-off. Ties pick the pair whose (smallest member, smallest member)
// key is lexicographically least. Requires size >= 2.
MergeTree build_merge_tree(const DistanceMatrix& distances);

// The partition obtained by undoing the last `clusters - 1` merges, i.e.
// applying the first N - clusters merges to the leaves.
Partition cut(const MergeTree& tree, int clusters);

// Mean silhouette width. Conventions: singleton clusters score 0, and a
// point with max(a, b) == 0 scores 0. Undefined (throws) for a single
// cluster.
double silhouette(const DistanceMatrix& distances, const Partition& partition);

// Depth-selection objective: tau for the trivial single cluster, otherwise
// the silhouette of cutting `tree` at `clusters`, evaluated on the given
// (typically per-layer) distance matrix.
double score(int clusters, const DistanceMatrix& distances, const MergeTree& tree, double tau);

// Candidate cluster counts for one layer: previous count up to
// min(client_count, previous + window - 1), ascending. Never empty while
// 1 <= prev_count <= client_count and window >= 1.
std::vector<int> search_space(int prev_count, int window, int client_count);

// Greedy shallow-to-deep pass: at each layer pick the count in the search
// space maximizing `score` on that layer's distances (smallest count wins
// ties), cut the global tree there, and carry the count forward. Counts are
// monotone by construction.
DepthSchedule compute_depth_schedule(const MergeTree& tree,
                                     std::span<const DistanceMatrix> layer_distances, double tau,
                                     int window);

}  // namespace fedtree
