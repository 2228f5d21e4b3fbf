#include "fedtree/topology.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>

namespace fedtree {

namespace {

struct ActiveCluster {
    int node_id = 0;
    std::vector<int> members;  // ascending leaf ids
};

// Average linkage between two clusters, summed over base-matrix entries in a
// canonical order (cluster with the smaller leading member outermost, members
// ascending). Recomputing from the base matrix instead of updating linkage
// incrementally keeps every step's value independent of merge history.
double average_linkage(const Matrix& d, const ActiveCluster& x, const ActiveCluster& y) {
    const ActiveCluster& first = x.members.front() < y.members.front() ? x : y;
    const ActiveCluster& second = x.members.front() < y.members.front() ? y : x;
    double sum = 0.0;
    for (int a : first.members) {
        for (int b : second.members) sum += d(a, b);
    }
    return sum / (static_cast<double>(x.members.size()) * static_cast<double>(y.members.size()));
}

std::vector<int> merged_members(const std::vector<int>& a, const std::vector<int>& b) {
    std::vector<int> out;
    out.reserve(a.size() + b.size());
    std::merge(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

}  // namespace

MergeTree build_merge_tree(const DistanceMatrix& distances) {
    distances.validate();
    const int n = distances.size();
    if (n < 2) throw std::invalid_argument("build_merge_tree: need at least 2 clients, got " +
                                           std::to_string(n));

    std::vector<ActiveCluster> active;
    active.reserve(n);
    for (int i = 0; i < n; ++i) active.push_back({i, {i}});

    MergeTree tree;
    tree.leaf_count = n;
    tree.merges.reserve(n - 1);

    double prev_height = 0.0;
    for (int step = 0; step < n - 1; ++step) {
        int best_i = -1;
        int best_j = -1;
        double best = std::numeric_limits<double>::infinity();
        std::pair<int, int> best_key{0, 0};
        for (std::size_t i = 0; i < active.size(); ++i) {
            for (std::size_t j = i + 1; j < active.size(); ++j) {
                double link = average_linkage(distances.entries, active[i], active[j]);
                std::pair<int, int> key =
                    std::minmax(active[i].members.front(), active[j].members.front());
                if (link < best || (link == best && key < best_key)) {
                    best = link;
                    best_key = key;
                    best_i = static_cast<int>(i);
                    best_j = static_cast<int>(j);
                }
            }
        }

        // Exact arithmetic makes average linkage monotone; guard the recorded
        // height against sub-ulp rounding of the recomputed means.
        double height = std::max(best, prev_height);
        prev_height = height;

        ActiveCluster& u = active[best_i];
        ActiveCluster& v = active[best_j];
        const bool u_leads = u.members.front() < v.members.front();
        MergeRecord record;
        record.left = u_leads ? u.node_id : v.node_id;
        record.right = u_leads ? v.node_id : u.node_id;
        record.height = height;
        record.id = n + step;
        tree.merges.push_back(record);

        ActiveCluster merged{record.id, merged_members(u.members, v.members)};
        active.erase(active.begin() + best_j);
        active[best_i] = std::move(merged);
    }
    return tree;
}

Partition cut(const MergeTree& tree, int clusters) {
    const int n = tree.leaf_count;
    if (clusters < 1 || clusters > n) {
        throw std::invalid_argument("cut: cluster count " + std::to_string(clusters) +
                                    " outside [1, " + std::to_string(n) + "]");
    }
    if (static_cast<int>(tree.merges.size()) != n - 1) {
        throw std::invalid_argument("cut: tree has " + std::to_string(tree.merges.size()) +
                                    " merges for " + std::to_string(n) + " leaves");
    }

    // Replay the first n - clusters merges over node-indexed leaf lists.
    std::vector<std::vector<int>> node_leaves(2 * n - 1);
    std::vector<bool> consumed(2 * n - 1, false);
    std::vector<bool> exists(2 * n - 1, false);
    for (int i = 0; i < n; ++i) {
        node_leaves[i] = {i};
        exists[i] = true;
    }
    for (int step = 0; step < n - clusters; ++step) {
        const MergeRecord& m = tree.merges[step];
        if (m.id != n + step || !exists[m.left] || !exists[m.right] || consumed[m.left] ||
            consumed[m.right]) {
            throw std::invalid_argument("cut: malformed merge record at step " +
                                        std::to_string(step));
        }
        node_leaves[m.id] = merged_members(node_leaves[m.left], node_leaves[m.right]);
        consumed[m.left] = true;
        consumed[m.right] = true;
        exists[m.id] = true;
    }

    std::vector<std::vector<int>> groups;
    for (int id = 0; id < 2 * n - 1; ++id) {
        if (exists[id] && !consumed[id]) groups.push_back(node_leaves[id]);
    }
    // Cluster ids follow each group's smallest member.
    std::sort(groups.begin(), groups.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });

    Partition p;
    p.cluster_count = static_cast<int>(groups.size());
    p.assignment.assign(n, -1);
    for (int c = 0; c < p.cluster_count; ++c) {
        for (int leaf : groups[c]) p.assignment[leaf] = c;
    }
    return p;
}

double silhouette(const DistanceMatrix& distances, const Partition& partition) {
    const int n = distances.size();
    if (partition.size() != n) {
        throw std::invalid_argument("silhouette: partition covers " +
                                    std::to_string(partition.size()) + " clients, expected " +
                                    std::to_string(n));
    }
    if (partition.cluster_count < 2) {
        throw std::invalid_argument("silhouette: undefined for a single cluster");
    }
    if (partition.cluster_count > n) {
        throw std::invalid_argument("silhouette: more clusters than clients");
    }
    std::vector<int> sizes(partition.cluster_count, 0);
    for (int i = 0; i < n; ++i) {
        int c = partition.assignment[i];
        if (c < 0 || c >= partition.cluster_count) {
            throw std::invalid_argument("silhouette: cluster id " + std::to_string(c) +
                                        " out of range for client " + std::to_string(i));
        }
        ++sizes[c];
    }
    for (int c = 0; c < partition.cluster_count; ++c) {
        if (sizes[c] == 0) {
            throw std::invalid_argument("silhouette: empty cluster " + std::to_string(c));
        }
    }

    double total = 0.0;
    std::vector<double> mean_to(partition.cluster_count);
    for (int i = 0; i < n; ++i) {
        const int own = partition.assignment[i];
        if (sizes[own] == 1) continue;  // singleton: s(i) = 0 by convention

        std::fill(mean_to.begin(), mean_to.end(), 0.0);
        for (int j = 0; j < n; ++j) {
            if (j != i) mean_to[partition.assignment[j]] += distances.entries(i, j);
        }
        const double a = mean_to[own] / static_cast<double>(sizes[own] - 1);
        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < partition.cluster_count; ++c) {
            if (c != own) b = std::min(b, mean_to[c] / static_cast<double>(sizes[c]));
        }
        const double denom = std::max(a, b);
        if (denom > 0.0) total += (b - a) / denom;  // s(i) = 0 when all distances vanish
    }
    return total / static_cast<double>(n);
}

double score(int clusters, const DistanceMatrix& distances, const MergeTree& tree, double tau) {
    if (clusters == 1) return tau;
    return silhouette(distances, cut(tree, clusters));
}

std::vector<int> search_space(int prev_count, int window, int client_count) {
    if (prev_count < 1 || prev_count > client_count) {
        throw std::invalid_argument("search_space: previous count " + std::to_string(prev_count) +
                                    " outside [1, " + std::to_string(client_count) + "]");
    }
    if (window < 1) {
        throw std::invalid_argument("search_space: window must be >= 1, got " +
                                    std::to_string(window));
    }
    std::vector<int> candidates;
    const int hi = std::min(client_count, prev_count + window - 1);
    for (int c = prev_count; c <= hi; ++c) candidates.push_back(c);
    return candidates;
}

DepthSchedule compute_depth_schedule(const MergeTree& tree,
                                     std::span<const DistanceMatrix> layer_distances, double tau,
                                     int window) {
    if (layer_distances.empty()) {
        throw std::invalid_argument("compute_depth_schedule: no layers");
    }
    for (const DistanceMatrix& d : layer_distances) {
        if (d.size() != tree.leaf_count) {
            throw std::invalid_argument("compute_depth_schedule: layer matrix covers " +
                                        std::to_string(d.size()) + " clients, tree has " +
                                        std::to_string(tree.leaf_count));
        }
    }

    DepthSchedule schedule;
    int prev = 1;
    for (const DistanceMatrix& d : layer_distances) {
        int best_count = prev;
        double best_score = -std::numeric_limits<double>::infinity();
        for (int c : search_space(prev, window, tree.leaf_count)) {
            double s = score(c, d, tree, tau);
            if (s > best_score) {  // ascending candidates: ties keep the smallest count
                best_score = s;
                best_count = c;
            }
        }
        schedule.counts.push_back(best_count);
        schedule.partitions.push_back(cut(tree, best_count));
        schedule.scores.push_back(best_score);
        prev = best_count;
    }
    schedule.validate();
    return schedule;
}

void DepthSchedule::validate() const {
    const int depth = this->depth();
    if (static_cast<int>(partitions.size()) != depth ||
        static_cast<int>(scores.size()) != depth) {
        throw std::invalid_argument("DepthSchedule: counts, partitions, scores sizes differ");
    }
    for (int l = 0; l < depth; ++l) {
        if (partitions[l].cluster_count != counts[l]) {
            throw std::invalid_argument("DepthSchedule: layer " + std::to_string(l) +
                                        " partition has " +
                                        std::to_string(partitions[l].cluster_count) +
                                        " clusters, count says " + std::to_string(counts[l]));
        }
        if (l == 0) continue;
        if (counts[l] < counts[l - 1]) {
            throw std::invalid_argument("DepthSchedule: count decreases at layer " +
                                        std::to_string(l));
        }
        // Deeper layers must refine shallower ones: together at depth l
        // implies together at depth l - 1.
        const Partition& fine = partitions[l];
        const Partition& coarse = partitions[l - 1];
        const int n = fine.size();
        for (int i = 0; i < n; ++i) {
            for (int j = i + 1; j < n; ++j) {
                if (fine.assignment[i] == fine.assignment[j] &&
                    coarse.assignment[i] != coarse.assignment[j]) {
                    throw std::invalid_argument("DepthSchedule: layer " + std::to_string(l) +
                                                " does not refine layer " + std::to_string(l - 1));
                }
            }
        }
    }
}

}  // namespace fedtree
