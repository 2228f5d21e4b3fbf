#include "fedtree/checks.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <utility>

#include "fedtree/aggregation.hpp"
#include "fedtree/errors.hpp"
#include "fedtree/federation.hpp"
#include "fedtree/lora.hpp"
#include "fedtree/report_io.hpp"
#include "fedtree/rng.hpp"

namespace fedtree {

namespace oracle {

// Everything in this namespace is written from the definitions, with plain
// loops and no calls into the production code paths it is checking.

Vector dense_model_forward(const std::vector<Matrix>& w0, const std::vector<Matrix>& cluster_a,
                           const std::vector<Matrix>& cluster_b, const std::vector<Matrix>& ext_a,
                           const std::vector<Matrix>& ext_b, const std::vector<double>& lambda,
                           bool tanh_activation, const Vector& x) {
    Vector h = x;
    const std::size_t depth = w0.size();
    for (std::size_t l = 0; l < depth; ++l) {
        const auto rows = w0[l].rows();
        const auto cols = w0[l].cols();
        const auto rank = cluster_b[l].cols();
        Matrix w(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) {
                double cluster = 0.0;
                double external = 0.0;
                for (Eigen::Index t = 0; t < rank; ++t) {
                    cluster += cluster_b[l](i, t) * cluster_a[l](t, j);
                    external += ext_b[l](i, t) * ext_a[l](t, j);
                }
                w(i, j) = w0[l](i, j) + lambda[l] * cluster + (1.0 - lambda[l]) * external;
            }
        }
        Vector next = Vector::Zero(rows);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) next(i) += w(i, j) * h(j);
        }
        if (l + 1 < depth && tanh_activation) {
            for (Eigen::Index i = 0; i < rows; ++i) next(i) = std::tanh(next(i));
        }
        h = next;
    }
    return h;
}

double silhouette_reference(const DistanceMatrix& distances, const Partition& partition) {
    const int n = distances.size();
    std::vector<std::vector<int>> clusters(partition.cluster_count);
    for (int i = 0; i < n; ++i) clusters[partition.assignment[i]].push_back(i);

    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const std::vector<int>& own = clusters[partition.assignment[i]];
        if (own.size() == 1) continue;  // singleton: contributes 0

        double a = 0.0;
        for (int j : own) {
            if (j != i) a += distances.entries(i, j);
        }
        a /= static_cast<double>(own.size() - 1);

        double b = std::numeric_limits<double>::infinity();
        for (int c = 0; c < partition.cluster_count; ++c) {
            if (c == partition.assignment[i]) continue;
            double mean = 0.0;
            for (int j : clusters[c]) mean += distances.entries(i, j);
            mean /= static_cast<double>(clusters[c].size());
            b = std::min(b, mean);
        }
        if (std::max(a, b) > 0.0) total += (b - a) / std::max(a, b);
    }
    return total / static_cast<double>(n);
}

MergeTree ahc_reference(const DistanceMatrix& distances) {
    const int n = distances.size();
    std::vector<std::set<int>> clusters(n);
    std::vector<int> ids(n);
    for (int i = 0; i < n; ++i) {
        clusters[i].insert(i);
        ids[i] = i;
    }

    MergeTree tree;
    tree.leaf_count = n;
    double last_height = 0.0;
    for (int step = 0; step < n - 1; ++step) {
        double best = std::numeric_limits<double>::infinity();
        std::pair<int, int> best_key{std::numeric_limits<int>::max(),
                                     std::numeric_limits<int>::max()};
        std::size_t pick_p = 0;
        std::size_t pick_q = 0;
        for (std::size_t p = 0; p < clusters.size(); ++p) {
            for (std::size_t q = p + 1; q < clusters.size(); ++q) {
                // Mean pairwise distance; members of the cluster holding the
                // globally smaller index are traversed in the outer loop, the
                // contractual summation order.
                const bool p_first = *clusters[p].begin() < *clusters[q].begin();
                const std::set<int>& outer = p_first ? clusters[p] : clusters[q];
                const std::set<int>& inner = p_first ? clusters[q] : clusters[p];
                double sum = 0.0;
                for (int a : outer) {
                    for (int b : inner) sum += distances.entries(a, b);
                }
                const double mean =
                    sum / static_cast<double>(clusters[p].size() * clusters[q].size());
                std::pair<int, int> key{std::min(*clusters[p].begin(), *clusters[q].begin()),
                                        std::max(*clusters[p].begin(), *clusters[q].begin())};
                if (mean < best || (mean == best && key < best_key)) {
                    best = mean;
                    best_key = key;
                    pick_p = p;
                    pick_q = q;
                }
            }
        }

        const bool p_first = *clusters[pick_p].begin() < *clusters[pick_q].begin();
        MergeRecord record;
        record.left = p_first ? ids[pick_p] : ids[pick_q];
        record.right = p_first ? ids[pick_q] : ids[pick_p];
        record.height = std::max(best, last_height);
        record.id = n + step;
        last_height = record.height;
        tree.merges.push_back(record);

        clusters[pick_p].insert(clusters[pick_q].begin(), clusters[pick_q].end());
        ids[pick_p] = record.id;
        clusters.erase(clusters.begin() + pick_q);
        ids.erase(ids.begin() + pick_q);
    }
    return tree;
}

}  // namespace oracle

namespace {

// Gradient agreement: relative to the larger magnitude, with a floor that
// turns the bound into an absolute one for near-zero gradients.
constexpr double kGradRelTol = 1e-6;
constexpr double kGradDenomFloor = 1e-3;

constexpr double kOracleTol = 1e-12;

struct RandomModel {
    FrozenBackbone backbone;
    std::vector<LayerExperts> experts;
    std::vector<Sample> batch;
};

Matrix random_matrix(Rng& rng, int rows, int cols, double scale) {
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m(i, j) = scale * rng.normal();
    }
    return m;
}

RandomModel random_model(Rng& rng) {
    const int depth = 1 + static_cast<int>(rng.below(3));
    const int rank = 1 + static_cast<int>(rng.below(3));
    std::vector<int> chain(depth + 1);
    for (int& w : chain) w = std::max(2, rank) + static_cast<int>(rng.below(7));

    RandomModel model;
    model.backbone.activation = rng.below(2) == 0 ? Activation::Tanh : Activation::Identity;
    for (int l = 0; l < depth; ++l) {
        model.backbone.layers.push_back(
            random_matrix(rng, chain[l + 1], chain[l], 1.0 / std::sqrt(chain[l])));
        LayerExperts e;
        e.cluster = AdapterPair{random_matrix(rng, rank, chain[l], 0.4),
                                random_matrix(rng, chain[l + 1], rank, 0.4)};
        e.external_zeroed = rng.below(5) == 0;
        if (e.external_zeroed) {
            e.external = AdapterPair::zeros(chain[l + 1], chain[l], rank);
        } else {
            e.external = AdapterPair{random_matrix(rng, rank, chain[l], 0.4),
                                     random_matrix(rng, chain[l + 1], rank, 0.4)};
        }
        e.lambda_frozen = false;
        switch (rng.below(4)) {
            case 0: e.lambda = 0.0; break;
            case 1: e.lambda = 1.0; break;
            default: e.lambda = rng.uniform(); break;
        }
        model.experts.push_back(std::move(e));
    }
    const int batch = 1 + static_cast<int>(rng.below(4));
    for (int s = 0; s < batch; ++s) {
        model.batch.push_back(Sample{random_matrix(rng, chain.front(), 1, 1.0),
                                     random_matrix(rng, chain.back(), 1, 1.0)});
    }
    return model;
}

// Batch loss through the oracle's dense forward pass; the only code the
// finite differences ever touch.
double oracle_batch_loss(const RandomModel& model) {
    std::vector<Matrix> w0, ca, cb, ea, eb;
    std::vector<double> lambda;
    for (std::size_t l = 0; l < model.backbone.layers.size(); ++l) {
        w0.push_back(model.backbone.layers[l]);
        ca.push_back(model.experts[l].cluster.A);
        cb.push_back(model.experts[l].cluster.B);
        ea.push_back(model.experts[l].external.A);
        eb.push_back(model.experts[l].external.B);
        lambda.push_back(model.experts[l].lambda);
    }
    const bool tanh_act = model.backbone.activation == Activation::Tanh;
    double total = 0.0;
    for (const Sample& s : model.batch) {
        Vector out = oracle::dense_model_forward(w0, ca, cb, ea, eb, lambda, tanh_act, s.x);
        for (Eigen::Index i = 0; i < out.size(); ++i) {
            const double r = out(i) - s.y(i);
            total += r * r;
        }
    }
    return total / static_cast<double>(model.batch.size());
}

double grad_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradDenomFloor});
    return std::abs(analytic - numeric) / denom;
}

DistanceMatrix random_distances(Rng& rng, int n, bool quantized) {
    DistanceMatrix d;
    d.entries = Matrix::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = i + 1; j < n; ++j) {
            double value = quantized ? 0.25 * static_cast<double>(1 + rng.below(4))
                                     : 0.05 + rng.uniform();
            d.entries(i, j) = value;
            d.entries(j, i) = value;
        }
    }
    return d;
}

// Random partition in canonical labeling (cluster ids ordered by smallest
// member), with every cluster nonempty.
Partition random_partition(Rng& rng, int n, int clusters) {
    std::vector<int> raw(n);
    for (int i = 0; i < clusters; ++i) raw[i] = i;
    for (int i = clusters; i < n; ++i) raw[i] = static_cast<int>(rng.below(clusters));
    rng.shuffle(raw);

    std::vector<int> relabel(clusters, -1);
    int next = 0;
    Partition p;
    p.cluster_count = clusters;
    p.assignment.resize(n);
    for (int i = 0; i < n; ++i) {
        if (relabel[raw[i]] < 0) relabel[raw[i]] = next++;
        p.assignment[i] = relabel[raw[i]];
    }
    return p;
}

bool same_matrix(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

CheckResult check_gradient_fidelity(int cases, std::uint64_t seed) {
    CheckResult result{"gradient_fidelity", false, 0.0, {}};
    Rng rng(seed);
    const double h = 1e-5;
    for (int c = 0; c < cases; ++c) {
        RandomModel model = random_model(rng);
        const BackpropResult back = backprop_effective(model.backbone, model.experts, model.batch);

        for (std::size_t l = 0; l < model.experts.size(); ++l) {
            const AdapterGradients grads =
                adapter_gradients(model.experts[l], back.layer_grads[l]);
            LayerExperts& e = model.experts[l];

            auto probe = [&](double& slot, double analytic) {
                const double saved = slot;
                slot = saved + h;
                const double up = oracle_batch_loss(model);
                slot = saved - h;
                const double down = oracle_batch_loss(model);
                slot = saved;
                result.max_error =
                    std::max(result.max_error, grad_error(analytic, (up - down) / (2.0 * h)));
            };

            for (Eigen::Index i = 0; i < e.cluster.A.rows(); ++i) {
                for (Eigen::Index j = 0; j < e.cluster.A.cols(); ++j) {
                    probe(e.cluster.A(i, j), grads.grad_A(i, j));
                }
            }
            for (Eigen::Index i = 0; i < e.cluster.B.rows(); ++i) {
                for (Eigen::Index j = 0; j < e.cluster.B.cols(); ++j) {
                    probe(e.cluster.B(i, j), grads.grad_B(i, j));
                }
            }
            probe(e.lambda, grads.grad_lambda);
        }
    }
    result.pass = result.max_error <= kGradRelTol;
    result.detail = std::to_string(cases) + " random models";
    return result;
}

CheckResult check_silhouette_oracle(int cases, std::uint64_t seed) {
    CheckResult result{"silhouette_oracle", false, 0.0, {}};
    Rng rng(seed);
    for (int c = 0; c < cases; ++c) {
        const int n = 3 + static_cast<int>(rng.below(10));
        DistanceMatrix d = random_distances(rng, n, rng.below(4) == 0);
        const int clusters = 2 + static_cast<int>(rng.below(n - 1));
        Partition p = random_partition(rng, n, clusters);
        const double got = silhouette(d, p);
        const double expected = oracle::silhouette_reference(d, p);
        result.max_error = std::max(result.max_error, std::abs(got - expected));
    }
    result.pass = result.max_error <= kOracleTol;
    result.detail = std::to_string(cases) + " random partitions";
    return result;
}

CheckResult check_ahc_brute_force(int cases, std::uint64_t seed) {
    CheckResult result{"ahc_brute_force", false, 0.0, {}};
    Rng rng(seed);
    int mismatches = 0;
    for (int c = 0; c < cases; ++c) {
        const int n = 2 + static_cast<int>(rng.below(6));
        DistanceMatrix d = random_distances(rng, n, rng.below(2) == 0);
        const MergeTree got = build_merge_tree(d);
        const MergeTree expected = oracle::ahc_reference(d);
        if (got.merges.size() != expected.merges.size()) {
            ++mismatches;
            continue;
        }
        for (std::size_t m = 0; m < got.merges.size(); ++m) {
            if (got.merges[m].left != expected.merges[m].left ||
                got.merges[m].right != expected.merges[m].right ||
                got.merges[m].id != expected.merges[m].id) {
                ++mismatches;
            }
            result.max_error = std::max(
                result.max_error, std::abs(got.merges[m].height - expected.merges[m].height));
        }
    }
    result.pass = mismatches == 0 && result.max_error <= kOracleTol;
    result.detail = std::to_string(cases) + " random matrices, " + std::to_string(mismatches) +
                    " structural mismatches";
    return result;
}

CheckResult check_schedule_structure(int cases, std::uint64_t seed) {
    CheckResult result{"schedule_structure", false, 0.0, {}};
    Rng rng(seed);
    int violations = 0;
    for (int c = 0; c < cases; ++c) {
        const int n = 3 + static_cast<int>(rng.below(8));
        const int depth = 1 + static_cast<int>(rng.below(6));
        const int window = 1 + static_cast<int>(rng.below(4));
        const double tau = 0.2 * rng.uniform();

        std::vector<DistanceMatrix> layer_ds;
        DistanceMatrix global;
        global.entries = Matrix::Zero(n, n);
        for (int l = 0; l < depth; ++l) {
            layer_ds.push_back(random_distances(rng, n, false));
            global.entries += layer_ds.back().entries;
        }
        global.entries /= static_cast<double>(depth);

        const MergeTree tree = build_merge_tree(global);
        DepthSchedule schedule;
        try {
            schedule = compute_depth_schedule(tree, layer_ds, tau, window);
            schedule.validate();
        } catch (const std::exception&) {
            ++violations;
            continue;
        }

        int prev = 1;
        for (int l = 0; l < depth; ++l) {
            const int count = schedule.counts[l];
            if (count < prev || count > std::min(n, prev + window - 1)) ++violations;
            if (!(schedule.partitions[l] == cut(tree, count))) ++violations;
            if (schedule.scores[l] != score(count, layer_ds[l], tree, tau)) ++violations;
            prev = count;
        }
    }
    result.pass = violations == 0;
    result.max_error = static_cast<double>(violations);
    result.detail = std::to_string(cases) + " random schedules, " + std::to_string(violations) +
                    " violations";
    return result;
}

CheckResult check_lambda_invariants(int cases, std::uint64_t seed) {
    CheckResult result{"lambda_invariants", false, 0.0, {}};
    Rng rng(seed);
    int violations = 0;
    for (int c = 0; c < cases; ++c) {
        const int d_out = 2 + static_cast<int>(rng.below(5));
        const int d_in = 2 + static_cast<int>(rng.below(5));
        const int rank = 1 + static_cast<int>(rng.below(2));

        LayerExperts e;
        e.cluster = AdapterPair{random_matrix(rng, rank, d_in, 0.5),
                                random_matrix(rng, d_out, rank, 0.5)};
        e.external = AdapterPair{random_matrix(rng, rank, d_in, 0.5),
                                 random_matrix(rng, d_out, rank, 0.5)};
        e.external_zeroed = false;
        e.lambda_frozen = rng.below(4) == 0;
        e.lambda = e.lambda_frozen ? 1.0 : rng.uniform();
        const LayerExperts original = e;

        for (int step = 0; step < 20; ++step) {
            AdapterGradients g;
            g.grad_B = random_matrix(rng, d_out, rank, 1.0);
            g.grad_A = random_matrix(rng, rank, d_in, 1.0);
            g.grad_lambda = 6.0 * rng.normal();
            e = sgd_step(std::move(e), g, 0.3);
            if (e.lambda < 0.0 || e.lambda > 1.0) ++violations;
            if (e.lambda_frozen && e.lambda != original.lambda) ++violations;
        }
        // The external expert must come through a whole trajectory bit-identical.
        if (!same_matrix(e.external.A, original.external.A) ||
            !same_matrix(e.external.B, original.external.B)) {
            ++violations;
        }
    }
    result.pass = violations == 0;
    result.max_error = static_cast<double>(violations);
    result.detail = std::to_string(cases) + " SGD trajectories, " + std::to_string(violations) +
                    " violations";
    return result;
}

CheckResult check_fedavg_reduction() {
    CheckResult result{"fedavg_reduction", false, 0.0, {}};
    FederationConfig base;
    base.rounds = 8;
    base.tau = 10.0;  // no silhouette can beat this, so every layer stays at one cluster

    FederationConfig tree_cfg = base;
    tree_cfg.mode = Mode::FedTree;
    FederationConfig fedavg_cfg = base;
    fedavg_cfg.mode = Mode::FedIt;

    const ExperimentReport tree_report = run_experiment(tree_cfg);
    const ExperimentReport fedavg_report = run_experiment(fedavg_cfg);

    bool counts_trivial = true;
    for (int count : tree_report.schedule.counts) counts_trivial &= count == 1;

    const bool identical = metrics_csv(tree_report) == metrics_csv(fedavg_report);
    result.pass = identical && counts_trivial && tree_report.completed &&
                  fedavg_report.completed;
    result.detail = identical ? "metrics byte-identical" : "metrics differ";
    return result;
}

std::vector<CheckResult> run_all_checks() {
    return {check_gradient_fidelity(), check_silhouette_oracle(),  check_ahc_brute_force(),
            check_schedule_structure(), check_lambda_invariants(), check_fedavg_reduction()};
}

}  // namespace fedtree
