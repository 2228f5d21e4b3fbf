#include "fedtree/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <numeric>
#include <thread>
#include <utility>

#include "fedtree/errors.hpp"
#include "fedtree/rng.hpp"

namespace fedtree {

namespace {

// Purpose tags for independent random streams. Every consumer derives its
// own stream as derive(seed, {tag, ...indices}), so adding or removing a
// consumer never shifts anyone else's randomness.
constexpr std::uint64_t kStreamModel = 0xA1;
constexpr std::uint64_t kStreamInit = 0xA2;
constexpr std::uint64_t kStreamData = 0xA3;
constexpr std::uint64_t kStreamWarmup = 0xA4;
constexpr std::uint64_t kStreamRound = 0xA5;

Matrix gaussian_matrix(Rng& rng, int rows, int cols, double std_dev) {
    Matrix m(rows, cols);
    // Row-major fill order, fixed so the draw sequence is part of the
    // deterministic contract.
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) m(i, j) = std_dev * rng.normal();
    }
    return m;
}

// Runs fn(0..count-1) on up to max_threads workers. Indices only ever write
// their own output slots, so scheduling cannot affect results; the lowest
// failing index's exception is rethrown to keep errors deterministic too.
void parallel_for(int count, int max_threads, const std::function<void(int)>& fn) {
    const int workers = std::max(1, std::min(max_threads, count));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(count);
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&]() {
            for (;;) {
                const int i = next.fetch_add(1);
                if (i >= count) return;
                try {
                    fn(i);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        });
    }
    for (std::thread& t : pool) t.join();
    for (int i = 0; i < count; ++i) {
        if (errors[i]) std::rethrow_exception(errors[i]);
    }
}

std::vector<LayerExperts> plain_experts(const std::vector<AdapterPair>& pairs) {
    std::vector<LayerExperts> experts;
    experts.reserve(pairs.size());
    for (const AdapterPair& pair : pairs) {
        LayerExperts e;
        e.cluster = pair;
        e.external = AdapterPair::zeros(static_cast<int>(pair.B.rows()),
                                        static_cast<int>(pair.A.cols()), pair.rank());
        e.lambda = 1.0;
        e.external_zeroed = true;
        e.lambda_frozen = true;
        experts.push_back(std::move(e));
    }
    return experts;
}

// One client's local SGD pass: `epochs` sweeps of shuffled mini-batches.
// `stream` and `round_index` key the shuffle order; they separate warmup
// from federated rounds so both phases stay reproducible in isolation.
void train_client(ClientState& client, const FrozenBackbone& backbone,
                  const FederationConfig& config, int epochs, std::uint64_t stream,
                  int round_index) {
    const int n = static_cast<int>(client.train.size());
    std::vector<int> order(n);
    std::vector<Sample> batch;
    batch.reserve(std::min(config.batch_size, n));
    for (int epoch = 0; epoch < epochs; ++epoch) {
        Rng rng = Rng::derive(config.seed,
                              {stream, static_cast<std::uint64_t>(client.id),
                               static_cast<std::uint64_t>(round_index),
                               static_cast<std::uint64_t>(epoch)});
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);
        for (int start = 0; start < n; start += config.batch_size) {
            const int stop = std::min(n, start + config.batch_size);
            batch.clear();
            for (int i = start; i < stop; ++i) batch.push_back(client.train[order[i]]);

            BackpropResult back;
            try {
                back = backprop_effective(backbone, client.experts, batch);
                if (!std::isfinite(back.loss)) {
                    throw NumericError("non-finite training loss");
                }
                for (int l = 0; l < backbone.depth(); ++l) {
                    AdapterGradients grads =
                        adapter_gradients(client.experts[l], back.layer_grads[l]);
                    client.experts[l] =
                        sgd_step(std::move(client.experts[l]), grads, config.eta);
                }
            } catch (const NumericError& e) {
                const std::string phase =
                    stream == kStreamWarmup ? "warmup"
                                            : "round " + std::to_string(round_index);
                throw NumericError("client " + std::to_string(client.id) + ", " + phase +
                                   ", epoch " + std::to_string(epoch) + ": " + e.what());
            }
        }
    }
}

DepthSchedule uniform_schedule(const MergeTree& tree,
                               std::span<const DistanceMatrix> layer_distances, int clusters,
                               double tau) {
    DepthSchedule schedule;
    const Partition partition = cut(tree, clusters);
    for (const DistanceMatrix& d : layer_distances) {
        schedule.counts.push_back(clusters);
        schedule.partitions.push_back(partition);
        schedule.scores.push_back(score(clusters, d, tree, tau));
    }
    return schedule;
}

// Ablation schedule: every layer clusters its own distance matrix with a
// fresh tree and a free choice of count, so nothing ties the layers
// together (and nothing keeps them nested).
DepthSchedule independent_layerwise_schedule(std::span<const DistanceMatrix> layer_distances,
                                             double tau) {
    DepthSchedule schedule;
    for (const DistanceMatrix& d : layer_distances) {
        const MergeTree tree = build_merge_tree(d);
        int best_count = 1;
        double best_score = -std::numeric_limits<double>::infinity();
        for (int c = 1; c <= d.size(); ++c) {
            double s = score(c, d, tree, tau);
            if (s > best_score) {
                best_score = s;
                best_count = c;
            }
        }
        schedule.counts.push_back(best_count);
        schedule.partitions.push_back(cut(tree, best_count));
        schedule.scores.push_back(best_score);
    }
    return schedule;
}

DepthSchedule singleton_schedule(int clients, int depth) {
    Partition p;
    p.cluster_count = clients;
    p.assignment.resize(clients);
    std::iota(p.assignment.begin(), p.assignment.end(), 0);
    DepthSchedule schedule;
    schedule.counts.assign(depth, clients);
    schedule.partitions.assign(depth, p);
    schedule.scores.assign(depth, 0.0);
    return schedule;
}

}  // namespace

std::vector<int> FederationConfig::width_chain() const {
    std::vector<int> chain;
    chain.reserve(layers + 1);
    chain.push_back(data.input_dim);
    if (dims.empty()) {
        chain.insert(chain.end(), layers, 16);
    } else {
        chain.insert(chain.end(), dims.begin(), dims.end());
    }
    return chain;
}

void FederationConfig::validate() const {
    auto fail = [](const std::string& message) { throw ConfigError(message); };
    if (clients < 2) fail("N must be >= 2, got " + std::to_string(clients));
    if (layers < 1) fail("L must be >= 1, got " + std::to_string(layers));
    if (!dims.empty() && static_cast<int>(dims.size()) != layers) {
        fail("dims lists " + std::to_string(dims.size()) + " widths for L = " +
             std::to_string(layers));
    }
    for (int d : dims) {
        if (d < 1) fail("dims entries must be >= 1, got " + std::to_string(d));
    }
    if (rank < 1) fail("rank must be >= 1, got " + std::to_string(rank));
    const std::vector<int> chain = width_chain();
    for (std::size_t l = 0; l + 1 < chain.size(); ++l) {
        if (rank > std::min(chain[l], chain[l + 1])) {
            fail("rank " + std::to_string(rank) + " exceeds min(d_in, d_out) at layer " +
                 std::to_string(l));
        }
    }
    if (!std::isfinite(tau)) fail("tau must be finite");
    if (window < 1) fail("K must be >= 1, got " + std::to_string(window));
    if (warmup_epochs < 0) fail("E_warm must be >= 0, got " + std::to_string(warmup_epochs));
    if (local_epochs < 1) fail("E must be >= 1, got " + std::to_string(local_epochs));
    if (rounds < 1) fail("T must be >= 1, got " + std::to_string(rounds));
    if (!(eta > 0.0) || !std::isfinite(eta)) fail("eta must be positive and finite");
    if (batch_size < 1) fail("batch_size must be >= 1, got " + std::to_string(batch_size));
    if (fixed_k < 1 || fixed_k > clients) {
        fail("fixed_k must be in [1, N], got " + std::to_string(fixed_k));
    }
    if (data.group_count < 1) fail("group_count must be >= 1");
    if (data.clients_per_group < 1) fail("clients_per_group must be >= 1");
    if (data.group_count * data.clients_per_group != clients) {
        fail("group_count * clients_per_group = " +
             std::to_string(data.group_count * data.clients_per_group) + " but N = " +
             std::to_string(clients));
    }
    if (data.shared_depth < 0 || data.shared_depth > layers) {
        fail("shared_depth must be in [0, L], got " + std::to_string(data.shared_depth));
    }
    if (!(data.divergence_scale >= 0.0)) fail("divergence_scale must be >= 0");
    if (!(data.noise_std >= 0.0)) fail("noise_std must be >= 0");
    if (data.train_samples < 1) fail("train_samples must be >= 1");
    if (data.test_samples < 1) fail("test_samples must be >= 1");
    if (data.input_dim < 1) fail("input_dim must be >= 1");
}

Federation generate_federation(const FederationConfig& config) {
    config.validate();
    const std::vector<int> chain = config.width_chain();
    const int depth = config.layers;

    Federation fed;
    fed.backbone.activation = config.activation;
    Rng model_rng = Rng::derive(config.seed, {kStreamModel});
    for (int l = 0; l < depth; ++l) {
        // Variance 1/d_in keeps pre-activations O(1) at any width.
        fed.backbone.layers.push_back(gaussian_matrix(model_rng, chain[l + 1], chain[l],
                                                      1.0 / std::sqrt(chain[l])));
    }

    // Planted teacher deltas: low-rank, shared across groups down to
    // shared_depth, group-specific (scaled) below it. Factor entries use
    // std 1/sqrt(d_in) so each delta has Frobenius norm near sqrt(rank).
    fed.teachers.assign(config.data.group_count, {});
    for (int l = 0; l < depth; ++l) {
        const double factor_std = 1.0 / std::sqrt(chain[l]);
        if (l < config.data.shared_depth) {
            AdapterPair shared{gaussian_matrix(model_rng, config.rank, chain[l], factor_std),
                               gaussian_matrix(model_rng, chain[l + 1], config.rank, factor_std)};
            for (int g = 0; g < config.data.group_count; ++g) fed.teachers[g].push_back(shared);
        } else {
            for (int g = 0; g < config.data.group_count; ++g) {
                AdapterPair delta{gaussian_matrix(model_rng, config.rank, chain[l], factor_std),
                                  gaussian_matrix(model_rng, chain[l + 1], config.rank,
                                                  factor_std)};
                delta.B *= config.data.divergence_scale;
                fed.teachers[g].push_back(std::move(delta));
            }
        }
    }

    // One adapter init broadcast to every client: A Gaussian (std 0.02), B
    // zero, so warmup starts from a common reference point.
    Rng init_rng = Rng::derive(config.seed, {kStreamInit});
    std::vector<AdapterPair> init;
    for (int l = 0; l < depth; ++l) {
        init.push_back(AdapterPair{gaussian_matrix(init_rng, config.rank, chain[l], 0.02),
                                   Matrix::Zero(chain[l + 1], config.rank)});
    }

    fed.clients.resize(config.clients);
    std::vector<std::vector<LayerExperts>> teacher_experts;
    teacher_experts.reserve(config.data.group_count);
    for (int g = 0; g < config.data.group_count; ++g) {
        teacher_experts.push_back(plain_experts(fed.teachers[g]));
    }

    for (int k = 0; k < config.clients; ++k) {
        ClientState& client = fed.clients[k];
        client.id = k;
        client.experts = plain_experts(init);

        const int group = k / config.data.clients_per_group;
        Rng data_rng = Rng::derive(config.seed, {kStreamData, static_cast<std::uint64_t>(k)});
        auto draw = [&](int count, std::vector<Sample>& out) {
            out.reserve(count);
            for (int i = 0; i < count; ++i) {
                Sample s;
                s.x = gaussian_matrix(data_rng, chain.front(), 1, 1.0);
                s.y = model_forward(fed.backbone, teacher_experts[group], s.x);
                if (config.data.noise_std > 0.0) {
                    s.y += gaussian_matrix(data_rng, chain.back(), 1, config.data.noise_std);
                }
                out.push_back(std::move(s));
            }
        };
        draw(config.data.train_samples, client.train);
        draw(config.data.test_samples, client.test);
    }
    return fed;
}

std::vector<std::vector<AdapterPair>> warmup(const FrozenBackbone& backbone,
                                             std::vector<ClientState>& clients,
                                             const FederationConfig& config, int max_threads) {
    parallel_for(static_cast<int>(clients.size()), max_threads, [&](int k) {
        train_client(clients[k], backbone, config, config.warmup_epochs, kStreamWarmup, 0);
    });
    std::vector<std::vector<AdapterPair>> adapters(clients.size());
    for (std::size_t k = 0; k < clients.size(); ++k) {
        adapters[k].reserve(backbone.depth());
        for (const LayerExperts& e : clients[k].experts) adapters[k].push_back(e.cluster);
    }
    return adapters;
}

Topology build_topology(const std::vector<std::vector<AdapterPair>>& warm_adapters,
                        const FederationConfig& config) {
    const int depth = config.layers;
    std::vector<std::vector<Matrix>> layer_bs(depth);
    for (int l = 0; l < depth; ++l) {
        layer_bs[l].reserve(warm_adapters.size());
        for (const std::vector<AdapterPair>& client : warm_adapters) {
            layer_bs[l].push_back(client[l].B);
        }
    }

    Topology topo;
    topo.layer_distances.reserve(depth);
    for (int l = 0; l < depth; ++l) {
        topo.layer_distances.push_back(layer_distance_matrix(layer_bs[l], config.metric));
    }
    topo.global_distance = global_distance_matrix(layer_bs, config.metric);
    topo.tree = build_merge_tree(topo.global_distance);
    topo.schedule =
        compute_depth_schedule(topo.tree, topo.layer_distances, config.tau, config.window);
    return topo;
}

RoundReport run_round(std::vector<ClientState>& clients, const FrozenBackbone& backbone,
                      std::span<const Partition> partitions, const FederationConfig& config,
                      int round, int max_threads) {
    const int n = static_cast<int>(clients.size());

    if (config.mode != Mode::LocalOnly) {
        std::vector<ClientUpload> uploads(n);
        std::vector<std::vector<double>> lambdas(n);
        for (int k = 0; k < n; ++k) {
            uploads[k].client_id = k;
            uploads[k].layers.reserve(backbone.depth());
            lambdas[k].reserve(backbone.depth());
            for (const LayerExperts& e : clients[k].experts) {
                uploads[k].layers.push_back(e.cluster);
                lambdas[k].push_back(e.lambda);
            }
        }
        std::vector<double> weights;
        if (config.weighting == Weighting::BySamples) {
            weights.reserve(n);
            for (const ClientState& c : clients) {
                weights.push_back(static_cast<double>(c.train.size()));
            }
        }
        std::vector<ExpertAssignment> assignments =
            assemble_round(uploads, partitions, lambdas, config.variant, weights);
        for (int k = 0; k < n; ++k) clients[k].experts = std::move(assignments[k].layers);
    }

    RoundReport report;
    report.round = round;
    report.train_loss.resize(n);
    report.test_loss.resize(n);
    report.lambdas.resize(n);
    parallel_for(n, max_threads, [&](int k) {
        train_client(clients[k], backbone, config, config.local_epochs, kStreamRound, round);
        report.train_loss[k] = mse_loss(backbone, clients[k].experts, clients[k].train);
        report.test_loss[k] = mse_loss(backbone, clients[k].experts, clients[k].test);
        report.lambdas[k].reserve(backbone.depth());
        for (const LayerExperts& e : clients[k].experts) report.lambdas[k].push_back(e.lambda);
    });
    report.mean_train_loss =
        std::accumulate(report.train_loss.begin(), report.train_loss.end(), 0.0) / n;
    report.mean_test_loss =
        std::accumulate(report.test_loss.begin(), report.test_loss.end(), 0.0) / n;
    return report;
}

ExperimentReport run_experiment(const FederationConfig& config, int max_threads) {
    config.validate();
    if (max_threads <= 0) {
        max_threads = std::max(1u, std::thread::hardware_concurrency());
    }

    ExperimentReport report;
    report.config = config;
    Federation fed = generate_federation(config);
    try {
        std::vector<std::vector<AdapterPair>> warm_adapters =
            warmup(fed.backbone, fed.clients, config, max_threads);
        Topology topo = build_topology(warm_adapters, config);
        report.tree = topo.tree;

        switch (config.mode) {
            case Mode::FedTree:
                report.schedule = topo.schedule;
                break;
            case Mode::FedIt:
                report.schedule = uniform_schedule(topo.tree, topo.layer_distances, 1, config.tau);
                break;
            case Mode::FixedK:
                report.schedule =
                    uniform_schedule(topo.tree, topo.layer_distances, config.fixed_k, config.tau);
                break;
            case Mode::LocalOnly:
                report.schedule = singleton_schedule(config.clients, config.layers);
                break;
            case Mode::IndependentLayerwise:
                report.schedule = independent_layerwise_schedule(topo.layer_distances, config.tau);
                break;
        }

        // Seed the mixing coefficients once the partitions are known: 0.5
        // wherever an external expert will exist, frozen 1 otherwise.
        if (config.mode != Mode::LocalOnly && config.variant == Variant::ScalarMixed) {
            for (ClientState& client : fed.clients) {
                for (int l = 0; l < config.layers; ++l) {
                    if (report.schedule.partitions[l].cluster_count > 1) {
                        client.experts[l].lambda = 0.5;
                        client.experts[l].lambda_frozen = false;
                    }
                }
            }
        }

        for (int t = 1; t <= config.rounds; ++t) {
            report.rounds.push_back(run_round(fed.clients, fed.backbone,
                                              report.schedule.partitions, config, t,
                                              max_threads));
        }
        report.completed = true;
    } catch (const NumericError& e) {
        report.completed = false;
        report.error = e.what();
    }
    if (!report.rounds.empty()) {
        report.final_test_loss = report.rounds.back().test_loss;
    }
    return report;
}

}  // namespace fedtree
