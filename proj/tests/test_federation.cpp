#include <doctest.h>

#include "fedtree/checks.hpp"
#include "fedtree/config.hpp"
#include "fedtree/errors.hpp"
#include "fedtree/federation.hpp"
#include "fedtree/report_io.hpp"

using namespace fedtree;

namespace {

// Desk-sized world small enough for fast unit runs.
FederationConfig small_config() {
    FederationConfig cfg;
    cfg.clients = 4;
    cfg.layers = 3;
    cfg.dims = {8, 8, 8};
    cfg.rank = 2;
    cfg.warmup_epochs = 2;
    cfg.local_epochs = 1;
    cfg.rounds = 3;
    cfg.batch_size = 16;
    cfg.data.group_count = 2;
    cfg.data.clients_per_group = 2;
    cfg.data.shared_depth = 1;
    cfg.data.train_samples = 32;
    cfg.data.test_samples = 16;
    cfg.data.input_dim = 8;
    return cfg;
}

bool same_matrix(const Matrix& a, const Matrix& b) {
    return a.rows() == b.rows() && a.cols() == b.cols() && (a.array() == b.array()).all();
}

}  // namespace

TEST_CASE("generate_federation is reproducible and seed-sensitive") {
    const FederationConfig cfg = small_config();
    const Federation a = generate_federation(cfg);
    const Federation b = generate_federation(cfg);
    CHECK(same_matrix(a.backbone.layers[0], b.backbone.layers[0]));
    CHECK(same_matrix(a.clients[2].train[5].x, b.clients[2].train[5].x));
    CHECK(same_matrix(a.clients[2].train[5].y, b.clients[2].train[5].y));

    FederationConfig other = cfg;
    other.seed = 43;
    const Federation c = generate_federation(other);
    CHECK_FALSE(same_matrix(a.backbone.layers[0], c.backbone.layers[0]));
}

TEST_CASE("teachers share shallow deltas and diverge below shared_depth") {
    const FederationConfig cfg = small_config();
    const Federation fed = generate_federation(cfg);
    REQUIRE(fed.teachers.size() == 2);
    CHECK(same_matrix(fed.teachers[0][0].A, fed.teachers[1][0].A));
    CHECK(same_matrix(fed.teachers[0][0].B, fed.teachers[1][0].B));
    CHECK_FALSE(same_matrix(fed.teachers[0][1].B, fed.teachers[1][1].B));
    CHECK_FALSE(same_matrix(fed.teachers[0][2].B, fed.teachers[1][2].B));
}

TEST_CASE("divergence_scale = 0 collapses the groups onto one teacher") {
    FederationConfig cfg = small_config();
    cfg.data.divergence_scale = 0.0;
    const Federation fed = generate_federation(cfg);
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(same_matrix(fed.teachers[0][l].B, fed.teachers[1][l].B));
    }
}

TEST_CASE("without label noise a teacher fits its own data exactly") {
    FederationConfig cfg = small_config();
    cfg.data.noise_std = 0.0;
    const Federation fed = generate_federation(cfg);

    for (int k : {0, 3}) {
        const int group = k / cfg.data.clients_per_group;
        std::vector<LayerExperts> teacher;
        for (const AdapterPair& delta : fed.teachers[group]) {
            LayerExperts e;
            e.cluster = delta;
            e.external = AdapterPair::zeros(static_cast<int>(delta.B.rows()),
                                            static_cast<int>(delta.A.cols()), delta.rank());
            teacher.push_back(e);
        }
        CHECK(mse_loss(fed.backbone, teacher, fed.clients[k].train) == 0.0);
        CHECK(mse_loss(fed.backbone, teacher, fed.clients[k].test) == 0.0);
    }
}

TEST_CASE("every client starts from the same adapter init with zero B") {
    const FederationConfig cfg = small_config();
    const Federation fed = generate_federation(cfg);
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(fed.clients[0].experts[l].cluster.B.isZero(0.0));
        for (int k = 1; k < cfg.clients; ++k) {
            CHECK(same_matrix(fed.clients[0].experts[l].cluster.A,
                              fed.clients[k].experts[l].cluster.A));
        }
    }
}

TEST_CASE("warmup gives identical adapters to clients with identical data and streams") {
    const FederationConfig cfg = small_config();
    Federation fed = generate_federation(cfg);

    // Two copies of client 0: same id, same data, therefore the same RNG
    // streams and batch order.
    std::vector<ClientState> twins{fed.clients[0], fed.clients[0]};
    const auto adapters = warmup(fed.backbone, twins, cfg, 2);
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(same_matrix(adapters[0][l].A, adapters[1][l].A));
        CHECK(same_matrix(adapters[0][l].B, adapters[1][l].B));
        CHECK_FALSE(adapters[0][l].B.isZero(0.0));  // training actually moved B
    }
}

TEST_CASE("warmup_epochs = 0 returns the untouched init") {
    FederationConfig cfg = small_config();
    cfg.warmup_epochs = 0;
    Federation fed = generate_federation(cfg);
    const auto adapters = warmup(fed.backbone, fed.clients, cfg, 1);
    for (int k = 0; k < cfg.clients; ++k) {
        for (int l = 0; l < cfg.layers; ++l) CHECK(adapters[k][l].B.isZero(0.0));
    }
}

TEST_CASE("warmup is independent of the thread count") {
    const FederationConfig cfg = small_config();
    Federation serial = generate_federation(cfg);
    Federation threaded = generate_federation(cfg);
    const auto a = warmup(serial.backbone, serial.clients, cfg, 1);
    const auto b = warmup(threaded.backbone, threaded.clients, cfg, 4);
    for (int k = 0; k < cfg.clients; ++k) {
        for (int l = 0; l < cfg.layers; ++l) {
            CHECK(same_matrix(a[k][l].A, b[k][l].A));
            CHECK(same_matrix(a[k][l].B, b[k][l].B));
        }
    }
}

TEST_CASE("build_topology wires warmup adapters into a schedule") {
    const FederationConfig cfg = small_config();
    Federation fed = generate_federation(cfg);
    const auto adapters = warmup(fed.backbone, fed.clients, cfg, 2);
    const Topology topo = build_topology(adapters, cfg);
    CHECK(topo.tree.leaf_count == cfg.clients);
    CHECK(topo.schedule.depth() == cfg.layers);
    CHECK(static_cast<int>(topo.layer_distances.size()) == cfg.layers);
    CHECK_NOTHROW(topo.global_distance.validate());
    CHECK_NOTHROW(topo.schedule.validate());
}

TEST_CASE("fedit keeps one cluster, lambda 1, at every layer and round") {
    FederationConfig cfg = small_config();
    cfg.mode = Mode::FedIt;
    const ExperimentReport report = run_experiment(cfg, 2);
    REQUIRE(report.completed);
    for (int count : report.schedule.counts) CHECK(count == 1);
    for (const RoundReport& round : report.rounds) {
        for (const auto& lambdas : round.lambdas) {
            for (double l : lambdas) CHECK(l == 1.0);
        }
    }
}

TEST_CASE("local_only never mixes clients") {
    FederationConfig cfg = small_config();
    cfg.mode = Mode::LocalOnly;
    cfg.rounds = 2;
    const ExperimentReport report = run_experiment(cfg, 2);
    REQUIRE(report.completed);
    // Singleton partitions are reported, and lambda never unfreezes.
    for (int count : report.schedule.counts) CHECK(count == cfg.clients);
    for (const RoundReport& round : report.rounds) {
        for (const auto& lambdas : round.lambdas) {
            for (double l : lambdas) CHECK(l == 1.0);
        }
    }
}

TEST_CASE("fixed_k mode pins the schedule to k clusters everywhere") {
    FederationConfig cfg = small_config();
    cfg.mode = Mode::FixedK;
    cfg.fixed_k = 2;
    const ExperimentReport report = run_experiment(cfg, 2);
    REQUIRE(report.completed);
    for (int count : report.schedule.counts) CHECK(count == 2);
    for (const Partition& p : report.schedule.partitions) {
        CHECK(p == report.schedule.partitions[0]);
    }
}

TEST_CASE("independent_layerwise picks counts without the nesting constraint") {
    FederationConfig cfg = small_config();
    cfg.mode = Mode::IndependentLayerwise;
    const ExperimentReport report = run_experiment(cfg, 2);
    REQUIRE(report.completed);
    CHECK(report.schedule.depth() == cfg.layers);
    for (int l = 0; l < cfg.layers; ++l) {
        CHECK(report.schedule.counts[l] >= 1);
        CHECK(report.schedule.counts[l] <= cfg.clients);
        CHECK(report.schedule.partitions[l].cluster_count == report.schedule.counts[l]);
    }
}

TEST_CASE("a huge tau reduces fedtree to fedit byte for byte") {
    FederationConfig tree_cfg = small_config();
    tree_cfg.tau = 10.0;
    tree_cfg.mode = Mode::FedTree;
    FederationConfig avg_cfg = tree_cfg;
    avg_cfg.mode = Mode::FedIt;

    const ExperimentReport tree_report = run_experiment(tree_cfg, 2);
    const ExperimentReport avg_report = run_experiment(avg_cfg, 2);
    CHECK(metrics_csv(tree_report) == metrics_csv(avg_report));
}

TEST_CASE("reports are bit-identical across thread counts") {
    FederationConfig cfg = small_config();
    cfg.mode = Mode::FedTree;
    const ExperimentReport serial = run_experiment(cfg, 1);
    const ExperimentReport threaded = run_experiment(cfg, 4);
    CHECK(report_to_json(serial).dump(2) == report_to_json(threaded).dump(2));
}

TEST_CASE("lambda stays in range in every reported round") {
    FederationConfig cfg = small_config();
    cfg.tau = -1.0;  // silhouettes beat tau immediately, forcing splits and mixing
    const ExperimentReport report = run_experiment(cfg, 2);
    REQUIRE(report.completed);
    bool saw_mixed = false;
    for (const RoundReport& round : report.rounds) {
        for (const auto& lambdas : round.lambdas) {
            for (double l : lambdas) {
                CHECK(l >= 0.0);
                CHECK(l <= 1.0);
                if (l != 1.0) saw_mixed = true;
            }
        }
    }
    CHECK(saw_mixed);
}

TEST_CASE("a divergent learning rate aborts with a flagged partial report") {
    FederationConfig cfg = small_config();
    cfg.eta = 1e6;
    cfg.activation = Activation::Identity;
    const ExperimentReport report = run_experiment(cfg, 2);
    CHECK_FALSE(report.completed);
    CHECK_FALSE(report.error.empty());
    CHECK(report.error.find("client") != std::string::npos);
}

TEST_CASE("the fedavg reduction check passes end to end") {
    const CheckResult result = check_fedavg_reduction();
    CHECK(result.pass);
}
