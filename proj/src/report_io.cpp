#include "fedtree/report_io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedtree/config.hpp"
#include "fedtree/errors.hpp"

namespace fedtree {

namespace {

using nlohmann::json;

std::string format_double(double value) {
    char buffer[40];
    std::snprintf(buffer, sizeof(buffer), "%.17g", value);
    return buffer;
}

json partition_to_json(const Partition& partition) { return json(partition.assignment); }

}  // namespace

json tree_to_json(const MergeTree& tree) {
    json merges = json::array();
    for (const MergeRecord& m : tree.merges) {
        merges.push_back({{"left", m.left},
                          {"right", m.right},
                          {"height", m.height},
                          {"id", m.id}});
    }
    return json{{"leaf_count", tree.leaf_count}, {"merges", merges}};
}

json schedule_to_json(const DepthSchedule& schedule) {
    json partitions = json::array();
    for (const Partition& p : schedule.partitions) partitions.push_back(partition_to_json(p));
    return json{{"counts", schedule.counts},
                {"partitions", partitions},
                {"scores", schedule.scores}};
}

json report_to_json(const ExperimentReport& report) {
    json rounds = json::array();
    for (const RoundReport& r : report.rounds) {
        rounds.push_back({{"round", r.round},
                          {"train_loss", r.train_loss},
                          {"test_loss", r.test_loss},
                          {"lambdas", r.lambdas},
                          {"mean_train_loss", r.mean_train_loss},
                          {"mean_test_loss", r.mean_test_loss}});
    }
    return json{{"config", config_to_json(report.config)},
                {"tree", tree_to_json(report.tree)},
                {"schedule", schedule_to_json(report.schedule)},
                {"rounds", rounds},
                {"final_test_loss", report.final_test_loss},
                {"completed", report.completed},
                {"error", report.error}};
}

std::string metrics_csv(const ExperimentReport& report) {
    std::ostringstream out;
    out << "round,client_id,train_loss,test_loss,mean_lambda\n";
    for (const RoundReport& r : report.rounds) {
        const int n = static_cast<int>(r.train_loss.size());
        for (int k = 0; k < n; ++k) {
            double lambda_sum = 0.0;
            for (double l : r.lambdas[k]) lambda_sum += l;
            const double mean_lambda = lambda_sum / static_cast<double>(r.lambdas[k].size());
            out << r.round << ',' << k << ',' << format_double(r.train_loss[k]) << ','
                << format_double(r.test_loss[k]) << ',' << format_double(mean_lambda) << '\n';
        }
    }
    return out.str();
}

void write_text_file(const std::string& path, const std::string& content) {
    const std::filesystem::path target(path);
    std::error_code ec;
    if (target.has_parent_path()) {
        std::filesystem::create_directories(target.parent_path(), ec);
        if (ec) throw IoError("cannot create directory " + target.parent_path().string() + ": " +
                              ec.message());
    }
    std::ofstream out(target, std::ios::binary);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << content;
    out.flush();
    if (!out) throw IoError("failed writing " + path);
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return buffer.str();
}

}  // namespace fedtree
