#include <chrono>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fedtree/checks.hpp"
#include "fedtree/config.hpp"
#include "fedtree/errors.hpp"
#include "fedtree/federation.hpp"
#include "fedtree/report_io.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;
constexpr int kExitCheckFailure = 4;

int thread_budget() {
    const char* env = std::getenv("FEDTREE_THREADS");
    if (env == nullptr || *env == '\0') return 0;  // library default
    char* end = nullptr;
    const long value = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || value < 1) {
        throw fedtree::ConfigError("FEDTREE_THREADS must be a positive integer, got \"" +
                                   std::string(env) + "\"");
    }
    return static_cast<int>(value);
}

// Writes the full artifact set for one experiment under `dir`.
void write_run_outputs(const std::string& dir, const fedtree::ExperimentReport& report,
                       double duration_seconds) {
    using nlohmann::json;
    const std::string metrics_path = dir + "/metrics.csv";
    const std::string schedule_path = dir + "/schedule.json";
    const std::string tree_path = dir + "/tree.json";
    const std::string report_path = dir + "/report.json";
    const std::string manifest_path = dir + "/manifest.json";

    fedtree::write_text_file(metrics_path, fedtree::metrics_csv(report));
    fedtree::write_text_file(schedule_path, fedtree::schedule_to_json(report.schedule).dump(2) + "\n");
    fedtree::write_text_file(tree_path, fedtree::tree_to_json(report.tree).dump(2) + "\n");
    fedtree::write_text_file(report_path, fedtree::report_to_json(report).dump(2) + "\n");

    const json manifest = {{"outputs",
                            {{"metrics", metrics_path},
                             {"schedule", schedule_path},
                             {"tree", tree_path},
                             {"report", report_path}}},
                           {"duration_seconds", duration_seconds}};
    fedtree::write_text_file(manifest_path, manifest.dump(2) + "\n");
}

fedtree::ExperimentReport run_and_write(const fedtree::FederationConfig& config,
                                        const std::string& out_dir) {
    const auto started = std::chrono::steady_clock::now();
    fedtree::ExperimentReport report = fedtree::run_experiment(config, thread_budget());
    const double duration =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_run_outputs(out_dir, report, duration);
    return report;
}

int cmd_run(const std::string& config_path, const std::string& out_dir, bool seed_given,
            std::uint64_t seed) {
    fedtree::FederationConfig config = fedtree::parse_config(config_path);
    if (seed_given) config.seed = seed;

    const fedtree::ExperimentReport report = run_and_write(config, out_dir);
    if (!report.completed) {
        std::cerr << "error: " << report.error << "\n";
        std::cerr << "partial results written to " << out_dir << "\n";
        return kExitNumeric;
    }
    std::cout << "run complete: " << report.rounds.size() << " rounds, final mean test loss "
              << report.rounds.back().mean_test_loss << "\n";
    std::cout << "outputs in " << out_dir << "\n";
    return kExitOk;
}

int cmd_check() {
    if (const char* hook = std::getenv("FEDTREE_DISABLE_LAMBDA_CLAMP");
        hook != nullptr && std::string(hook) == "1") {
        fedtree::testhooks::set_lambda_clamp_enabled(false);
    }
    const std::vector<fedtree::CheckResult> results = fedtree::run_all_checks();
    bool all_pass = true;
    for (const fedtree::CheckResult& r : results) {
        std::cout << (r.pass ? "PASS" : "FAIL") << "  " << r.name << "  max_error=" << r.max_error
                  << "  (" << r.detail << ")\n";
        all_pass &= r.pass;
    }
    if (!all_pass) {
        std::cerr << "error: verification battery failed\n";
        return kExitCheckFailure;
    }
    std::cout << "all checks passed\n";
    return kExitOk;
}

struct SweepPoint {
    std::string token;
    fedtree::FederationConfig config;
};

long parse_integer_token(const std::string& param, const std::string& token) {
    std::size_t used = 0;
    long value = 0;
    try {
        value = std::stol(token, &used);
    } catch (const std::exception&) {
        throw fedtree::ConfigError("sweep value \"" + token + "\" is not an integer for " + param);
    }
    if (used != token.size()) {
        throw fedtree::ConfigError("sweep value \"" + token + "\" is not an integer for " + param);
    }
    return value;
}

double parse_double_token(const std::string& param, const std::string& token) {
    std::size_t used = 0;
    double value = 0.0;
    try {
        value = std::stod(token, &used);
    } catch (const std::exception&) {
        throw fedtree::ConfigError("sweep value \"" + token + "\" is not a number for " + param);
    }
    if (used != token.size()) {
        throw fedtree::ConfigError("sweep value \"" + token + "\" is not a number for " + param);
    }
    return value;
}

SweepPoint make_point(const fedtree::FederationConfig& base, const std::string& param,
                      const std::string& token) {
    SweepPoint point{token, base};
    if (param == "tau") {
        point.config.tau = parse_double_token(param, token);
    } else if (param == "K") {
        point.config.window = static_cast<int>(parse_integer_token(param, token));
    } else if (param == "eta") {
        point.config.eta = parse_double_token(param, token);
    } else if (param == "E") {
        point.config.local_epochs = static_cast<int>(parse_integer_token(param, token));
    } else if (param == "divergence_scale") {
        point.config.data.divergence_scale = parse_double_token(param, token);
    } else {
        throw fedtree::ConfigError(
            "sweep parameter must be one of {tau, K, eta, E, divergence_scale}, got \"" + param +
            "\"");
    }
    point.config.validate();
    return point;
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::string& values, const std::string& out_dir) {
    const fedtree::FederationConfig base = fedtree::parse_config(config_path);

    std::vector<SweepPoint> points;
    std::size_t start = 0;
    while (start <= values.size()) {
        const std::size_t comma = values.find(',', start);
        const std::string token = values.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (token.empty()) throw fedtree::ConfigError("sweep values contain an empty entry");
        points.push_back(make_point(base, param, token));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (points.empty()) throw fedtree::ConfigError("sweep needs at least one value");

    std::string summary = "value,final_mean_test_loss,first_split_layer,final_clusters\n";
    bool numeric_failure = false;
    for (const SweepPoint& point : points) {
        const std::string run_dir = out_dir + "/" + param + "=" + point.token;
        const fedtree::ExperimentReport report = run_and_write(point.config, run_dir);
        if (!report.completed) {
            std::cerr << "error: value " << point.token << ": " << report.error << "\n";
            numeric_failure = true;
            continue;
        }

        // First layer (1-based) whose schedule leaves the single shared
        // cluster; layers+1 when it never does.
        int first_split = point.config.layers + 1;
        for (int l = 0; l < report.schedule.depth(); ++l) {
            if (report.schedule.counts[l] > 1) {
                first_split = l + 1;
                break;
            }
        }
        char loss[40];
        std::snprintf(loss, sizeof(loss), "%.17g", report.rounds.back().mean_test_loss);
        summary += point.token + "," + loss + "," + std::to_string(first_split) + "," +
                   std::to_string(report.schedule.counts.back()) + "\n";
        std::cout << param << "=" << point.token << ": final mean test loss "
                  << report.rounds.back().mean_test_loss << "\n";
    }
    fedtree::write_text_file(out_dir + "/summary.csv", summary);
    std::cout << "summary written to " << out_dir << "/summary.csv\n";
    return numeric_failure ? kExitNumeric : kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Tree-guided federated LoRA simulator"};
    app.require_subcommand(1);

    std::string run_config, run_out;
    std::uint64_t run_seed = 0;
    CLI::App* run = app.add_subcommand("run", "Run one experiment from a JSON config");
    run->add_option("--config", run_config, "Config file (JSON)")->required();
    run->add_option("--out", run_out, "Output directory")->required();
    CLI::Option* seed_opt = run->add_option("--seed", run_seed, "Override the config seed");

    CLI::App* check = app.add_subcommand("check", "Run the self-verification battery");

    std::string sweep_config, sweep_param, sweep_values, sweep_out;
    CLI::App* sweep = app.add_subcommand("sweep", "Run one experiment per parameter value");
    sweep->add_option("--config", sweep_config, "Base config file (JSON)")->required();
    sweep->add_option("--param", sweep_param, "Parameter to vary (tau, K, eta, E, divergence_scale)")
        ->required();
    sweep->add_option("--values", sweep_values, "Comma-separated values")->required();
    sweep->add_option("--out", sweep_out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (run->parsed()) {
            return cmd_run(run_config, run_out, seed_opt->count() > 0, run_seed);
        }
        if (check->parsed()) {
            return cmd_check();
        }
        if (sweep->parsed()) {
            return cmd_sweep(sweep_config, sweep_param, sweep_values, sweep_out);
        }
    } catch (const fedtree::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const fedtree::NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const fedtree::IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
