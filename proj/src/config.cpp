#include "fedtree/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "fedtree/errors.hpp"

namespace fedtree {

namespace {

using nlohmann::json;

[[noreturn]] void bad_key(const std::string& key, const std::string& why) {
    throw ConfigError("config key \"" + key + "\": " + why);
}

void reject_unknown(const json& object, const std::set<std::string>& allowed,
                    const std::string& scope) {
    for (const auto& [key, value] : object.items()) {
        if (!allowed.contains(key)) {
            throw ConfigError("unknown config key \"" + scope + key + "\"");
        }
    }
}

double take_number(const json& object, const std::string& key, double fallback) {
    if (!object.contains(key)) return fallback;
    const json& v = object.at(key);
    if (!v.is_number()) bad_key(key, "expected a number");
    return v.get<double>();
}

int take_int(const json& object, const std::string& key, int fallback) {
    if (!object.contains(key)) return fallback;
    const json& v = object.at(key);
    if (!v.is_number_integer()) bad_key(key, "expected an integer");
    return v.get<int>();
}

std::uint64_t take_u64(const json& object, const std::string& key, std::uint64_t fallback) {
    if (!object.contains(key)) return fallback;
    const json& v = object.at(key);
    if (!v.is_number_unsigned() && !v.is_number_integer()) bad_key(key, "expected an integer");
    if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        bad_key(key, "must be nonnegative");
    }
    return v.get<std::uint64_t>();
}

std::string take_enum(const json& object, const std::string& key, const char* fallback,
                      const std::set<std::string>& values) {
    if (!object.contains(key)) return fallback;
    const json& v = object.at(key);
    if (!v.is_string()) bad_key(key, "expected a string");
    const std::string s = v.get<std::string>();
    if (!values.contains(s)) {
        std::string options;
        for (const std::string& value : values) {
            if (!options.empty()) options += ", ";
            options += value;
        }
        bad_key(key, "must be one of {" + options + "}, got \"" + s + "\"");
    }
    return s;
}

}  // namespace

FederationConfig config_from_json(const json& root) {
    if (!root.is_object()) throw ConfigError("config root must be a JSON object");
    reject_unknown(root, {"seed", "N", "L", "dims", "rank", "metric", "tau", "K", "E_warm", "E",
                          "T", "eta", "batch_size", "activation", "variant", "mode", "fixed_k",
                          "weighting", "data"},
                   "");

    FederationConfig cfg;
    cfg.seed = take_u64(root, "seed", cfg.seed);
    cfg.clients = take_int(root, "N", cfg.clients);
    cfg.layers = take_int(root, "L", cfg.layers);
    cfg.rank = take_int(root, "rank", cfg.rank);
    cfg.tau = take_number(root, "tau", cfg.tau);
    cfg.window = take_int(root, "K", cfg.window);
    cfg.warmup_epochs = take_int(root, "E_warm", cfg.warmup_epochs);
    cfg.local_epochs = take_int(root, "E", cfg.local_epochs);
    cfg.rounds = take_int(root, "T", cfg.rounds);
    cfg.eta = take_number(root, "eta", cfg.eta);
    cfg.batch_size = take_int(root, "batch_size", cfg.batch_size);
    cfg.fixed_k = take_int(root, "fixed_k", cfg.fixed_k);

    if (root.contains("dims")) {
        const json& dims = root.at("dims");
        if (dims.is_number_integer()) {
            cfg.dims.assign(cfg.layers, dims.get<int>());
        } else if (dims.is_array()) {
            cfg.dims.clear();
            for (const json& d : dims) {
                if (!d.is_number_integer()) bad_key("dims", "expected integers");
                cfg.dims.push_back(d.get<int>());
            }
        } else {
            bad_key("dims", "expected an integer or an array of integers");
        }
    } else {
        cfg.dims.assign(cfg.layers, 16);
    }

    const std::string metric =
        take_enum(root, "metric", "frobenius", {"frobenius", "cosine"});
    cfg.metric = metric == "cosine" ? Metric::Cosine : Metric::Frobenius;

    const std::string activation = take_enum(root, "activation", "tanh", {"identity", "tanh"});
    cfg.activation = activation == "identity" ? Activation::Identity : Activation::Tanh;

    const std::string variant =
        take_enum(root, "variant", "scalar_mixed", {"scalar_mixed", "isolationist"});
    cfg.variant = variant == "isolationist" ? Variant::Isolationist : Variant::ScalarMixed;

    const std::string mode =
        take_enum(root, "mode", "fedtree",
                  {"fedtree", "fedit", "local_only", "fixed_k", "independent_layerwise"});
    if (mode == "fedit") {
        cfg.mode = Mode::FedIt;
    } else if (mode == "local_only") {
        cfg.mode = Mode::LocalOnly;
    } else if (mode == "fixed_k") {
        cfg.mode = Mode::FixedK;
    } else if (mode == "independent_layerwise") {
        cfg.mode = Mode::IndependentLayerwise;
    } else {
        cfg.mode = Mode::FedTree;
    }

    const std::string weighting =
        take_enum(root, "weighting", "uniform", {"uniform", "by_samples"});
    cfg.weighting = weighting == "by_samples" ? Weighting::BySamples : Weighting::Uniform;

    if (root.contains("data")) {
        const json& data = root.at("data");
        if (!data.is_object()) bad_key("data", "expected an object");
        reject_unknown(data,
                       {"group_count", "clients_per_group", "shared_depth", "divergence_scale",
                        "noise_std", "train_samples", "test_samples", "input_dim"},
                       "data.");
        cfg.data.group_count = take_int(data, "group_count", cfg.data.group_count);
        cfg.data.clients_per_group = take_int(data, "clients_per_group", cfg.data.clients_per_group);
        cfg.data.shared_depth = take_int(data, "shared_depth", cfg.data.shared_depth);
        cfg.data.divergence_scale = take_number(data, "divergence_scale", cfg.data.divergence_scale);
        cfg.data.noise_std = take_number(data, "noise_std", cfg.data.noise_std);
        cfg.data.train_samples = take_int(data, "train_samples", cfg.data.train_samples);
        cfg.data.test_samples = take_int(data, "test_samples", cfg.data.test_samples);
        cfg.data.input_dim = take_int(data, "input_dim", cfg.data.input_dim);
    }

    cfg.validate();
    return cfg;
}

FederationConfig parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    json root;
    try {
        root = json::parse(buffer.str());
    } catch (const json::parse_error& e) {
        throw ConfigError("malformed JSON in " + path + ": " + e.what());
    }
    return config_from_json(root);
}

nlohmann::json config_to_json(const FederationConfig& config) {
    json root;
    root["seed"] = config.seed;
    root["N"] = config.clients;
    root["L"] = config.layers;
    root["dims"] = config.dims.empty() ? std::vector<int>(config.layers, 16) : config.dims;
    root["rank"] = config.rank;
    root["metric"] = to_string(config.metric);
    root["tau"] = config.tau;
    root["K"] = config.window;
    root["E_warm"] = config.warmup_epochs;
    root["E"] = config.local_epochs;
    root["T"] = config.rounds;
    root["eta"] = config.eta;
    root["batch_size"] = config.batch_size;
    root["activation"] = to_string(config.activation);
    root["variant"] = to_string(config.variant);
    root["mode"] = to_string(config.mode);
    root["fixed_k"] = config.fixed_k;
    root["weighting"] = to_string(config.weighting);
    root["data"] = {{"group_count", config.data.group_count},
                    {"clients_per_group", config.data.clients_per_group},
                    {"shared_depth", config.data.shared_depth},
                    {"divergence_scale", config.data.divergence_scale},
                    {"noise_std", config.data.noise_std},
                    {"train_samples", config.data.train_samples},
                    {"test_samples", config.data.test_samples},
                    {"input_dim", config.data.input_dim}};
    return root;
}

const char* to_string(Metric metric) {
    return metric == Metric::Cosine ? "cosine" : "frobenius";
}

const char* to_string(Activation activation) {
    return activation == Activation::Identity ? "identity" : "tanh";
}

const char* to_string(Variant variant) {
    return variant == Variant::Isolationist ? "isolationist" : "scalar_mixed";
}

const char* to_string(Mode mode) {
    switch (mode) {
        case Mode::FedIt: return "fedit";
        case Mode::LocalOnly: return "local_only";
        case Mode::FixedK: return "fixed_k";
        case Mode::IndependentLayerwise: return "independent_layerwise";
        case Mode::FedTree: break;
    }
    return "fedtree";
}

const char* to_string(Weighting weighting) {
    return weighting == Weighting::BySamples ? "by_samples" : "uniform";
}

}  // namespace fedtree
