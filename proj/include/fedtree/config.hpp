#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "fedtree/federation.hpp"

namespace fedtree {

// Strict config parsing: unknown keys, wrong types, and invariant violations
// all raise ConfigError naming the key. Missing keys take the documented
// defaults, so {} is a valid config.
FederationConfig config_from_json(const nlohmann::json& root);

// Reads and parses a config file. A missing/unreadable file raises IoError;
// malformed JSON or bad values raise ConfigError.
FederationConfig parse_config(const std::string& path);

// Canonical resolved form: every key present, dims as an explicit array.
// Feeding the result back through config_from_json reproduces the config.
nlohmann::json config_to_json(const FederationConfig& config);

const char* to_string(Metric metric);
const char* to_string(Activation activation);
const char* to_string(Variant variant);
const char* to_string(Mode mode);
const char* to_string(Weighting weighting);

}  // namespace fedtree
