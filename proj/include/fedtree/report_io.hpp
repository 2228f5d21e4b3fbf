#pragma once

#include <string>

#include <nlohmann/json.hpp>

#include "fedtree/federation.hpp"

namespace fedtree {

// JSON views of the run artifacts. All serialization here is deterministic:
// keys are emitted sorted and doubles use the shortest round-trip form, so
// identical runs produce identical bytes.
nlohmann::json tree_to_json(const MergeTree& tree);
nlohmann::json schedule_to_json(const DepthSchedule& schedule);
nlohmann::json report_to_json(const ExperimentReport& report);

// metrics.csv body: header plus one row per (round, client), rounds outer,
// clients ascending inner. Doubles are printed with %.17g.
std::string metrics_csv(const ExperimentReport& report);

// Writes `content` to `path`, creating parent directories; IoError on
// failure.
void write_text_file(const std::string& path, const std::string& content);

std::string read_text_file(const std::string& path);

}  // namespace fedtree
