#pragma once

#include <string>

#include <json.hpp>

#include "dnx/analysis.hpp"
#include "dnx/training.hpp"

namespace dnx {

// Strict schema: unknown keys are configuration errors. A "preset" key
// expands to the named Table-style variant first; sibling keys then override
// individual fields.
ModelConfig model_config_from_json(const nlohmann::json& j);
nlohmann::json model_config_to_json(const ModelConfig& cfg);

// Stable identity: fnv1a-64 over the canonical (sorted-key) serialization.
uint64_t fnv1a64(std::string_view s);
std::string config_id(const ModelConfig& cfg);

TrainRecipe recipe_from_json(const nlohmann::json& j);
nlohmann::json recipe_to_json(const TrainRecipe& r);

nlohmann::json train_report_to_json(const TrainReport& r);
nlohmann::json gradcheck_report_to_json(const GradCheckReport& r);
nlohmann::json cost_report_to_json(const CostReport& r);
std::string cost_report_to_table(const CostReport& r);
std::string cost_report_to_csv(const CostReport& r);

// Dotted-path override, e.g. "stages.2.attention_tail=4" (array indices are
// zero-based). The value parses as JSON when possible, else as a string.
void apply_override(nlohmann::json& root, const std::string& assignment);

nlohmann::json load_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// Shortest round-trip decimal form (std::to_chars), portable and stable.
std::string format_double(double v);

}  // namespace dnx
