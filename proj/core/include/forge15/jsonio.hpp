#pragma once

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

namespace forge15 {

nlohmann::json load_json_file(const std::filesystem::path& path);
void save_json_file(const std::filesystem::path& path, const nlohmann::json& j);

// JSON-lines: one object per line, blank lines ignored.
std::vector<nlohmann::json> load_jsonl(const std::filesystem::path& path);
void save_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows);

}  // namespace forge15
