#include "forge15/jsonio.hpp"

#include <fstream>
#include <stdexcept>

namespace forge15 {

nlohmann::json load_json_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
    try {
        return nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("invalid JSON in '" + path.string() + "': " + e.what());
    }
}

void save_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f << j.dump(2) << "\n";
    if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<nlohmann::json> load_jsonl(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::vector<nlohmann::json> rows;
    std::string line;
    size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            rows.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error("invalid JSON at " + path.string() + ":" +
                                     std::to_string(lineno) + ": " + e.what());
        }
    }
    return rows;
}

void save_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    for (const auto& row : rows) f << row.dump() << "\n";
    if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

}  // namespace forge15
