#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge15/checkpoint.hpp"
#include "forge15/rewards.hpp"

namespace forge15 {

struct EvalConfig {
    double temperature = 0.6;
    double top_p = 0.95;
    int max_new = 256;
    std::vector<uint64_t> seeds = {1};
    FormatSpec format;

    void validate() const;
    static EvalConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct EvalTaskResult {
    std::string prompt;
    std::string kind;
    std::vector<double> scores;    // per seed; exact kinds binarized at 1.0
    std::vector<int> thinking;     // per seed thinking-token counts
};

struct EvalResult {
    double pass_at_1 = 0.0;
    double mean_thinking_tokens = 0.0;
    std::vector<double> per_seed;  // mean score per seed, averaged into pass_at_1
    std::vector<EvalTaskResult> tasks;
};

// One sample per task per seed at the eval decoding settings. Math and tool
// scores count only on a full 1.0; instruction and code keep their fraction.
EvalResult pass_at_1(const Checkpoint& params, const std::vector<RewardTask>& tasks,
                     const EvalConfig& config);

struct ThinkingReport {
    std::vector<int> counts;
    double mean = 0.0;
};

// Tokens strictly between the format tags (bytes, under the byte tokenizer).
// Outputs that fail the format check count at full length: an unterminated
// trace is all thinking.
ThinkingReport thinking_tokens(const std::vector<std::string>& outputs, const FormatSpec& spec);

struct NamedModel {
    std::string name;
    Checkpoint ckpt;
};

struct NamedSuite {
    std::string name;
    std::vector<RewardTask> tasks;
};

struct SuiteCell {
    std::string model;
    std::string suite;
    double pass_at_1 = 0.0;
    double mean_thinking_tokens = 0.0;
    int n = 0;  // scored generations: tasks x seeds
};

struct EvalReport {
    std::vector<SuiteCell> cells;  // model-major order

    nlohmann::ordered_json to_json() const;
    std::string table() const;
};

EvalReport run_suite(const std::vector<NamedModel>& models, const std::vector<NamedSuite>& suites,
                     const EvalConfig& config);

// Comparative thinking-token bar report rendered from recorded numbers.
struct TokenReportRow {
    std::string label;
    std::vector<int64_t> values;  // one per model
};

struct TokenReport {
    std::vector<std::string> models;
    std::vector<TokenReportRow> rows;

    void validate() const;
    static TokenReport from_json(const nlohmann::json& j);
};

std::string render_token_report(const TokenReport& report);

}  // namespace forge15
