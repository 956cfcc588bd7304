#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge15/minicalc.hpp"

namespace forge15 {

struct FormatSpec {
    std::string open_tag = "<think>";
    std::string close_tag = "</think>";

    void validate() const;
    static FormatSpec from_json(const nlohmann::json& j);
};

struct FormatCheck {
    bool valid = false;
    std::string thinking;
    std::string response;
};

// Valid iff text starts with open_tag, contains exactly one close_tag
// and has a nonempty response after it. Invalid is a result, not an
// error.
FormatCheck check_format(const std::string& text, const FormatSpec& spec);

struct Constraint {
    std::string type;
    nlohmann::json value;  // integer or string depending on type

    void validate() const;
    static Constraint from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct ToolCall {
    std::string name;
    nlohmann::json arguments;
};

// Tagged by `kind`: math | instruction | code | tool. Only the fields
// for the active kind are populated.
struct RewardTask {
    std::string kind;
    std::string prompt;
    std::string answer;                    // math
    std::vector<Constraint> constraints;   // instruction
    std::vector<CodeTest> tests;           // code
    std::vector<nlohmann::json> tools;     // tool, prompt-side schemas
    std::vector<ToolCall> expected_calls;  // tool

    void validate() const;
    static RewardTask from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

// Candidate is the last balanced \boxed{...} if present, else the whole
// trimmed response. Both sides are trimmed, stripped of '$' and a
// trailing '.', then compared exactly as rationals when both parse, and
// case-insensitively with collapsed whitespace otherwise. Returns 0/1.
double score_math(const std::string& response, const std::string& answer);

// Fraction of constraints satisfied.
double score_instructions(const std::string& response, const std::vector<Constraint>& constraints);

// Fraction of tests passing under run_minicalc; the program is the
// first fenced code block when one is present, else the whole response.
double score_code(const std::string& response, const std::vector<CodeTest>& tests);

// 1 iff the ordered <tool_call>{json}</tool_call> blocks deep-equal the
// expected (name, arguments) sequence, else 0.
double score_toolcall(const std::string& response, const std::vector<ToolCall>& expected_calls);

// Format gates everything: invalid format scores 0, otherwise the
// kind-specific scorer runs on the response segment.
double composite_reward(const std::string& model_text, const RewardTask& task,
                        const FormatSpec& spec);

std::vector<RewardTask> load_reward_tasks(const std::filesystem::path& path);

}  // namespace forge15
