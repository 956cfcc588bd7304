#include "forge15/rewards.hpp"

#include <cctype>
#include <optional>
#include <sstream>
#include <stdexcept>

#include "forge15/jsonio.hpp"

namespace forge15 {
namespace {

std::string trim(const std::string& s) {
    size_t a = 0;
    size_t b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

std::string collapse_lower(const std::string& s) {
    std::string out;
    bool in_space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            in_space = true;
            continue;
        }
        if (in_space && !out.empty()) out.push_back(' ');
        in_space = false;
        out.push_back(static_cast<char>(std::tolower(c)));
    }
    return out;
}

// Content of the last \boxed{...} whose braces balance.
std::optional<std::string> last_boxed(const std::string& s) {
    const std::string marker = "\\boxed{";
    std::optional<std::string> found;
    for (size_t pos = s.find(marker); pos != std::string::npos; pos = s.find(marker, pos + 1)) {
        int depth = 1;
        size_t i = pos + marker.size();
        for (; i < s.size() && depth > 0; ++i) {
            if (s[i] == '{') ++depth;
            if (s[i] == '}') --depth;
        }
        if (depth == 0) found = s.substr(pos + marker.size(), i - 1 - (pos + marker.size()));
    }
    return found;
}

struct Rational {
    __int128 num = 0;
    __int128 den = 1;
};

// Integer, decimal, or a/b with integer parts. Anything longer than 18
// digits per component falls back to string comparison.
std::optional<Rational> parse_rational(const std::string& s) {
    auto parse_int = [](const std::string& t, __int128& out) {
        size_t i = 0;
        bool neg = false;
        if (i < t.size() && (t[i] == '+' || t[i] == '-')) neg = t[i++] == '-';
        if (i == t.size() || t.size() - i > 18) return false;
        __int128 v = 0;
        for (; i < t.size(); ++i) {
            if (!std::isdigit(static_cast<unsigned char>(t[i]))) return false;
            v = v * 10 + (t[i] - '0');
        }
        out = neg ? -v : v;
        return true;
    };

    const size_t slash = s.find('/');
    if (slash != std::string::npos) {
        if (s.find('/', slash + 1) != std::string::npos) return std::nullopt;
        Rational r;
        if (!parse_int(s.substr(0, slash), r.num)) return std::nullopt;
        if (!parse_int(s.substr(slash + 1), r.den)) return std::nullopt;
        if (r.den == 0) return std::nullopt;
        return r;
    }

    size_t i = 0;
    bool neg = false;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) neg = s[i++] == '-';
    std::string digits;
    size_t frac_len = 0;
    bool seen_dot = false;
    for (; i < s.size(); ++i) {
        if (s[i] == '.' && !seen_dot) {
            seen_dot = true;
            continue;
        }
        if (!std::isdigit(static_cast<unsigned char>(s[i]))) return std::nullopt;
        digits.push_back(s[i]);
        if (seen_dot) ++frac_len;
    }
    if (digits.empty() || digits.size() > 18) return std::nullopt;
    Rational r;
    for (char c : digits) r.num = r.num * 10 + (c - '0');
    if (neg) r.num = -r.num;
    for (size_t k = 0; k < frac_len; ++k) r.den *= 10;
    return r;
}

bool rational_eq(const Rational& a, const Rational& b) {
    return a.num * b.den == b.num * a.den;
}

std::string normalize_math(const std::string& s) {
    std::string t = trim(s);
    while (!t.empty() && t.front() == '$') t.erase(t.begin());
    while (!t.empty() && t.back() == '$') t.pop_back();
    t = trim(t);
    if (!t.empty() && t.back() == '.') t.pop_back();
    return trim(t);
}

int count_words(const std::string& s) {
    int n = 0;
    bool in_word = false;
    for (unsigned char c : s) {
        const bool space = std::isspace(c) != 0;
        if (!space && !in_word) ++n;
        in_word = !space;
    }
    return n;
}

std::vector<std::string> split_lines(const std::string& s) {
    std::vector<std::string> lines;
    std::string cur;
    for (char c : s) {
        if (c == '\n') {
            lines.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    lines.push_back(std::move(cur));
    return lines;
}

int count_bullets(const std::string& s) {
    int n = 0;
    for (const std::string& line : split_lines(s)) {
        if (line.rfind("- ", 0) == 0) ++n;
    }
    return n;
}

int count_paragraphs(const std::string& s) {
    int n = 0;
    bool in_para = false;
    for (const std::string& line : split_lines(s)) {
        const bool blank = trim(line).empty();
        if (!blank && !in_para) ++n;
        in_para = !blank;
    }
    return n;
}

bool needs_int_value(const std::string& type) {
    return type == "max_words" || type == "min_words" || type == "bullet_count" ||
           type == "paragraph_count";
}

bool needs_string_value(const std::string& type) {
    return type == "contains" || type == "not_contains" || type == "starts_with" ||
           type == "ends_with";
}

bool is_flag_type(const std::string& type) {
    return type == "json_object" || type == "uppercase_only";
}

bool constraint_met(const Constraint& c, const std::string& r) {
    if (c.type == "max_words") return count_words(r) <= c.value.get<int64_t>();
    if (c.type == "min_words") return count_words(r) >= c.value.get<int64_t>();
    if (c.type == "contains") return r.find(c.value.get<std::string>()) != std::string::npos;
    if (c.type == "not_contains") return r.find(c.value.get<std::string>()) == std::string::npos;
    if (c.type == "starts_with") return r.rfind(c.value.get<std::string>(), 0) == 0;
    if (c.type == "ends_with") {
        const std::string suffix = c.value.get<std::string>();
        return r.size() >= suffix.size() && r.compare(r.size() - suffix.size(), suffix.size(), suffix) == 0;
    }
    if (c.type == "bullet_count") return count_bullets(r) == c.value.get<int64_t>();
    if (c.type == "paragraph_count") return count_paragraphs(r) == c.value.get<int64_t>();
    if (c.type == "json_object") {
        const auto j = nlohmann::json::parse(r, nullptr, false);
        return !j.is_discarded() && j.is_object();
    }
    // uppercase_only
    for (unsigned char ch : r) {
        if (std::islower(ch)) return false;
    }
    return true;
}

// First fenced block: a line starting ``` opens it (rest of the line is
// a language tag), the next such line closes it.
std::string extract_program(const std::string& response) {
    const std::vector<std::string> lines = split_lines(response);
    std::string program;
    bool inside = false;
    bool seen_fence = false;
    for (const std::string& line : lines) {
        if (line.rfind("```", 0) == 0) {
            if (inside) break;
            inside = true;
            seen_fence = true;
            continue;
        }
        if (inside) program += line + "\n";
    }
    return seen_fence ? program : response;
}

std::optional<std::vector<ToolCall>> extract_tool_calls(const std::string& response) {
    const std::string open = "<tool_call>";
    const std::string close = "</tool_call>";
    std::vector<ToolCall> calls;
    size_t pos = 0;
    while (true) {
        const size_t a = response.find(open, pos);
        if (a == std::string::npos) break;
        const size_t b = response.find(close, a + open.size());
        if (b == std::string::npos) return std::nullopt;
        const std::string body = response.substr(a + open.size(), b - a - open.size());
        const auto j = nlohmann::json::parse(body, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("name") || !j["name"].is_string() ||
            !j.contains("arguments") || !j["arguments"].is_object()) {
            return std::nullopt;
        }
        calls.push_back({j["name"].get<std::string>(), j["arguments"]});
        pos = b + close.size();
    }
    return calls;
}

CodeTest code_test_from_json(const nlohmann::json& j) {
    CodeTest t;
    t.call = j.at("call").get<std::string>();
    for (const auto& a : j.at("args")) t.args.push_back(a.get<int64_t>());
    t.expect = j.at("expect").get<int64_t>();
    return t;
}

nlohmann::ordered_json code_test_to_json(const CodeTest& t) {
    return {{"call", t.call}, {"args", t.args}, {"expect", t.expect}};
}

}  // namespace

void FormatSpec::validate() const {
    if (open_tag.empty() || close_tag.empty()) {
        throw std::invalid_argument("format tags must be nonempty");
    }
    if (open_tag == close_tag) {
        throw std::invalid_argument("format tags must be distinct");
    }
}

FormatSpec FormatSpec::from_json(const nlohmann::json& j) {
    FormatSpec spec;
    if (j.contains("open_tag")) spec.open_tag = j.at("open_tag").get<std::string>();
    if (j.contains("close_tag")) spec.close_tag = j.at("close_tag").get<std::string>();
    spec.validate();
    return spec;
}

FormatCheck check_format(const std::string& text, const FormatSpec& spec) {
    spec.validate();
    FormatCheck out;
    if (text.rfind(spec.open_tag, 0) != 0) return out;
    const size_t close = text.find(spec.close_tag);
    if (close == std::string::npos || close < spec.open_tag.size()) return out;
    if (text.find(spec.close_tag, close + spec.close_tag.size()) != std::string::npos) return out;
    std::string response = text.substr(close + spec.close_tag.size());
    if (response.empty()) return out;
    out.valid = true;
    out.thinking = text.substr(spec.open_tag.size(), close - spec.open_tag.size());
    out.response = std::move(response);
    return out;
}

void Constraint::validate() const {
    if (needs_int_value(type)) {
        if (!value.is_number_integer() || value.get<int64_t>() < 0) {
            throw std::invalid_argument("constraint '" + type + "' needs a non-negative integer value");
        }
        return;
    }
    if (needs_string_value(type)) {
        if (!value.is_string()) {
            throw std::invalid_argument("constraint '" + type + "' needs a string value");
        }
        return;
    }
    if (!is_flag_type(type)) {
        throw std::invalid_argument("unknown constraint type '" + type + "'");
    }
}

Constraint Constraint::from_json(const nlohmann::json& j) {
    Constraint c;
    c.type = j.at("type").get<std::string>();
    if (j.contains("value")) c.value = j.at("value");
    c.validate();
    return c;
}

nlohmann::ordered_json Constraint::to_json() const {
    nlohmann::ordered_json j{{"type", type}};
    if (!value.is_null()) j["value"] = value;
    return j;
}

void RewardTask::validate() const {
    if (kind == "math") {
        if (answer.empty()) throw std::invalid_argument("math task needs an answer");
    } else if (kind == "instruction") {
        if (constraints.empty()) {
            throw std::invalid_argument("instruction task needs at least one constraint");
        }
        for (const Constraint& c : constraints) c.validate();
    } else if (kind == "code") {
        if (tests.empty()) throw std::invalid_argument("code task needs at least one test");
    } else if (kind == "tool") {
        if (expected_calls.empty()) {
            throw std::invalid_argument("tool task needs at least one expected call");
        }
    } else {
        throw std::invalid_argument("unknown task kind '" + kind + "'");
    }
}

RewardTask RewardTask::from_json(const nlohmann::json& j) {
    RewardTask t;
    t.kind = j.at("kind").get<std::string>();
    t.prompt = j.value("prompt", std::string());
    if (j.contains("answer")) t.answer = j.at("answer").get<std::string>();
    if (j.contains("constraints")) {
        for (const auto& c : j.at("constraints")) t.constraints.push_back(Constraint::from_json(c));
    }
    if (j.contains("tests")) {
        for (const auto& c : j.at("tests")) t.tests.push_back(code_test_from_json(c));
    }
    if (j.contains("tools")) {
        for (const auto& s : j.at("tools")) t.tools.push_back(s);
    }
    if (j.contains("expected_calls")) {
        for (const auto& c : j.at("expected_calls")) {
            t.expected_calls.push_back({c.at("name").get<std::string>(), c.at("arguments")});
        }
    }
    t.validate();
    return t;
}

nlohmann::ordered_json RewardTask::to_json() const {
    nlohmann::ordered_json j{{"kind", kind}, {"prompt", prompt}};
    if (kind == "math") j["answer"] = answer;
    if (kind == "instruction") {
        auto arr = nlohmann::ordered_json::array();
        for (const Constraint& c : constraints) arr.push_back(c.to_json());
        j["constraints"] = arr;
    }
    if (kind == "code") {
        auto arr = nlohmann::ordered_json::array();
        for (const CodeTest& t : tests) arr.push_back(code_test_to_json(t));
        j["tests"] = arr;
    }
    if (kind == "tool") {
        j["tools"] = tools;
        auto arr = nlohmann::ordered_json::array();
        for (const ToolCall& c : expected_calls) {
            arr.push_back(nlohmann::ordered_json{{"name", c.name}, {"arguments", c.arguments}});
        }
        j["expected_calls"] = arr;
    }
    return j;
}

double score_math(const std::string& response, const std::string& answer) {
    const std::string candidate = last_boxed(response).value_or(trim(response));
    const std::string c = normalize_math(candidate);
    const std::string a = normalize_math(answer);
    const auto rc = parse_rational(c);
    const auto ra = parse_rational(a);
    if (rc && ra) return rational_eq(*rc, *ra) ? 1.0 : 0.0;
    return collapse_lower(c) == collapse_lower(a) ? 1.0 : 0.0;
}

double score_instructions(const std::string& response, const std::vector<Constraint>& constraints) {
    if (constraints.empty()) {
        throw std::invalid_argument("instruction task needs at least one constraint");
    }
    int met = 0;
    for (const Constraint& c : constraints) {
        c.validate();
        if (constraint_met(c, response)) ++met;
    }
    return static_cast<double>(met) / static_cast<double>(constraints.size());
}

double score_code(const std::string& response, const std::vector<CodeTest>& tests) {
    if (tests.empty()) throw std::invalid_argument("code task needs at least one test");
    const std::string program = extract_program(response);
    int passed = 0;
    for (const CodeTest& t : tests) {
        if (run_minicalc(program, t).pass) ++passed;
    }
    return static_cast<double>(passed) / static_cast<double>(tests.size());
}

double score_toolcall(const std::string& response, const std::vector<ToolCall>& expected_calls) {
    if (expected_calls.empty()) {
        throw std::invalid_argument("tool task needs at least one expected call");
    }
    const auto calls = extract_tool_calls(response);
    if (!calls || calls->size() != expected_calls.size()) return 0.0;
    for (size_t i = 0; i < expected_calls.size(); ++i) {
        if ((*calls)[i].name != expected_calls[i].name) return 0.0;
        if ((*calls)[i].arguments != expected_calls[i].arguments) return 0.0;
    }
    return 1.0;
}

double composite_reward(const std::string& model_text, const RewardTask& task,
                        const FormatSpec& spec) {
    task.validate();
    const FormatCheck fc = check_format(model_text, spec);
    if (!fc.valid) return 0.0;
    if (task.kind == "math") return score_math(fc.response, task.answer);
    if (task.kind == "instruction") return score_instructions(fc.response, task.constraints);
    if (task.kind == "code") return score_code(fc.response, task.tests);
    return score_toolcall(fc.response, task.expected_calls);
}

std::vector<RewardTask> load_reward_tasks(const std::filesystem::path& path) {
    std::vector<RewardTask> tasks;
    for (const auto& row : load_jsonl(path)) tasks.push_back(RewardTask::from_json(row));
    return tasks;
}

}  // namespace forge15
