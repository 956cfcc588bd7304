#include "forge15/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "forge15/grpo.hpp"
#include "forge15/model.hpp"
#include "forge15/rng.hpp"
#include "forge15/tokenizer.hpp"

namespace forge15 {
namespace {

constexpr uint64_t kEvalStream = 0x4556414c;  // "EVAL"

bool exact_kind(const std::string& kind) { return kind == "math" || kind == "tool"; }

std::string format_cell(double pass, double think) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4f p@1  %8.1f tt", pass, think);
    return buf;
}

}  // namespace

void EvalConfig::validate() const {
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
    if (max_new <= 0) throw std::invalid_argument("max_new must be positive");
    if (seeds.empty()) throw std::invalid_argument("seeds must be nonempty");
    format.validate();
}

EvalConfig EvalConfig::from_json(const nlohmann::json& j) {
    EvalConfig c;
    c.temperature = j.value("temperature", c.temperature);
    c.top_p = j.value("top_p", c.top_p);
    c.max_new = j.value("max_new", c.max_new);
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("format")) c.format = FormatSpec::from_json(j.at("format"));
    c.validate();
    return c;
}

nlohmann::ordered_json EvalConfig::to_json() const {
    return {{"temperature", temperature},
            {"top_p", top_p},
            {"max_new", max_new},
            {"seeds", seeds},
            {"format", {{"open_tag", format.open_tag}, {"close_tag", format.close_tag}}}};
}

ThinkingReport thinking_tokens(const std::vector<std::string>& outputs, const FormatSpec& spec) {
    spec.validate();
    ThinkingReport report;
    report.counts.reserve(outputs.size());
    long long total = 0;
    for (const auto& text : outputs) {
        const FormatCheck fc = check_format(text, spec);
        const int count = fc.valid ? static_cast<int>(fc.thinking.size())
                                   : static_cast<int>(text.size());
        report.counts.push_back(count);
        total += count;
    }
    report.mean = outputs.empty() ? 0.0 : static_cast<double>(total) / outputs.size();
    return report;
}

EvalResult pass_at_1(const Checkpoint& params, const std::vector<RewardTask>& tasks,
                     const EvalConfig& config) {
    config.validate();
    if (tasks.empty()) throw std::invalid_argument("empty task set");

    EvalResult result;
    result.tasks.resize(tasks.size());
    std::vector<std::string> outputs;
    outputs.reserve(tasks.size() * config.seeds.size());

    for (size_t i = 0; i < tasks.size(); ++i) {
        auto& tr = result.tasks[i];
        tr.prompt = tasks[i].prompt;
        tr.kind = tasks[i].kind;
        const std::vector<int> prompt = render_task_prompt(tasks[i].prompt);
        for (uint64_t seed : config.seeds) {
            const uint64_t draw = derive_seed(seed, kEvalStream, static_cast<uint64_t>(i));
            const SampleResult sr = sample(params, prompt, config.temperature, config.top_p,
                                           config.max_new, draw);
            const std::string text =
                decode_for_scoring(sr.tokens, config.format.open_tag, config.format.close_tag);
            const double r = composite_reward(text, tasks[i], config.format);
            tr.scores.push_back(exact_kind(tasks[i].kind) ? (r == 1.0 ? 1.0 : 0.0) : r);

            const FormatCheck fc = check_format(text, config.format);
            tr.thinking.push_back(fc.valid ? static_cast<int>(fc.thinking.size())
                                           : static_cast<int>(text.size()));
            outputs.push_back(text);
        }
    }

    for (size_t si = 0; si < config.seeds.size(); ++si) {
        double sum = 0.0;
        for (const auto& tr : result.tasks) sum += tr.scores[si];
        result.per_seed.push_back(sum / static_cast<double>(tasks.size()));
    }
    double seed_sum = 0.0;
    for (double s : result.per_seed) seed_sum += s;
    result.pass_at_1 = seed_sum / static_cast<double>(result.per_seed.size());
    result.mean_thinking_tokens = thinking_tokens(outputs, config.format).mean;
    return result;
}

nlohmann::ordered_json EvalReport::to_json() const {
    nlohmann::ordered_json out = nlohmann::ordered_json::array();
    for (const auto& cell : cells) {
        out.push_back({{"model", cell.model},
                       {"suite", cell.suite},
                       {"pass_at_1", cell.pass_at_1},
                       {"mean_thinking_tokens", cell.mean_thinking_tokens},
                       {"n", cell.n}});
    }
    return out;
}

std::string EvalReport::table() const {
    std::vector<std::string> models, suites;
    for (const auto& cell : cells) {
        if (std::find(models.begin(), models.end(), cell.model) == models.end())
            models.push_back(cell.model);
        if (std::find(suites.begin(), suites.end(), cell.suite) == suites.end())
            suites.push_back(cell.suite);
    }
    size_t name_w = 5;
    for (const auto& m : models) name_w = std::max(name_w, m.size());
    const size_t cell_w = std::max<size_t>(24, [&] {
        size_t w = 0;
        for (const auto& s : suites) w = std::max(w, s.size());
        return w;
    }());

    auto pad = [](const std::string& s, size_t w) {
        return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
    };

    std::string out = pad("model", name_w);
    for (const auto& s : suites) out += "  " + pad(s, cell_w);
    out += "\n";
    out += std::string(name_w, '-');
    for (size_t i = 0; i < suites.size(); ++i) out += "  " + std::string(cell_w, '-');
    out += "\n";
    for (const auto& m : models) {
        out += pad(m, name_w);
        for (const auto& s : suites) {
            std::string text;
            for (const auto& cell : cells) {
                if (cell.model == m && cell.suite == s) {
                    text = format_cell(cell.pass_at_1, cell.mean_thinking_tokens);
                    break;
                }
            }
            out += "  " + pad(text, cell_w);
        }
        out += "\n";
    }
    return out;
}

EvalReport run_suite(const std::vector<NamedModel>& models, const std::vector<NamedSuite>& suites,
                     const EvalConfig& config) {
    config.validate();
    if (models.empty()) throw std::invalid_argument("empty model list");
    if (suites.empty()) throw std::invalid_argument("empty suite list");

    EvalReport report;
    for (const auto& model : models) {
        for (const auto& suite : suites) {
            const EvalResult r = pass_at_1(model.ckpt, suite.tasks, config);
            SuiteCell cell;
            cell.model = model.name;
            cell.suite = suite.name;
            cell.pass_at_1 = r.pass_at_1;
            cell.mean_thinking_tokens = r.mean_thinking_tokens;
            cell.n = static_cast<int>(suite.tasks.size() * config.seeds.size());
            report.cells.push_back(std::move(cell));
        }
    }
    return report;
}

void TokenReport::validate() const {
    if (models.empty()) throw std::invalid_argument("token report needs at least one model");
    for (const auto& row : rows) {
        if (row.values.size() != models.size()) {
            throw std::invalid_argument("row '" + row.label + "' has " +
                                        std::to_string(row.values.size()) + " values for " +
                                        std::to_string(models.size()) + " models");
        }
        for (int64_t v : row.values) {
            if (v < 0) throw std::invalid_argument("row '" + row.label + "' has a negative count");
        }
    }
}

TokenReport TokenReport::from_json(const nlohmann::json& j) {
    TokenReport report;
    report.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& row : j.at("rows")) {
        report.rows.push_back(
            {row.at("label").get<std::string>(), row.at("values").get<std::vector<int64_t>>()});
    }
    report.validate();
    return report;
}

std::string render_token_report(const TokenReport& report) {
    report.validate();
    const int bar_width = 40;
    size_t name_w = 0;
    for (const auto& m : report.models) name_w = std::max(name_w, m.size());
    size_t value_w = 1;
    for (const auto& row : report.rows) {
        for (int64_t v : row.values) value_w = std::max(value_w, std::to_string(v).size());
    }

    std::string out = "thinking tokens by model\n";
    for (const auto& row : report.rows) {
        out += "\n" + row.label + "\n";
        const int64_t mx = *std::max_element(row.values.begin(), row.values.end());
        for (size_t m = 0; m < report.models.size(); ++m) {
            const int64_t v = row.values[m];
            int bars = 0;
            if (mx > 0 && v > 0) {
                bars = std::max<int>(
                    1, static_cast<int>(std::llround(static_cast<double>(bar_width) * v / mx)));
            }
            const std::string vs = std::to_string(v);
            out += "  " + report.models[m] + std::string(name_w - report.models[m].size(), ' ') +
                   "  " + std::string(value_w - vs.size(), ' ') + vs + "  " +
                   std::string(static_cast<size_t>(bars), '#') + "\n";
        }
    }
    return out;
}

}  // namespace forge15
