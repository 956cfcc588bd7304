#include "forge15/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "forge15/jsonio.hpp"
#include "forge15/rng.hpp"
#include "forge15/tokenizer.hpp"

namespace forge15 {

namespace {

const std::set<std::string> kDomainTags = {"math", "code", "rag", "fc",
                                           "if",   "chat", "science"};
const std::set<std::string> kCptKinds = {"reasoning", "cot", "pretrain"};

void append_bytes(TokenBatch& b, const std::string& text, uint8_t mask) {
    for (unsigned char c : text) {
        b.tokens.push_back(static_cast<int>(c));
        b.doc_ids.push_back(0);
        b.loss_mask.push_back(mask);
    }
}

void append_special(TokenBatch& b, int id, uint8_t mask) {
    b.tokens.push_back(id);
    b.doc_ids.push_back(0);
    b.loss_mask.push_back(mask);
}

}  // namespace

void ChatSample::validate() const {
    if (!kDomainTags.count(domain_tag)) {
        throw std::runtime_error("unknown domain tag '" + domain_tag + "'");
    }
    bool any_assistant = false;
    std::string expected = "user";
    for (size_t i = 0; i < messages.size(); ++i) {
        const ChatMessage& m = messages[i];
        if (m.role == "system") {
            if (i != 0) throw std::runtime_error("malformed role sequence");
            continue;
        }
        if (m.role != "user" && m.role != "assistant") {
            throw std::runtime_error("unknown role '" + m.role + "'");
        }
        if (m.role != expected) throw std::runtime_error("malformed role sequence");
        expected = (m.role == "user") ? "assistant" : "user";
        if (m.role == "assistant") any_assistant = true;
        if (m.thinking && m.role != "assistant") {
            throw std::runtime_error("thinking only allowed on assistant messages");
        }
    }
    if (!any_assistant) throw std::runtime_error("no assistant turn");
}

ChatSample ChatSample::from_json(const nlohmann::json& j) {
    ChatSample s;
    s.domain_tag = j.value("domain_tag", "chat");
    for (const auto& m : j.at("messages")) {
        ChatMessage msg;
        msg.role = m.at("role").get<std::string>();
        msg.content = m.at("content").get<std::string>();
        if (m.contains("thinking")) msg.thinking = m.at("thinking").get<std::string>();
        s.messages.push_back(std::move(msg));
    }
    return s;
}

nlohmann::ordered_json ChatSample::to_json() const {
    nlohmann::ordered_json j;
    j["messages"] = nlohmann::ordered_json::array();
    for (const ChatMessage& m : messages) {
        nlohmann::ordered_json mj;
        mj["role"] = m.role;
        mj["content"] = m.content;
        if (m.thinking) mj["thinking"] = *m.thinking;
        j["messages"].push_back(std::move(mj));
    }
    j["domain_tag"] = domain_tag;
    return j;
}

void CPTSample::validate() const {
    if (segments.empty()) throw std::runtime_error("empty sample");
    if (!kCptKinds.count(kind)) throw std::runtime_error("unknown cpt kind '" + kind + "'");
}

CPTSample CPTSample::from_json(const nlohmann::json& j) {
    CPTSample s;
    s.kind = j.value("kind", "pretrain");
    for (const auto& seg : j.at("segments")) s.segments.push_back(seg.get<std::string>());
    return s;
}

nlohmann::ordered_json CPTSample::to_json() const {
    nlohmann::ordered_json j;
    j["segments"] = segments;
    j["kind"] = kind;
    return j;
}

void MixtureSpec::validate() const {
    if (sources.empty()) throw std::runtime_error("mixture needs at least one source");
    if (total < 1) throw std::runtime_error("mixture total must be positive");
    double sum = 0.0;
    for (const MixtureSource& s : sources) {
        if (!(s.weight > 0.0)) throw std::runtime_error("mixture weights must be positive");
        sum += s.weight;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        throw std::runtime_error("mixture weights must sum to 1");
    }
}

MixtureSpec MixtureSpec::from_json(const nlohmann::json& j) {
    MixtureSpec spec;
    spec.total = j.at("total").get<int64_t>();
    spec.seed = j.value("seed", 0ull);
    for (const auto& s : j.at("sources")) {
        spec.sources.push_back({s.at("dataset").get<std::string>(), s.at("weight").get<double>()});
    }
    spec.validate();
    return spec;
}

TokenBatch render_cpt(const CPTSample& sample) {
    sample.validate();
    TokenBatch b;
    for (size_t i = 0; i < sample.segments.size(); ++i) {
        if (i > 0) append_bytes(b, "\n", 1);
        append_bytes(b, sample.segments[i], 1);
    }
    if (b.tokens.empty()) throw std::runtime_error("empty sample");
    return b;
}

TokenBatch render_chat(const ChatSample& sample) {
    sample.validate();
    TokenBatch b;
    append_special(b, tok::BOS, 0);
    for (const ChatMessage& m : sample.messages) {
        if (m.role == "system") {
            append_special(b, tok::SYS, 0);
            append_bytes(b, m.content, 0);
        } else if (m.role == "user") {
            append_special(b, tok::USER, 0);
            append_bytes(b, m.content, 0);
        } else {
            append_special(b, tok::ASST, 0);
            append_special(b, tok::THINK_OPEN, 1);
            append_bytes(b, m.thinking.value_or(""), 1);
            append_special(b, tok::THINK_CLOSE, 1);
            append_bytes(b, m.content, 1);
            append_special(b, tok::EOS, 1);
        }
    }
    return b;
}

std::vector<TokenBatch> pack_sequences(const std::vector<TokenBatch>& batches, int seq_len) {
    if (seq_len < 1) throw std::runtime_error("seq_len must be positive");
    for (size_t i = 0; i < batches.size(); ++i) {
        if (static_cast<int>(batches[i].size()) > seq_len) {
            throw std::runtime_error("sample " + std::to_string(i) + " exceeds seq_len " +
                                     std::to_string(seq_len));
        }
        if (batches[i].tokens.empty()) {
            throw std::runtime_error("sample " + std::to_string(i) + " is empty");
        }
    }

    std::vector<TokenBatch> rows;
    std::vector<int> remaining;  // capacity left per row
    std::vector<int> next_doc;
    for (const TokenBatch& sample : batches) {
        const int len = static_cast<int>(sample.size());
        size_t row = rows.size();
        for (size_t r = 0; r < rows.size(); ++r) {
            if (remaining[r] >= len) {
                row = r;
                break;
            }
        }
        if (row == rows.size()) {
            rows.emplace_back();
            remaining.push_back(seq_len);
            next_doc.push_back(0);
        }
        const int doc = next_doc[row]++;
        for (size_t i = 0; i < sample.size(); ++i) {
            rows[row].tokens.push_back(sample.tokens[i]);
            rows[row].doc_ids.push_back(doc);
            rows[row].loss_mask.push_back(sample.loss_mask[i]);
        }
        remaining[row] -= len;
    }

    for (TokenBatch& row : rows) {
        while (static_cast<int>(row.size()) < seq_len) {
            row.tokens.push_back(tok::PAD);
            row.doc_ids.push_back(-1);
            row.loss_mask.push_back(0);
        }
    }
    return rows;
}

std::vector<int64_t> mixture_counts(const std::vector<double>& weights, int64_t total) {
    std::vector<int64_t> counts(weights.size());
    std::vector<double> remainders(weights.size());
    int64_t assigned = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        const double exact = weights[i] * static_cast<double>(total);
        counts[i] = static_cast<int64_t>(std::floor(exact));
        remainders[i] = exact - std::floor(exact);
        assigned += counts[i];
    }
    std::vector<size_t> order(weights.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
        if (remainders[a] != remainders[b]) return remainders[a] > remainders[b];
        return a < b;
    });
    for (size_t i = 0; assigned < total; ++i, ++assigned) {
        counts[order[i % order.size()]]++;
    }
    return counts;
}

std::vector<nlohmann::json> sample_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<nlohmann::json>>& datasets) {
    spec.validate();

    std::vector<double> weights;
    for (const MixtureSource& s : spec.sources) {
        weights.push_back(s.weight);
        auto it = datasets.find(s.dataset);
        if (it == datasets.end()) throw std::runtime_error("unknown dataset '" + s.dataset + "'");
        if (it->second.empty()) {
            throw std::runtime_error("empty source dataset '" + s.dataset + "'");
        }
    }
    const std::vector<int64_t> counts = mixture_counts(weights, spec.total);

    Rng rng(spec.seed);
    std::vector<nlohmann::json> out;
    out.reserve(static_cast<size_t>(spec.total));
    for (size_t i = 0; i < spec.sources.size(); ++i) {
        const auto& rows = datasets.at(spec.sources[i].dataset);
        for (int64_t n = 0; n < counts[i]; ++n) {
            out.push_back(rows[rng.bounded(rows.size())]);
        }
    }
    rng.shuffle(out);
    return out;
}

MultigenReport validate_multigen(const std::vector<ChatSample>& dataset, int min_gens) {
    std::map<std::string, std::set<std::string>> responses;
    for (const ChatSample& s : dataset) {
        std::string prompt, response;
        for (const ChatMessage& m : s.messages) {
            if (m.role == "assistant") {
                response += "\x1e" + m.thinking.value_or("") + "\x1f" + m.content;
            } else {
                if (!prompt.empty()) prompt += "\n";
                prompt += m.content;
            }
        }
        responses[prompt].insert(response);
    }

    MultigenReport report;
    for (const auto& [prompt, gens] : responses) {
        report.counts[prompt] = static_cast<int>(gens.size());
        if (static_cast<int>(gens.size()) < min_gens) report.violations.push_back(prompt);
    }
    return report;
}

std::vector<ChatSample> load_chat_dataset(const std::filesystem::path& path) {
    std::vector<ChatSample> out;
    for (const auto& row : load_jsonl(path)) {
        ChatSample s = ChatSample::from_json(row);
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<CPTSample> load_cpt_dataset(const std::filesystem::path& path) {
    std::vector<CPTSample> out;
    for (const auto& row : load_jsonl(path)) {
        CPTSample s = CPTSample::from_json(row);
        s.validate();
        out.push_back(std::move(s));
    }
    return out;
}

}  // namespace forge15
