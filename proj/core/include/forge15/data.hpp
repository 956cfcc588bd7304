#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "forge15/model.hpp"

namespace forge15 {

struct ChatMessage {
    std::string role;  // system | user | assistant
    std::string content;
    std::optional<std::string> thinking;  // assistant only
};

struct ChatSample {
    std::vector<ChatMessage> messages;
    std::string domain_tag;  // math | code | rag | fc | if | chat | science

    void validate() const;
    static ChatSample from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct CPTSample {
    std::vector<std::string> segments;
    std::string kind;  // reasoning | cot | pretrain

    void validate() const;
    static CPTSample from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct MixtureSource {
    std::string dataset;
    double weight = 0.0;
};

struct MixtureSpec {
    std::vector<MixtureSource> sources;
    int64_t total = 0;
    uint64_t seed = 0;

    void validate() const;
    static MixtureSpec from_json(const nlohmann::json& j);
};

// Segments joined with "\n", byte tokens only, loss on everything.
TokenBatch render_cpt(const CPTSample& sample);

// BOS, then role token + content per message; assistant turns are
// ASST THINK_OPEN thinking THINK_CLOSE content EOS with loss exactly on
// THINK_OPEN..EOS. The think frame is always emitted, even when empty.
TokenBatch render_chat(const ChatSample& sample);

// First-fit packing in input order; rows are padded with PAD (mask 0,
// doc_id -1) and no sample is ever split.
std::vector<TokenBatch> pack_sequences(const std::vector<TokenBatch>& batches, int seq_len);

// Largest-remainder per-source counts, seeded sampling with replacement,
// seeded shuffle of the combined output.
std::vector<nlohmann::json> sample_mixture(
    const MixtureSpec& spec,
    const std::map<std::string, std::vector<nlohmann::json>>& datasets);

std::vector<int64_t> mixture_counts(const std::vector<double>& weights, int64_t total);

struct MultigenReport {
    std::map<std::string, int> counts;       // prompt text -> distinct responses
    std::vector<std::string> violations;     // prompts with fewer than min_gens
};

MultigenReport validate_multigen(const std::vector<ChatSample>& dataset, int min_gens);

std::vector<ChatSample> load_chat_dataset(const std::filesystem::path& path);
std::vector<CPTSample> load_cpt_dataset(const std::filesystem::path& path);

}  // namespace forge15
