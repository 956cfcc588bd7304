#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace forge15 {

// Decoder-only transformer hyperparameters: pre-norm RMSNorm blocks, rotary
// multi-head attention, gated (SiLU) MLP, untied output head.
struct ModelConfig {
    int n_layers = 2;
    int d_model = 32;
    int n_heads = 4;
    int d_ff = 64;
    int vocab_size = 264;
    int max_seq_len = 512;
    float rope_theta = 10000.0f;
    float norm_eps = 1e-5f;

    int head_dim() const { return d_model / n_heads; }

    void validate() const;

    bool operator==(const ModelConfig&) const = default;

    nlohmann::ordered_json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

ModelConfig load_model_config(const std::filesystem::path& path);

// Per-layer weight count: q/k/v/o projections, two norm scales, gated MLP.
int64_t per_layer_param_count(const ModelConfig& cfg);
int64_t total_param_count(const ModelConfig& cfg);

// The exact tensor set a checkpoint for `cfg` must carry, sorted by name.
std::vector<std::pair<std::string, std::vector<int64_t>>> expected_tensors(const ModelConfig& cfg);

std::string layer_prefix(int layer);

}  // namespace forge15
