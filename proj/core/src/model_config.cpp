#include "forge15/model_config.hpp"

#include <algorithm>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "forge15/jsonio.hpp"

namespace forge15 {

void ModelConfig::validate() const {
    if (n_layers < 1) throw std::runtime_error("model config: n_layers must be >= 1");
    if (d_model < 1 || n_heads < 1 || d_ff < 1 || vocab_size < 1 || max_seq_len < 1) {
        throw std::runtime_error("model config: all dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::runtime_error("model config: d_model must be a multiple of n_heads");
    }
    if (rope_theta <= 0.0f) throw std::runtime_error("model config: rope_theta must be positive");
    if (norm_eps <= 0.0f) throw std::runtime_error("model config: norm_eps must be positive");
}

nlohmann::ordered_json ModelConfig::to_json() const {
    // Keys emitted alphabetically so serialized headers are canonical.
    nlohmann::ordered_json j;
    j["d_ff"] = d_ff;
    j["d_model"] = d_model;
    j["max_seq_len"] = max_seq_len;
    j["n_heads"] = n_heads;
    j["n_layers"] = n_layers;
    j["norm_eps"] = norm_eps;
    j["rope_theta"] = rope_theta;
    j["vocab_size"] = vocab_size;
    return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.d_ff = j.at("d_ff").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.max_seq_len = j.at("max_seq_len").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.norm_eps = j.at("norm_eps").get<float>();
    cfg.rope_theta = j.at("rope_theta").get<float>();
    cfg.vocab_size = j.at("vocab_size").get<int>();
    cfg.validate();
    return cfg;
}

ModelConfig load_model_config(const std::filesystem::path& path) {
    return ModelConfig::from_json(load_json_file(path));
}

int64_t per_layer_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t f = cfg.d_ff;
    return 4 * d * d + 3 * d * f + 2 * d;
}

int64_t total_param_count(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t v = cfg.vocab_size;
    return 2 * v * d + d + cfg.n_layers * per_layer_param_count(cfg);
}

std::string layer_prefix(int layer) {
    return "layers." + std::to_string(layer) + ".";
}

std::vector<std::pair<std::string, std::vector<int64_t>>> expected_tensors(const ModelConfig& cfg) {
    const int64_t d = cfg.d_model;
    const int64_t f = cfg.d_ff;
    const int64_t v = cfg.vocab_size;

    std::vector<std::pair<std::string, std::vector<int64_t>>> out;
    out.reserve(static_cast<size_t>(3 + 9 * cfg.n_layers));
    out.emplace_back("embed.tok", std::vector<int64_t>{v, d});
    out.emplace_back("final_norm.scale", std::vector<int64_t>{d});
    out.emplace_back("head.out", std::vector<int64_t>{d, v});
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        out.emplace_back(p + "attn.q", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.k", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.v", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn.o", std::vector<int64_t>{d, d});
        out.emplace_back(p + "attn_norm.scale", std::vector<int64_t>{d});
        out.emplace_back(p + "mlp.gate", std::vector<int64_t>{f, d});
        out.emplace_back(p + "mlp.up", std::vector<int64_t>{f, d});
        out.emplace_back(p + "mlp.down", std::vector<int64_t>{d, f});
        out.emplace_back(p + "mlp_norm.scale", std::vector<int64_t>{d});
    }
    std::sort(out.begin(), out.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    return out;
}

}  // namespace forge15
