#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge15/checkpoint.hpp"

namespace forge15 {

struct PipelineStage {
    std::string id;
    std::string kind;  // init|upscale|drop|cpt|sft|grpo|merge|avg_checkpoints|eval
    std::vector<std::string> inputs;  // stage ids or checkpoint paths
    nlohmann::json params;
};

struct PipelineConfig {
    uint64_t seed = 0;
    std::vector<PipelineStage> stages;

    static PipelineConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// Deterministic per-stage seed stream, overridden by an explicit seed in the
// stage params.
uint64_t stage_seed(uint64_t pipeline_seed, const std::string& id);

// Static checks: unique ids, known kinds, input arity, dangling references,
// cycles, merge weight sums, and arch mismatches where derivable. Empty
// result means the config is runnable.
std::vector<std::string> validate_pipeline(const PipelineConfig& config);

struct StageRecord {
    std::string id;
    std::string kind;
    std::string path;
    std::string fingerprint;
    std::string config_hash;  // kind + params + effective seed
    std::map<std::string, std::string> inputs;  // input name -> fingerprint
    bool reused = false;      // satisfied by a previous run's artifact
};

struct PipelineManifest {
    uint64_t seed = 0;
    std::vector<StageRecord> stages;  // execution order

    const StageRecord* find(const std::string& id) const;
    nlohmann::ordered_json to_json() const;
    static PipelineManifest from_json(const nlohmann::json& j);
};

// Topological execution into workdir: each stage writes <id>.anmt (eval
// stages write <id>.json) plus manifest.json. Stages whose inputs, params,
// and existing artifact all match the previous manifest are skipped.
PipelineManifest run_pipeline(const PipelineConfig& config,
                              const std::filesystem::path& workdir);

}  // namespace forge15
