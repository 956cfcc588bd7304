#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge15/checkpoint.hpp"
#include "forge15/model.hpp"

namespace forge15 {

struct TrainConfig {
    double base_lr = 5e-5;
    double final_lr = 5e-6;
    double warmup_frac = 0.10;
    int epochs = 1;
    int batch_samples = 8;  // packed rows per optimizer step
    int seq_len = 128;
    double weight_decay = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;  // global-norm ceiling, 0 disables
    uint64_t seed = 0;
    int checkpoint_every = 0;  // extra step-<n>.anmt files, 0 = per-epoch only

    void validate() const;
    static TrainConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

// Linear warmup to base_lr over round(warmup_frac * total_steps) steps,
// then cosine decay to final_lr. The warmup end returns base_lr exactly
// and step == total_steps returns final_lr exactly.
double lr_at(int64_t step, int64_t total_steps, const TrainConfig& config);

// Optimizer master weights: f64 copies of the f32 tensors, written back
// after each step.
using ParamMap = std::map<std::string, std::vector<double>>;

ParamMap to_master(const Checkpoint& ckpt);
void write_back(const ParamMap& params, Checkpoint& ckpt);

struct AdamState {
    int64_t t = 0;
    ParamMap m;
    ParamMap v;
};

// Decoupled AdamW with bias correction. Norm scales and the token
// embedding are never decayed.
void adamw_step(ParamMap& params, const GradMap& grads, AdamState& state, double lr,
                const TrainConfig& config);

// Returns the pre-clip global norm; rescales in place when it exceeds
// max_norm (max_norm <= 0 disables clipping).
double clip_gradients(GradMap& grads, double max_norm);

struct TrainLogEntry {
    int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
};

struct TrainResult {
    Checkpoint model;
    std::vector<TrainLogEntry> log;
};

// One loop for both supervised stages: mode "cpt" renders rows as CPT
// samples, "sft" as chat samples. Renders and packs once, then runs
// `epochs` passes with a seeded row shuffle per epoch. The batch loss is
// the masked-position mean across the batch. Writes epoch-<e>.anmt after
// each epoch, step-<n>.anmt every checkpoint_every steps, final.anmt and
// loss.jsonl into out_dir.
TrainResult train_supervised(const Checkpoint& start, const std::vector<nlohmann::json>& rows,
                             const TrainConfig& config, const std::string& mode,
                             const std::filesystem::path& out_dir);

}  // namespace forge15
