#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "forge15/checkpoint.hpp"
#include "forge15/model.hpp"
#include "forge15/rewards.hpp"
#include "forge15/trainer.hpp"

namespace forge15 {

struct GRPOConfig {
    int group_size = 8;
    double temperature = 1.0;
    double top_p = 0.95;
    int max_new = 256;
    double lr = 1e-4;
    double kl_beta = 0.001;
    double clip_eps = 0.2;
    int batch_prompts = 16;
    int steps = 0;
    uint64_t seed = 0;
    double weight_decay = 0.0;  // RL stage default: no decay
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    int checkpoint_every = 0;
    FormatSpec format;

    void validate() const;
    static GRPOConfig from_json(const nlohmann::json& j);
    nlohmann::ordered_json to_json() const;
};

struct RolloutGroup {
    RewardTask task;
    std::vector<int> prompt;  // rendered prompt tokens, shared by the group
    std::vector<std::vector<int>> completions;
    std::vector<double> rewards;
    std::vector<std::vector<double>> logp_old;  // from the sampling pass
    std::vector<std::vector<double>> logp_ref;  // under the frozen reference
};

// Prompt rendering for rollouts: BOS USER <bytes> ASST, the model takes
// over from the assistant token.
std::vector<int> render_task_prompt(const std::string& prompt);

// A_i = (r_i - mean) / (std_pop + 1e-8); all zeros when every reward is
// equal.
std::vector<double> group_advantages(const std::vector<double>& rewards, int group_size);

// k3 estimator exp(d) - d - 1 with d = logp_ref - logp; >= 0, and 0 iff
// the two logprobs agree.
double kl_per_token(double logp, double logp_ref);

struct GRPOStats {
    double loss = 0.0;
    double mean_reward = 0.0;
    double mean_kl = 0.0;
    double clip_fraction = 0.0;
    double mean_length = 0.0;
};

// Clipped-ratio policy loss with per-completion length normalization
// plus kl_beta times the token-mean k3 KL. Fills `grads` (pre-zeroed or
// empty) and `stats` when given; returns the loss.
double grpo_loss(const Checkpoint& params, const std::vector<RolloutGroup>& groups,
                 const GRPOConfig& config, GradMap* grads, GRPOStats* stats);

// One AdamW update (constant lr) from the grpo_loss gradient.
GRPOStats grpo_step(Checkpoint& model, ParamMap& master, AdamState& state,
                    const std::vector<RolloutGroup>& groups, const GRPOConfig& config);

// G seeded samples per task; rewards via composite_reward on the decoded
// response; logp_ref under ref_params. Deterministic in (seed, step).
std::vector<RolloutGroup> rollout(const Checkpoint& params, const Checkpoint& ref_params,
                                  const std::vector<RewardTask>& tasks, const GRPOConfig& config,
                                  int64_t step);

struct CurationEntry {
    std::string prompt;
    int correct = 0;
    int incorrect = 0;
    bool kept = false;
};

struct CurationReport {
    std::vector<CurationEntry> entries;
    std::vector<RewardTask> kept;
};

// The curation rule: at least one fully correct sample and at least three
// fully incorrect ones.
bool curation_keep(int correct, int incorrect);

// Tallies group_size samples per prompt and applies curation_keep.
CurationReport curate_math_prompts(const Checkpoint& params, const std::vector<RewardTask>& tasks,
                                   const GRPOConfig& config);

struct GRPOLogEntry {
    int64_t step = 0;
    GRPOStats stats;
};

struct GRPOResult {
    Checkpoint model;
    std::vector<GRPOLogEntry> log;
};

// rollout -> grpo_step for config.steps rounds, batch_prompts tasks per
// round in a deterministic rotation. The reference policy is frozen at
// entry. Writes step-<n>.anmt every checkpoint_every steps, final.anmt
// and metrics.jsonl into out_dir.
GRPOResult train_grpo(const Checkpoint& start, const std::vector<RewardTask>& tasks,
                      const GRPOConfig& config, const std::filesystem::path& out_dir);

}  // namespace forge15
