#include "forge15/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "forge15/jsonio.hpp"
#include "forge15/rng.hpp"
#include "forge15/tokenizer.hpp"

namespace forge15 {
namespace {

constexpr uint64_t kCurationStream = 0x43555241;  // "CURA"

void stamp_meta(Checkpoint& ckpt, const GRPOConfig& config, const std::string& parent,
                int64_t step) {
    ckpt.meta.clear();
    ckpt.meta["stage"] = "grpo";
    ckpt.meta["parent"] = parent;
    ckpt.meta["seed"] = std::to_string(config.seed);
    ckpt.meta["step"] = std::to_string(step);
}

// Per-token loss coefficients dL/dlogp for one completion, split out so the
// value pass and the gradient pass cannot drift apart.
struct TokenTerms {
    double objective = 0.0;  // sum over tokens of min(rho A, clip(rho) A)
    double kl_sum = 0.0;
    int clipped = 0;
    std::vector<double> dobj_dlp;  // policy part only, per token
    std::vector<double> dkl_dlp;
};

TokenTerms completion_terms(const std::vector<double>& logp_new,
                            const std::vector<double>& logp_old,
                            const std::vector<double>& logp_ref, double advantage,
                            double clip_eps) {
    TokenTerms out;
    out.dobj_dlp.resize(logp_new.size());
    out.dkl_dlp.resize(logp_new.size());
    for (size_t t = 0; t < logp_new.size(); ++t) {
        const double rho = std::exp(logp_new[t] - logp_old[t]);
        const double unclipped = rho * advantage;
        const double clipped =
            std::clamp(rho, 1.0 - clip_eps, 1.0 + clip_eps) * advantage;
        out.objective += std::min(unclipped, clipped);
        out.dobj_dlp[t] = unclipped <= clipped ? unclipped : 0.0;
        if (std::abs(rho - 1.0) > clip_eps) out.clipped += 1;

        out.kl_sum += kl_per_token(logp_new[t], logp_ref[t]);
        out.dkl_dlp[t] = 1.0 - std::exp(logp_ref[t] - logp_new[t]);
    }
    return out;
}

}  // namespace

void GRPOConfig::validate() const {
    if (group_size < 2) throw std::invalid_argument("group_size must be at least 2");
    if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
    if (max_new <= 0) throw std::invalid_argument("max_new must be positive");
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (!(kl_beta >= 0.0)) throw std::invalid_argument("kl_beta must be non-negative");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) {
        throw std::invalid_argument("clip_eps must be in (0, 1)");
    }
    if (batch_prompts <= 0) throw std::invalid_argument("batch_prompts must be positive");
    if (steps < 0) throw std::invalid_argument("steps must be non-negative");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw std::invalid_argument("adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be non-negative");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
    format.validate();
}

GRPOConfig GRPOConfig::from_json(const nlohmann::json& j) {
    GRPOConfig c;
    c.group_size = j.value("group_size", c.group_size);
    c.temperature = j.value("temperature", c.temperature);
    c.top_p = j.value("top_p", c.top_p);
    c.max_new = j.value("max_new", c.max_new);
    c.lr = j.value("lr", c.lr);
    c.kl_beta = j.value("kl_beta", c.kl_beta);
    c.clip_eps = j.value("clip_eps", c.clip_eps);
    c.batch_prompts = j.value("batch_prompts", c.batch_prompts);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    if (j.contains("format")) c.format = FormatSpec::from_json(j.at("format"));
    c.validate();
    return c;
}

nlohmann::ordered_json GRPOConfig::to_json() const {
    return {{"group_size", group_size},
            {"temperature", temperature},
            {"top_p", top_p},
            {"max_new", max_new},
            {"lr", lr},
            {"kl_beta", kl_beta},
            {"clip_eps", clip_eps},
            {"batch_prompts", batch_prompts},
            {"steps", steps},
            {"seed", seed},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"grad_clip", grad_clip},
            {"checkpoint_every", checkpoint_every},
            {"format", {{"open_tag", format.open_tag}, {"close_tag", format.close_tag}}}};
}

std::vector<int> render_task_prompt(const std::string& prompt) {
    std::vector<int> out;
    out.reserve(prompt.size() + 3);
    out.push_back(tok::BOS);
    out.push_back(tok::USER);
    for (int t : encode_bytes(prompt)) out.push_back(t);
    out.push_back(tok::ASST);
    return out;
}

std::vector<double> group_advantages(const std::vector<double>& rewards, int group_size) {
    if (group_size < 2) throw std::invalid_argument("group_size must be at least 2");
    if (rewards.empty() || rewards.size() % static_cast<size_t>(group_size) != 0) {
        throw std::invalid_argument("rewards size " + std::to_string(rewards.size()) +
                                    " is not a multiple of group size " +
                                    std::to_string(group_size));
    }
    std::vector<double> out(rewards.size());
    for (size_t base = 0; base < rewards.size(); base += group_size) {
        bool all_equal = true;
        double mean = 0.0;
        for (int i = 0; i < group_size; ++i) {
            mean += rewards[base + i];
            if (rewards[base + i] != rewards[base]) all_equal = false;
        }
        if (all_equal) {
            for (int i = 0; i < group_size; ++i) out[base + i] = 0.0;
            continue;
        }
        mean /= group_size;
        double var = 0.0;
        for (int i = 0; i < group_size; ++i) {
            const double d = rewards[base + i] - mean;
            var += d * d;
        }
        const double std_pop = std::sqrt(var / group_size);
        for (int i = 0; i < group_size; ++i) {
            out[base + i] = (rewards[base + i] - mean) / (std_pop + 1e-8);
        }
    }
    return out;
}

double kl_per_token(double logp, double logp_ref) {
    if (!std::isfinite(logp) || !std::isfinite(logp_ref)) {
        throw std::runtime_error("non-finite logprob in KL estimator");
    }
    const double d = logp_ref - logp;
    const double k = std::exp(d) - d - 1.0;
    if (!std::isfinite(k)) throw std::runtime_error("non-finite KL estimate");
    return k;
}

double grpo_loss(const Checkpoint& params, const std::vector<RolloutGroup>& groups,
                 const GRPOConfig& config, GradMap* grads, GRPOStats* stats) {
    config.validate();
    if (groups.empty()) throw std::invalid_argument("empty groups");

    const size_t G = static_cast<size_t>(config.group_size);
    size_t n_scored = 0;          // completions with at least one token
    size_t total_tokens = 0;
    size_t total_completions = 0;
    double reward_sum = 0.0;
    for (const auto& grp : groups) {
        if (grp.completions.size() != G || grp.rewards.size() != G ||
            grp.logp_old.size() != G || grp.logp_ref.size() != G) {
            throw std::invalid_argument("group arrays must each have group_size entries");
        }
        for (size_t g = 0; g < G; ++g) {
            if (grp.logp_old[g].size() != grp.completions[g].size() ||
                grp.logp_ref[g].size() != grp.completions[g].size()) {
                throw std::invalid_argument("completion/logprob length mismatch");
            }
            total_tokens += grp.completions[g].size();
            if (!grp.completions[g].empty()) n_scored += 1;
        }
        total_completions += G;
        for (double r : grp.rewards) reward_sum += r;
    }

    const int V = params.arch.vocab_size;
    double objective_sum = 0.0;  // sum over completions of (1/|o|) sum_t obj_t
    double kl_sum = 0.0;
    size_t clipped_tokens = 0;

    for (const auto& grp : groups) {
        const std::vector<double> adv = group_advantages(grp.rewards, config.group_size);
        for (size_t g = 0; g < G; ++g) {
            const auto& completion = grp.completions[g];
            if (completion.empty()) continue;
            const size_t P = grp.prompt.size();
            const size_t Tc = completion.size();

            TokenBatch batch;
            batch.tokens = grp.prompt;
            batch.tokens.insert(batch.tokens.end(), completion.begin(), completion.end());
            batch.doc_ids.assign(batch.tokens.size(), 0);
            batch.loss_mask.assign(P, 0);
            batch.loss_mask.resize(batch.tokens.size(), 1);

            ForwardTrace trace;
            const std::vector<double> logits =
                forward(params, batch, grads ? &trace : nullptr);

            // Same arithmetic as sequence_logprobs so on-policy terms cancel
            // exactly against rollout-time reference logprobs.
            std::vector<double> logp_new(Tc);
            std::vector<double> row_mx(Tc), row_denom(Tc);
            for (size_t t = 0; t < Tc; ++t) {
                const double* row = logits.data() + (P + t - 1) * static_cast<size_t>(V);
                double mx = row[0];
                for (int vv = 1; vv < V; ++vv) mx = std::max(mx, row[vv]);
                double denom = 0.0;
                for (int vv = 0; vv < V; ++vv) denom += std::exp(row[vv] - mx);
                row_mx[t] = mx;
                row_denom[t] = denom;
                logp_new[t] = row[completion[t]] - mx - std::log(denom);
            }

            const TokenTerms terms = completion_terms(logp_new, grp.logp_old[g],
                                                      grp.logp_ref[g], adv[g],
                                                      config.clip_eps);
            objective_sum += terms.objective / static_cast<double>(Tc);
            kl_sum += terms.kl_sum;
            clipped_tokens += static_cast<size_t>(terms.clipped);

            if (grads) {
                std::vector<double> dlogits(logits.size(), 0.0);
                for (size_t t = 0; t < Tc; ++t) {
                    const double coeff =
                        -terms.dobj_dlp[t] /
                            (static_cast<double>(n_scored) * static_cast<double>(Tc)) +
                        config.kl_beta * terms.dkl_dlp[t] /
                            static_cast<double>(total_tokens);
                    const double* row = logits.data() + (P + t - 1) * static_cast<size_t>(V);
                    double* drow = dlogits.data() + (P + t - 1) * static_cast<size_t>(V);
                    for (int vv = 0; vv < V; ++vv) {
                        const double softmax = std::exp(row[vv] - row_mx[t]) / row_denom[t];
                        drow[vv] = coeff * ((vv == completion[t] ? 1.0 : 0.0) - softmax);
                    }
                }
                backward(params, batch, trace, dlogits, *grads);
            }
        }
    }

    const double policy_term =
        n_scored > 0 ? -objective_sum / static_cast<double>(n_scored) : 0.0;
    const double mean_kl =
        total_tokens > 0 ? kl_sum / static_cast<double>(total_tokens) : 0.0;
    const double loss = policy_term + config.kl_beta * mean_kl;

    if (stats) {
        stats->loss = loss;
        stats->mean_reward = reward_sum / static_cast<double>(total_completions);
        stats->mean_kl = mean_kl;
        stats->clip_fraction =
            total_tokens > 0
                ? static_cast<double>(clipped_tokens) / static_cast<double>(total_tokens)
                : 0.0;
        stats->mean_length =
            static_cast<double>(total_tokens) / static_cast<double>(total_completions);
    }
    return loss;
}

GRPOStats grpo_step(Checkpoint& model, ParamMap& master, AdamState& state,
                    const std::vector<RolloutGroup>& groups, const GRPOConfig& config) {
    GradMap grads = zero_grads(model.arch);
    GRPOStats stats;
    grpo_loss(model, groups, config, &grads, &stats);
    clip_gradients(grads, config.grad_clip);

    TrainConfig opt;
    opt.weight_decay = config.weight_decay;
    opt.adam_beta1 = config.adam_beta1;
    opt.adam_beta2 = config.adam_beta2;
    opt.adam_eps = config.adam_eps;
    adamw_step(master, grads, state, config.lr, opt);
    write_back(master, model);
    return stats;
}

std::vector<RolloutGroup> rollout(const Checkpoint& params, const Checkpoint& ref_params,
                                  const std::vector<RewardTask>& tasks, const GRPOConfig& config,
                                  int64_t step) {
    config.validate();
    if (tasks.empty()) throw std::invalid_argument("empty task set");

    std::vector<RolloutGroup> out;
    out.reserve(tasks.size());
    for (size_t i = 0; i < tasks.size(); ++i) {
        RolloutGroup grp;
        grp.task = tasks[i];
        grp.prompt = render_task_prompt(tasks[i].prompt);
        for (int g = 0; g < config.group_size; ++g) {
            const uint64_t seed = derive_seed(config.seed, static_cast<uint64_t>(step),
                                              static_cast<uint64_t>(i),
                                              static_cast<uint64_t>(g));
            SampleResult sr = sample(params, grp.prompt, config.temperature, config.top_p,
                                     config.max_new, seed);

            std::vector<int> full = grp.prompt;
            full.insert(full.end(), sr.tokens.begin(), sr.tokens.end());
            std::vector<double> ref_lp;
            if (!sr.tokens.empty()) {
                ref_lp = sequence_logprobs(ref_params, full,
                                           static_cast<int>(grp.prompt.size()));
            }

            const std::string text = decode_for_scoring(
                sr.tokens, config.format.open_tag, config.format.close_tag);
            grp.rewards.push_back(composite_reward(text, tasks[i], config.format));
            grp.completions.push_back(std::move(sr.tokens));
            grp.logp_old.push_back(std::move(sr.logprobs));
            grp.logp_ref.push_back(std::move(ref_lp));
        }
        out.push_back(std::move(grp));
    }
    return out;
}

bool curation_keep(int correct, int incorrect) {
    return correct >= 1 && incorrect >= 3;
}

CurationReport curate_math_prompts(const Checkpoint& params, const std::vector<RewardTask>& tasks,
                                   const GRPOConfig& config) {
    config.validate();
    CurationReport report;
    for (size_t i = 0; i < tasks.size(); ++i) {
        if (tasks[i].kind != "math") {
            throw std::invalid_argument("curation requires math tasks");
        }
        const std::vector<int> prompt = render_task_prompt(tasks[i].prompt);
        CurationEntry entry;
        entry.prompt = tasks[i].prompt;
        for (int g = 0; g < config.group_size; ++g) {
            const uint64_t seed = derive_seed(config.seed, kCurationStream,
                                              static_cast<uint64_t>(i),
                                              static_cast<uint64_t>(g));
            const SampleResult sr = sample(params, prompt, config.temperature, config.top_p,
                                           config.max_new, seed);
            const std::string text = decode_for_scoring(
                sr.tokens, config.format.open_tag, config.format.close_tag);
            const double r = composite_reward(text, tasks[i], config.format);
            if (r == 1.0) entry.correct += 1;
            if (r == 0.0) entry.incorrect += 1;
        }
        entry.kept = curation_keep(entry.correct, entry.incorrect);
        if (entry.kept) report.kept.push_back(tasks[i]);
        report.entries.push_back(std::move(entry));
    }
    return report;
}

GRPOResult train_grpo(const Checkpoint& start, const std::vector<RewardTask>& tasks,
                      const GRPOConfig& config, const std::filesystem::path& out_dir) {
    config.validate();
    if (config.steps > 0 && tasks.empty()) throw std::invalid_argument("empty task set");
    std::filesystem::create_directories(out_dir);

    GRPOResult result;
    result.model = start;
    const Checkpoint ref = start;
    const std::string parent = fingerprint(start);
    ParamMap master = to_master(result.model);
    AdamState state;
    std::vector<nlohmann::json> rows;

    for (int s = 0; s < config.steps; ++s) {
        std::vector<RewardTask> batch;
        batch.reserve(config.batch_prompts);
        for (int k = 0; k < config.batch_prompts; ++k) {
            const size_t idx = static_cast<size_t>(
                (static_cast<int64_t>(s) * config.batch_prompts + k) %
                static_cast<int64_t>(tasks.size()));
            batch.push_back(tasks[idx]);
        }
        const std::vector<RolloutGroup> groups = rollout(result.model, ref, batch, config, s);
        const GRPOStats stats = grpo_step(result.model, master, state, groups, config);

        const int64_t step = s + 1;
        result.log.push_back({step, stats});
        rows.push_back({{"step", step},
                        {"loss", stats.loss},
                        {"mean_reward", stats.mean_reward},
                        {"mean_kl", stats.mean_kl},
                        {"clip_fraction", stats.clip_fraction},
                        {"mean_length", stats.mean_length},
                        {"lr", config.lr}});
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
            Checkpoint snap = result.model;
            stamp_meta(snap, config, parent, step);
            save_checkpoint(snap, out_dir / ("step-" + std::to_string(step) + ".anmt"));
        }
    }

    stamp_meta(result.model, config, parent, config.steps);
    save_checkpoint(result.model, out_dir / "final.anmt");
    save_jsonl(out_dir / "metrics.jsonl", rows);
    return result;
}

}  // namespace forge15
