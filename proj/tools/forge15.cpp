// forge15: checkpoint surgery, merging, training, and evaluation for a
// miniature decoder-only transformer. Exit codes: 0 ok, 1 validation error
// (bad flags, malformed inputs, failed config checks), 2 runtime failure.

#include <cstdint>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "forge15/checkpoint.hpp"
#include "forge15/evalkit.hpp"
#include "forge15/grpo.hpp"
#include "forge15/jsonio.hpp"
#include "forge15/merge.hpp"
#include "forge15/model_config.hpp"
#include "forge15/pipeline.hpp"
#include "forge15/rewards.hpp"
#include "forge15/surgery.hpp"
#include "forge15/trainer.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

// Thrown once inputs have been validated; anything else that escapes a
// handler is treated as a validation problem.
struct RuntimeFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

int run_guarded(const std::function<void()>& body) {
    try {
        body();
        return kExitOk;
    } catch (const RuntimeFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    }
}

// Wraps the execution phase of a handler so I/O and numeric failures map to
// exit code 2 instead of 1.
template <typename F>
void execution_phase(F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        throw RuntimeFailure(e.what());
    }
}

std::string stem_of(const std::string& path) {
    return std::filesystem::path(path).stem().string();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale reasoning-model pipeline"};
    app.require_subcommand(1);
    int exit_code = kExitOk;

    // init: fresh random checkpoint, the root of every pipeline graph.
    {
        auto* cmd = app.add_subcommand("init", "create a randomly initialized checkpoint");
        auto out = std::make_shared<std::string>();
        auto config_path = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        cmd->add_option("--out", *out, "output .anmt path")->required();
        cmd->add_option("--config", *config_path, "model config JSON (optional)");
        cmd->add_option("--seed", *seed, "rng seed");
        cmd->callback([&exit_code, out, config_path, seed] {
            exit_code = run_guarded([&] {
                forge15::ModelConfig cfg;
                if (!config_path->empty()) cfg = forge15::load_model_config(*config_path);
                cfg.validate();
                execution_phase([&] {
                    forge15::Checkpoint ckpt = forge15::init_checkpoint(cfg, *seed);
                    forge15::save_checkpoint(ckpt, *out);
                    std::cout << forge15::fingerprint(ckpt) << "\n";
                });
            });
        });
    }

    // upscale: depth and/or MLP-width growth.
    {
        auto* cmd = app.add_subcommand("upscale", "grow the layer stack and/or MLP width");
        auto in = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto target_layers = std::make_shared<int>(0);
        auto strategy = std::make_shared<std::string>("duplicate");
        auto span = std::make_shared<std::vector<int>>();
        auto new_d_ff = std::make_shared<int>(0);
        auto width_init = std::make_shared<std::string>("zero_preserving");
        cmd->add_option("--in", *in, "input .anmt path")->required();
        cmd->add_option("--out", *out, "output .anmt path")->required();
        cmd->add_option("--target-layers", *target_layers, "depth after upscaling");
        cmd->add_option("--strategy", *strategy,
                        "duplicate|average|maxpool|average_alternate");
        cmd->add_option("--span", *span, "insert span as first,last")->delimiter(',');
        cmd->add_option("--new-d-ff", *new_d_ff, "MLP width after upscaling");
        cmd->add_option("--init", *width_init, "zero_preserving|duplicate_halved");
        cmd->callback([&exit_code, in, out, target_layers, strategy, span, new_d_ff,
                       width_init] {
            exit_code = run_guarded([&] {
                if (*target_layers == 0 && *new_d_ff == 0) {
                    throw std::invalid_argument("need --target-layers and/or --new-d-ff");
                }
                if (!span->empty() && span->size() != 2) {
                    throw std::invalid_argument("--span needs exactly first,last");
                }
                forge15::Checkpoint ckpt = forge15::load_checkpoint(*in);
                if (*target_layers != 0) {
                    std::optional<forge15::LayerSpan> insert_span;
                    if (!span->empty()) insert_span = forge15::LayerSpan{(*span)[0], (*span)[1]};
                    ckpt = forge15::depth_upscale(
                        ckpt, *target_layers, forge15::depth_strategy_from_string(*strategy),
                        insert_span);
                }
                if (*new_d_ff != 0) {
                    ckpt = forge15::width_upscale(ckpt, *new_d_ff,
                                                  forge15::width_init_from_string(*width_init));
                }
                execution_phase([&] {
                    forge15::save_checkpoint(ckpt, *out);
                    std::cout << forge15::fingerprint(ckpt) << "\n";
                });
            });
        });
    }

    // drop: remove layers and reindex.
    {
        auto* cmd = app.add_subcommand("drop", "remove layers from a checkpoint");
        auto in = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto layers = std::make_shared<std::vector<int>>();
        cmd->add_option("--in", *in, "input .anmt path")->required();
        cmd->add_option("--out", *out, "output .anmt path")->required();
        cmd->add_option("--layers", *layers, "layer indices to drop, comma separated")
            ->required()
            ->delimiter(',');
        cmd->callback([&exit_code, in, out, layers] {
            exit_code = run_guarded([&] {
                const forge15::Checkpoint ckpt =
                    forge15::drop_layers(forge15::load_checkpoint(*in), *layers);
                execution_phase([&] {
                    forge15::save_checkpoint(ckpt, *out);
                    std::cout << forge15::fingerprint(ckpt) << "\n";
                });
            });
        });
    }

    // merge: weighted checkpoint combination.
    {
        auto* cmd = app.add_subcommand("merge", "weighted merge of checkpoints");
        auto ins = std::make_shared<std::vector<std::string>>();
        auto weights = std::make_shared<std::vector<double>>();
        auto out = std::make_shared<std::string>();
        cmd->add_option("--in", *ins, "input .anmt paths")->required();
        cmd->add_option("--weights", *weights, "positive weights summing to 1")
            ->required()
            ->delimiter(',');
        cmd->add_option("--out", *out, "output .anmt path")->required();
        cmd->callback([&exit_code, ins, weights, out] {
            exit_code = run_guarded([&] {
                if (ins->size() < 2) {
                    throw std::invalid_argument("merge needs at least two --in checkpoints");
                }
                std::vector<forge15::Checkpoint> parts;
                parts.reserve(ins->size());
                for (const auto& path : *ins) parts.push_back(forge15::load_checkpoint(path));
                const forge15::Checkpoint merged = forge15::linear_merge(parts, *weights);
                execution_phase([&] {
                    forge15::save_checkpoint(merged, *out);
                    std::cout << forge15::fingerprint(merged) << "\n";
                });
            });
        });
    }

    // avg: equal-weight merge of equally spaced step checkpoints.
    {
        auto* cmd = app.add_subcommand("avg", "average equally spaced step checkpoints");
        auto dir = std::make_shared<std::string>();
        auto k = std::make_shared<int>(0);
        auto out = std::make_shared<std::string>();
        cmd->add_option("--dir", *dir, "directory of step-<n>.anmt files")->required();
        cmd->add_option("--k", *k, "number of checkpoints to average")->required();
        cmd->add_option("--out", *out, "output .anmt path")->required();
        cmd->callback([&exit_code, dir, k, out] {
            exit_code = run_guarded([&] {
                const forge15::Checkpoint avg = forge15::average_equally_spaced(*dir, *k);
                execution_phase([&] {
                    forge15::save_checkpoint(avg, *out);
                    std::cout << forge15::fingerprint(avg) << "\n";
                });
            });
        });
    }

    // train-cpt / train-sft share one supervised loop.
    for (const auto& [name, mode] :
         {std::pair<const char*, const char*>{"train-cpt", "cpt"}, {"train-sft", "sft"}}) {
        auto* cmd = app.add_subcommand(
            name, std::string("supervised training in ") + mode + " mode");
        auto in = std::make_shared<std::string>();
        auto data = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto train_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        cmd->add_option("--in", *in, "starting .anmt path")->required();
        cmd->add_option("--data", *data, "training rows (jsonl)")->required();
        cmd->add_option("--out-dir", *out_dir, "artifact directory")->required();
        cmd->add_option("--train", *train_path, "train config JSON (optional)");
        cmd->add_option("--out", *out, "also save the final model here");
        CLI::Option* seed_opt = cmd->add_option("--seed", *seed, "override config seed");
        const std::string mode_str = mode;
        cmd->callback([&exit_code, in, data, out_dir, train_path, out, seed, seed_opt,
                       mode_str] {
            exit_code = run_guarded([&] {
                const forge15::Checkpoint start = forge15::load_checkpoint(*in);
                const auto rows = forge15::load_jsonl(*data);
                forge15::TrainConfig config;
                if (!train_path->empty()) {
                    config = forge15::TrainConfig::from_json(forge15::load_json_file(*train_path));
                }
                if (seed_opt->count() > 0) config.seed = *seed;
                config.validate();
                execution_phase([&] {
                    const forge15::TrainResult result =
                        forge15::train_supervised(start, rows, config, mode_str, *out_dir);
                    if (!out->empty()) forge15::save_checkpoint(result.model, *out);
                    std::cout << forge15::fingerprint(result.model) << "\n";
                });
            });
        });
    }

    // train-grpo: RL with verifiable rewards against a frozen reference.
    {
        auto* cmd = app.add_subcommand("train-grpo", "GRPO training on reward tasks");
        auto in = std::make_shared<std::string>();
        auto tasks_path = std::make_shared<std::string>();
        auto out_dir = std::make_shared<std::string>();
        auto grpo_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        auto steps = std::make_shared<int>(0);
        cmd->add_option("--in", *in, "starting .anmt path")->required();
        cmd->add_option("--tasks", *tasks_path, "reward tasks (jsonl)")->required();
        cmd->add_option("--out-dir", *out_dir, "artifact directory")->required();
        cmd->add_option("--grpo", *grpo_path, "GRPO config JSON (optional)");
        cmd->add_option("--out", *out, "also save the final model here");
        CLI::Option* seed_opt = cmd->add_option("--seed", *seed, "override config seed");
        CLI::Option* steps_opt = cmd->add_option("--steps", *steps, "override config steps");
        cmd->callback([&exit_code, in, tasks_path, out_dir, grpo_path, out, seed, seed_opt,
                       steps, steps_opt] {
            exit_code = run_guarded([&] {
                const forge15::Checkpoint start = forge15::load_checkpoint(*in);
                const auto tasks = forge15::load_reward_tasks(*tasks_path);
                forge15::GRPOConfig config;
                if (!grpo_path->empty()) {
                    config = forge15::GRPOConfig::from_json(forge15::load_json_file(*grpo_path));
                }
                if (seed_opt->count() > 0) config.seed = *seed;
                if (steps_opt->count() > 0) config.steps = *steps;
                config.validate();
                execution_phase([&] {
                    const forge15::GRPOResult result =
                        forge15::train_grpo(start, tasks, config, *out_dir);
                    if (!out->empty()) forge15::save_checkpoint(result.model, *out);
                    std::cout << forge15::fingerprint(result.model) << "\n";
                });
            });
        });
    }

    // curate-math: difficulty filter over sampled solutions.
    {
        auto* cmd = app.add_subcommand("curate-math",
                                       "keep prompts with mixed solve outcomes");
        auto in = std::make_shared<std::string>();
        auto tasks_path = std::make_shared<std::string>();
        auto out = std::make_shared<std::string>();
        auto grpo_path = std::make_shared<std::string>();
        auto report_path = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        cmd->add_option("--in", *in, "sampling .anmt path")->required();
        cmd->add_option("--tasks", *tasks_path, "math tasks (jsonl)")->required();
        cmd->add_option("--out", *out, "kept tasks (jsonl)")->required();
        cmd->add_option("--grpo", *grpo_path, "GRPO config JSON for sampling settings");
        cmd->add_option("--report", *report_path, "per-prompt tally JSON");
        CLI::Option* seed_opt = cmd->add_option("--seed", *seed, "override config seed");
        cmd->callback([&exit_code, in, tasks_path, out, grpo_path, report_path, seed,
                       seed_opt] {
            exit_code = run_guarded([&] {
                const forge15::Checkpoint params = forge15::load_checkpoint(*in);
                const auto tasks = forge15::load_reward_tasks(*tasks_path);
                forge15::GRPOConfig config;
                if (!grpo_path->empty()) {
                    config = forge15::GRPOConfig::from_json(forge15::load_json_file(*grpo_path));
                }
                if (seed_opt->count() > 0) config.seed = *seed;
                config.validate();
                execution_phase([&] {
                    const forge15::CurationReport report =
                        forge15::curate_math_prompts(params, tasks, config);
                    std::vector<nlohmann::json> rows;
                    rows.reserve(report.kept.size());
                    for (const auto& task : report.kept) rows.push_back(task.to_json());
                    forge15::save_jsonl(*out, rows);
                    if (!report_path->empty()) {
                        nlohmann::ordered_json j;
                        j["total"] = report.entries.size();
                        j["kept"] = report.kept.size();
                        j["entries"] = nlohmann::ordered_json::array();
                        for (const auto& e : report.entries) {
                            j["entries"].push_back({{"prompt", e.prompt},
                                                    {"correct", e.correct},
                                                    {"incorrect", e.incorrect},
                                                    {"kept", e.kept}});
                        }
                        forge15::save_json_file(*report_path, j);
                    }
                    std::cout << "kept " << report.kept.size() << " of "
                              << report.entries.size() << " prompts\n";
                });
            });
        });
    }

    // eval: pass@1 suites, or rendering a recorded token report.
    {
        auto* cmd = app.add_subcommand("eval", "evaluate checkpoints on task suites");
        auto ckpts = std::make_shared<std::vector<std::string>>();
        auto suites = std::make_shared<std::vector<std::string>>();
        auto config_path = std::make_shared<std::string>();
        auto temp = std::make_shared<double>(0.6);
        auto top_p = std::make_shared<double>(0.95);
        auto max_new = std::make_shared<int>(256);
        auto seeds = std::make_shared<std::vector<uint64_t>>();
        auto json_path = std::make_shared<std::string>();
        auto token_report = std::make_shared<std::string>();
        cmd->add_option("--ckpt", *ckpts, "checkpoint .anmt paths");
        cmd->add_option("--suite", *suites, "task suite jsonl paths");
        cmd->add_option("--config", *config_path, "eval config JSON (optional)");
        CLI::Option* temp_opt = cmd->add_option("--temp", *temp, "sampling temperature");
        CLI::Option* top_p_opt = cmd->add_option("--top-p", *top_p, "nucleus mass");
        CLI::Option* max_new_opt = cmd->add_option("--max-new", *max_new, "generation cap");
        cmd->add_option("--seeds", *seeds, "sampling seeds, comma separated")->delimiter(',');
        cmd->add_option("--json", *json_path, "write the report JSON here");
        cmd->add_option("--token-report", *token_report,
                        "render a recorded thinking-token report and exit");
        cmd->callback([&exit_code, ckpts, suites, config_path, temp, temp_opt, top_p,
                       top_p_opt, max_new, max_new_opt, seeds, json_path, token_report] {
            exit_code = run_guarded([&] {
                if (!token_report->empty()) {
                    const forge15::TokenReport report =
                        forge15::TokenReport::from_json(forge15::load_json_file(*token_report));
                    std::cout << forge15::render_token_report(report);
                    return;
                }
                if (ckpts->empty() || suites->empty()) {
                    throw std::invalid_argument(
                        "eval needs --ckpt and --suite (or --token-report)");
                }
                forge15::EvalConfig config;
                if (!config_path->empty()) {
                    config = forge15::EvalConfig::from_json(forge15::load_json_file(*config_path));
                }
                if (temp_opt->count() > 0) config.temperature = *temp;
                if (top_p_opt->count() > 0) config.top_p = *top_p;
                if (max_new_opt->count() > 0) config.max_new = *max_new;
                if (!seeds->empty()) config.seeds = *seeds;
                config.validate();
                std::vector<forge15::NamedModel> models;
                for (const auto& path : *ckpts) {
                    models.push_back({stem_of(path), forge15::load_checkpoint(path)});
                }
                std::vector<forge15::NamedSuite> named_suites;
                for (const auto& path : *suites) {
                    named_suites.push_back({stem_of(path), forge15::load_reward_tasks(path)});
                }
                execution_phase([&] {
                    const forge15::EvalReport report =
                        forge15::run_suite(models, named_suites, config);
                    std::cout << report.table();
                    if (!json_path->empty()) {
                        forge15::save_json_file(*json_path, report.to_json());
                    }
                });
            });
        });
    }

    // pipeline: validate or execute a declarative stage DAG.
    {
        auto* pipe = app.add_subcommand("pipeline", "declarative multi-stage DAG");
        pipe->require_subcommand(1);

        auto* vcmd = pipe->add_subcommand("validate", "static checks only");
        auto vconfig = std::make_shared<std::string>();
        vcmd->add_option("--config", *vconfig, "pipeline config JSON")->required();
        vcmd->callback([&exit_code, vconfig] {
            exit_code = run_guarded([&] {
                const forge15::PipelineConfig config = forge15::load_pipeline_config(*vconfig);
                const auto diags = forge15::validate_pipeline(config);
                for (const auto& d : diags) std::cerr << d << "\n";
                if (!diags.empty()) {
                    throw std::invalid_argument("pipeline config failed validation");
                }
                std::cout << "ok\n";
            });
        });

        auto* rcmd = pipe->add_subcommand("run", "execute stages into a workdir");
        auto rconfig = std::make_shared<std::string>();
        auto workdir = std::make_shared<std::string>();
        auto seed = std::make_shared<uint64_t>(0);
        rcmd->add_option("--config", *rconfig, "pipeline config JSON")->required();
        rcmd->add_option("--workdir", *workdir, "artifact directory")->required();
        CLI::Option* seed_opt = rcmd->add_option("--seed", *seed, "override config seed");
        rcmd->callback([&exit_code, rconfig, workdir, seed, seed_opt] {
            exit_code = run_guarded([&] {
                forge15::PipelineConfig config = forge15::load_pipeline_config(*rconfig);
                if (seed_opt->count() > 0) config.seed = *seed;
                const auto diags = forge15::validate_pipeline(config);
                for (const auto& d : diags) std::cerr << d << "\n";
                if (!diags.empty()) {
                    throw std::invalid_argument("pipeline config failed validation");
                }
                execution_phase([&] {
                    const forge15::PipelineManifest manifest =
                        forge15::run_pipeline(config, *workdir);
                    for (const auto& r : manifest.stages) {
                        std::cout << r.id << " " << r.kind << " " << r.fingerprint
                                  << (r.reused ? " (reused)" : "") << "\n";
                    }
                });
            });
        });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int cli_code = app.exit(e);
        return cli_code == 0 ? kExitOk : kExitValidation;
    }
    return exit_code;
}
