#include "forge15/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "forge15/evalkit.hpp"
#include "forge15/grpo.hpp"
#include "forge15/jsonio.hpp"
#include "forge15/merge.hpp"
#include "forge15/model_config.hpp"
#include "forge15/rng.hpp"
#include "forge15/sha256.hpp"
#include "forge15/surgery.hpp"
#include "forge15/trainer.hpp"

namespace forge15 {
namespace {

namespace fs = std::filesystem;

const std::set<std::string> kKinds = {"init", "upscale", "drop",  "cpt",             "sft",
                                      "grpo", "merge",   "eval",  "avg_checkpoints"};

bool path_like(const std::string& s) {
    return s.find('/') != std::string::npos || s.find('.') != std::string::npos;
}

std::string shortest(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

std::string file_sha256_hex(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    const std::string bytes = ss.str();
    return Sha256::hex_digest(bytes.data(), bytes.size());
}

std::string artifact_fingerprint(const std::string& kind, const fs::path& path) {
    if (kind == "eval") return file_sha256_hex(path);
    return fingerprint(load_checkpoint(path));
}

// Static arch propagation; nullopt when not derivable (path inputs, bad
// params). Report-only, so failures here never throw.
void propagate_archs(const PipelineConfig& config, const std::vector<size_t>& order,
                     const std::map<std::string, size_t>& index,
                     std::vector<std::string>& diags) {
    std::map<std::string, std::optional<ModelConfig>> archs;
    for (size_t idx : order) {
        const PipelineStage& s = config.stages[idx];
        std::optional<ModelConfig> arch;
        auto input_arch = [&](size_t i) -> std::optional<ModelConfig> {
            if (i >= s.inputs.size() || !index.count(s.inputs[i])) return std::nullopt;
            const auto it = archs.find(s.inputs[i]);
            return it == archs.end() ? std::nullopt : it->second;
        };
        try {
            if (s.kind == "init") {
                ModelConfig cfg;
                if (s.params.contains("model")) cfg = ModelConfig::from_json(s.params.at("model"));
                cfg.validate();
                arch = cfg;
            } else if (s.kind == "upscale") {
                arch = input_arch(0);
                if (arch) {
                    if (s.params.contains("target_layers"))
                        arch->n_layers = s.params.at("target_layers").get<int>();
                    if (s.params.contains("new_d_ff"))
                        arch->d_ff = s.params.at("new_d_ff").get<int>();
                }
            } else if (s.kind == "drop") {
                arch = input_arch(0);
                if (arch && s.params.contains("layers")) {
                    arch->n_layers -=
                        static_cast<int>(s.params.at("layers").get<std::vector<int>>().size());
                }
            } else if (s.kind == "cpt" || s.kind == "sft" || s.kind == "grpo") {
                arch = input_arch(0);
            } else if (s.kind == "merge" || s.kind == "avg_checkpoints") {
                std::string ref_name;
                for (size_t i = 0; i < s.inputs.size(); ++i) {
                    const auto in = input_arch(i);
                    if (!in) continue;
                    if (!arch) {
                        arch = in;
                        ref_name = s.inputs[i];
                    } else if (!(*in == *arch)) {
                        diags.push_back("stage '" + s.id + "': arch mismatch between inputs '" +
                                        ref_name + "' and '" + s.inputs[i] + "'");
                        break;
                    }
                }
            }
        } catch (const std::exception& e) {
            if (s.kind == "init") {
                diags.push_back("stage '" + s.id + "': bad model config: " + e.what());
            }
            arch.reset();
        }
        archs[s.id] = arch;
    }
}

std::vector<size_t> topo_order(const PipelineConfig& config,
                               const std::map<std::string, size_t>& index) {
    const size_t n = config.stages.size();
    std::vector<int> remaining(n, 0);
    for (size_t i = 0; i < n; ++i) {
        for (const auto& in : config.stages[i].inputs) {
            if (index.count(in)) remaining[i] += 1;
        }
    }
    std::vector<size_t> order;
    std::vector<bool> placed(n, false);
    order.reserve(n);
    while (order.size() < n) {
        bool advanced = false;
        for (size_t i = 0; i < n; ++i) {
            if (placed[i] || remaining[i] != 0) continue;
            placed[i] = true;
            order.push_back(i);
            advanced = true;
            for (size_t j = 0; j < n; ++j) {
                if (placed[j]) continue;
                for (const auto& in : config.stages[j].inputs) {
                    if (in == config.stages[i].id) remaining[j] -= 1;
                }
            }
        }
        if (!advanced) break;  // cycle; validate_pipeline reports it
    }
    return order;
}

uint64_t effective_seed(const PipelineConfig& config, const PipelineStage& s) {
    const nlohmann::json* sub = nullptr;
    if (s.kind == "init") sub = &s.params;
    else if ((s.kind == "cpt" || s.kind == "sft") && s.params.contains("train"))
        sub = &s.params.at("train");
    else if (s.kind == "grpo" && s.params.contains("grpo"))
        sub = &s.params.at("grpo");
    if (sub && sub->contains("seed")) return sub->at("seed").get<uint64_t>();
    return stage_seed(config.seed, s.id);
}

}  // namespace

PipelineConfig PipelineConfig::from_json(const nlohmann::json& j) {
    PipelineConfig c;
    c.seed = j.value("seed", uint64_t{0});
    for (const auto& sj : j.at("stages")) {
        PipelineStage s;
        s.id = sj.at("id").get<std::string>();
        s.kind = sj.at("kind").get<std::string>();
        if (sj.contains("inputs")) s.inputs = sj.at("inputs").get<std::vector<std::string>>();
        s.params = sj.value("params", nlohmann::json::object());
        c.stages.push_back(std::move(s));
    }
    return c;
}

nlohmann::ordered_json PipelineConfig::to_json() const {
    nlohmann::ordered_json out;
    out["seed"] = seed;
    out["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : stages) {
        out["stages"].push_back(
            {{"id", s.id}, {"kind", s.kind}, {"inputs", s.inputs}, {"params", s.params}});
    }
    return out;
}

PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
    return PipelineConfig::from_json(load_json_file(path));
}

uint64_t stage_seed(uint64_t pipeline_seed, const std::string& id) {
    const std::string hex = Sha256::hex_digest(id.data(), id.size());
    const uint64_t h = std::stoull(hex.substr(0, 16), nullptr, 16);
    return derive_seed(pipeline_seed, 0x50495045, h);  // "PIPE"
}

std::vector<std::string> validate_pipeline(const PipelineConfig& config) {
    std::vector<std::string> diags;
    if (config.stages.empty()) {
        diags.push_back("pipeline has no stages");
        return diags;
    }

    std::map<std::string, size_t> index;
    for (size_t i = 0; i < config.stages.size(); ++i) {
        const auto& s = config.stages[i];
        if (s.id.empty()) {
            diags.push_back("stage " + std::to_string(i) + " has an empty id");
        } else if (index.count(s.id)) {
            diags.push_back("duplicate stage id '" + s.id + "'");
        } else {
            index[s.id] = i;
        }
    }

    for (const auto& s : config.stages) {
        if (!kKinds.count(s.kind)) {
            diags.push_back("stage '" + s.id + "': unknown kind '" + s.kind + "'");
            continue;
        }
        if (s.kind == "init") {
            if (!s.inputs.empty()) diags.push_back("stage '" + s.id + "': init takes no inputs");
        } else if (s.kind == "merge" || s.kind == "avg_checkpoints") {
            if (s.inputs.size() < 2) {
                diags.push_back("stage '" + s.id + "': " + s.kind +
                                " needs at least two inputs");
            }
        } else if (s.inputs.size() != 1) {
            diags.push_back("stage '" + s.id + "': needs exactly one input");
        }

        for (const auto& in : s.inputs) {
            if (index.count(in)) {
                if (config.stages[index.at(in)].kind == "eval") {
                    diags.push_back("stage '" + s.id + "': input '" + in +
                                    "' is an eval stage, not a checkpoint");
                }
            } else if (!path_like(in)) {
                diags.push_back("stage '" + s.id + "': unknown input '" + in + "'");
            }
        }

        if (s.kind == "merge") {
            if (!s.params.contains("weights") || !s.params.at("weights").is_array()) {
                diags.push_back("stage '" + s.id + "': merge needs a weights array");
            } else {
                const auto weights = s.params.at("weights").get<std::vector<double>>();
                if (weights.size() != s.inputs.size()) {
                    diags.push_back("stage '" + s.id + "': " + std::to_string(weights.size()) +
                                    " weights for " + std::to_string(s.inputs.size()) +
                                    " inputs");
                } else {
                    double sum = 0.0;
                    bool positive = true;
                    for (double w : weights) {
                        sum += w;
                        positive = positive && w > 0.0;
                    }
                    if (!positive) {
                        diags.push_back("stage '" + s.id + "': weights must be positive");
                    } else if (std::abs(sum - 1.0) > 1e-9) {
                        diags.push_back("stage '" + s.id + "': weights sum " + shortest(sum) +
                                        " ≠ 1");
                    }
                }
            }
        }
    }

    // Cycles over stage-id edges; one report for the first cycle found.
    std::map<std::string, int> color;  // 0 white, 1 gray, 2 black
    std::vector<std::string> stack;
    std::string cycle;
    std::function<bool(const std::string&)> dfs = [&](const std::string& id) -> bool {
        color[id] = 1;
        stack.push_back(id);
        for (const auto& in : config.stages[index.at(id)].inputs) {
            if (!index.count(in)) continue;
            if (color[in] == 1) {
                const auto it = std::find(stack.begin(), stack.end(), in);
                cycle = "cycle: ";
                for (auto p = it; p != stack.end(); ++p) {
                    if (p != it) cycle += ",";
                    cycle += *p;
                }
                return true;
            }
            if (color[in] == 0 && dfs(in)) return true;
        }
        stack.pop_back();
        color[id] = 2;
        return false;
    };
    for (const auto& [id, idx] : index) {
        (void)idx;
        if (color[id] == 0 && dfs(id)) break;
    }
    // Report in config order for determinism.
    if (!cycle.empty()) diags.push_back(cycle);

    if (diags.empty()) {
        propagate_archs(config, topo_order(config, index), index, diags);
    }
    return diags;
}

const StageRecord* PipelineManifest::find(const std::string& id) const {
    for (const auto& r : stages) {
        if (r.id == id) return &r;
    }
    return nullptr;
}

nlohmann::ordered_json PipelineManifest::to_json() const {
    nlohmann::ordered_json out;
    out["seed"] = seed;
    out["stages"] = nlohmann::ordered_json::array();
    for (const auto& r : stages) {
        nlohmann::ordered_json inputs = nlohmann::ordered_json::object();
        for (const auto& [name, fp] : r.inputs) inputs[name] = fp;
        out["stages"].push_back({{"id", r.id},
                                 {"kind", r.kind},
                                 {"path", r.path},
                                 {"fingerprint", r.fingerprint},
                                 {"config_hash", r.config_hash},
                                 {"inputs", inputs},
                                 {"reused", r.reused}});
    }
    return out;
}

PipelineManifest PipelineManifest::from_json(const nlohmann::json& j) {
    PipelineManifest m;
    m.seed = j.value("seed", uint64_t{0});
    for (const auto& rj : j.at("stages")) {
        StageRecord r;
        r.id = rj.at("id").get<std::string>();
        r.kind = rj.at("kind").get<std::string>();
        r.path = rj.at("path").get<std::string>();
        r.fingerprint = rj.at("fingerprint").get<std::string>();
        r.config_hash = rj.value("config_hash", "");
        if (rj.contains("inputs")) {
            for (const auto& [name, fp] : rj.at("inputs").items()) {
                r.inputs[name] = fp.get<std::string>();
            }
        }
        r.reused = rj.value("reused", false);
        m.stages.push_back(std::move(r));
    }
    return m;
}

PipelineManifest run_pipeline(const PipelineConfig& config,
                              const std::filesystem::path& workdir) {
    const auto diags = validate_pipeline(config);
    if (!diags.empty()) {
        std::string msg = "invalid pipeline: " + diags[0];
        for (size_t i = 1; i < diags.size(); ++i) msg += "; " + diags[i];
        throw std::invalid_argument(msg);
    }
    fs::create_directories(workdir);

    std::map<std::string, StageRecord> previous;
    const fs::path manifest_path = workdir / "manifest.json";
    if (fs::exists(manifest_path)) {
        try {
            for (const auto& r : PipelineManifest::from_json(load_json_file(manifest_path)).stages)
                previous[r.id] = r;
        } catch (const std::exception&) {
            previous.clear();  // stale or foreign manifest: rebuild everything
        }
    }

    std::map<std::string, size_t> index;
    for (size_t i = 0; i < config.stages.size(); ++i) index[config.stages[i].id] = i;
    const std::vector<size_t> order = topo_order(config, index);

    PipelineManifest manifest;
    manifest.seed = config.seed;
    manifest.stages.reserve(order.size());
    std::map<std::string, const StageRecord*> done;

    auto load_input = [&](const std::string& name) -> Checkpoint {
        const auto it = done.find(name);
        return load_checkpoint(it != done.end() ? fs::path(it->second->path) : fs::path(name));
    };

    for (size_t idx : order) {
        const PipelineStage& s = config.stages[idx];
        StageRecord rec;
        rec.id = s.id;
        rec.kind = s.kind;
        const fs::path out = workdir / (s.id + (s.kind == "eval" ? ".json" : ".anmt"));
        rec.path = out.string();

        for (const auto& in : s.inputs) {
            const auto it = done.find(in);
            if (it != done.end()) {
                rec.inputs[in] = it->second->fingerprint;
            } else {
                try {
                    rec.inputs[in] = fingerprint(load_checkpoint(in));
                } catch (const std::exception& e) {
                    throw std::runtime_error("stage '" + s.id + "': input '" + in + "': " +
                                             e.what());
                }
            }
        }

        const uint64_t seed = effective_seed(config, s);
        const std::string hash_src = s.kind + "\n" + s.params.dump() + "\n" + std::to_string(seed);
        rec.config_hash = Sha256::hex_digest(hash_src.data(), hash_src.size());

        bool reused = false;
        const auto prev = previous.find(s.id);
        if (prev != previous.end() && prev->second.kind == s.kind &&
            prev->second.config_hash == rec.config_hash && prev->second.inputs == rec.inputs &&
            fs::exists(out)) {
            try {
                const std::string fp = artifact_fingerprint(s.kind, out);
                if (fp == prev->second.fingerprint) {
                    rec.fingerprint = fp;
                    rec.reused = true;
                    reused = true;
                }
            } catch (const std::exception&) {
                reused = false;  // unreadable artifact: re-execute
            }
        }

        if (!reused) {
            try {
                if (s.kind == "init") {
                    ModelConfig cfg;
                    if (s.params.contains("model")) cfg = ModelConfig::from_json(s.params.at("model"));
                    cfg.validate();
                    save_checkpoint(init_checkpoint(cfg, seed), out);
                } else if (s.kind == "upscale") {
                    Checkpoint ckpt = load_input(s.inputs[0]);
                    bool acted = false;
                    if (s.params.contains("target_layers")) {
                        const DepthStrategy strategy =
                            depth_strategy_from_string(s.params.value("strategy", "duplicate"));
                        std::optional<LayerSpan> span;
                        if (s.params.contains("span")) {
                            span = LayerSpan{s.params.at("span").at("first").get<int>(),
                                             s.params.at("span").at("last").get<int>()};
                        }
                        ckpt = depth_upscale(ckpt, s.params.at("target_layers").get<int>(),
                                             strategy, span);
                        acted = true;
                    }
                    if (s.params.contains("new_d_ff")) {
                        ckpt = width_upscale(
                            ckpt, s.params.at("new_d_ff").get<int>(),
                            width_init_from_string(s.params.value("init", "zero_preserving")));
                        acted = true;
                    }
                    if (!acted) {
                        throw std::invalid_argument("upscale needs target_layers or new_d_ff");
                    }
                    save_checkpoint(ckpt, out);
                } else if (s.kind == "drop") {
                    save_checkpoint(drop_layers(load_input(s.inputs[0]),
                                                s.params.at("layers").get<std::vector<int>>()),
                                    out);
                } else if (s.kind == "cpt" || s.kind == "sft") {
                    const auto rows = load_jsonl(s.params.at("data").get<std::string>());
                    TrainConfig tc;
                    if (s.params.contains("train")) tc = TrainConfig::from_json(s.params.at("train"));
                    if (!(s.params.contains("train") && s.params.at("train").contains("seed"))) {
                        tc.seed = seed;
                    }
                    const TrainResult r = train_supervised(load_input(s.inputs[0]), rows, tc,
                                                           s.kind, workdir / (s.id + ".train"));
                    save_checkpoint(r.model, out);
                } else if (s.kind == "grpo") {
                    const auto tasks = load_reward_tasks(s.params.at("tasks").get<std::string>());
                    GRPOConfig gc;
                    if (s.params.contains("grpo")) gc = GRPOConfig::from_json(s.params.at("grpo"));
                    if (!(s.params.contains("grpo") && s.params.at("grpo").contains("seed"))) {
                        gc.seed = seed;
                    }
                    const GRPOResult r = train_grpo(load_input(s.inputs[0]), tasks, gc,
                                                    workdir / (s.id + ".train"));
                    save_checkpoint(r.model, out);
                } else if (s.kind == "merge" || s.kind == "avg_checkpoints") {
                    std::vector<Checkpoint> parts;
                    parts.reserve(s.inputs.size());
                    for (const auto& in : s.inputs) parts.push_back(load_input(in));
                    std::vector<double> weights;
                    if (s.kind == "merge") {
                        weights = s.params.at("weights").get<std::vector<double>>();
                    } else {
                        weights.assign(parts.size(), 1.0 / static_cast<double>(parts.size()));
                    }
                    save_checkpoint(linear_merge(parts, weights), out);
                } else if (s.kind == "eval") {
                    const auto suite_path = s.params.at("suite").get<std::string>();
                    const auto tasks = load_reward_tasks(suite_path);
                    EvalConfig ec;
                    if (s.params.contains("eval")) ec = EvalConfig::from_json(s.params.at("eval"));
                    if (!(s.params.contains("eval") && s.params.at("eval").contains("seeds"))) {
                        ec.seeds = {seed};
                    }
                    const EvalResult r = pass_at_1(load_input(s.inputs[0]), tasks, ec);
                    const nlohmann::ordered_json report = {
                        {"model", s.inputs[0]},
                        {"suite", s.params.value("name", suite_path)},
                        {"pass_at_1", r.pass_at_1},
                        {"mean_thinking_tokens", r.mean_thinking_tokens},
                        {"n", tasks.size() * ec.seeds.size()}};
                    save_json_file(out, report);
                }
                rec.fingerprint = artifact_fingerprint(s.kind, out);
            } catch (const std::exception& e) {
                throw std::runtime_error("stage '" + s.id + "': " + e.what());
            }
        }

        manifest.stages.push_back(std::move(rec));
        done[s.id] = &manifest.stages.back();
    }

    save_json_file(manifest_path, manifest.to_json());
    return manifest;
}

}  // namespace forge15
