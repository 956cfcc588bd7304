#include <algorithm>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "forge15/jsonio.hpp"
#include "forge15/merge.hpp"
#include "forge15/pipeline.hpp"
#include "forge15/rewards.hpp"
#include "forge15/tokenizer.hpp"

using namespace forge15;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_model_json() {
    return {{"n_layers", 3},    {"d_model", 16},         {"n_heads", 2},
            {"d_ff", 24},       {"vocab_size", tok::VOCAB}, {"max_seq_len", 64},
            {"rope_theta", 10000.0}, {"norm_eps", 1e-5}};
}

PipelineStage stage(const std::string& id, const std::string& kind,
                    std::vector<std::string> inputs = {}, json params = json::object()) {
    return PipelineStage{id, kind, std::move(inputs), std::move(params)};
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

template <typename F>
std::string error_message(F&& f) {
    try {
        f();
    } catch (const std::exception& e) {
        return e.what();
    }
    return "";
}

bool has_diag(const std::vector<std::string>& diags, const std::string& want) {
    return std::find(diags.begin(), diags.end(), want) != diags.end();
}

// Shared data files for run tests, written once.
struct DataFiles {
    fs::path sft_bal, sft_math, cpt, tasks;
};

const DataFiles& data_files() {
    static const DataFiles files = [] {
        const fs::path dir = fresh_dir("forge15_pipeline_data");
        fs::create_directories(dir);
        DataFiles f;
        f.sft_bal = dir / "sft_bal.jsonl";
        f.sft_math = dir / "sft_math.jsonl";
        f.cpt = dir / "cpt.jsonl";
        f.tasks = dir / "tasks.jsonl";
        const json chat = {{"messages",
                            {{{"role", "user"}, {"content", "hi"}},
                             {{"role", "assistant"}, {"content", "hello"}, {"thinking", "greet"}}}},
                           {"domain_tag", "chat"}};
        const json math = {{"messages",
                            {{{"role", "user"}, {"content", "1+1"}},
                             {{"role", "assistant"}, {"content", "2"}, {"thinking", "add"}}}},
                           {"domain_tag", "math"}};
        save_jsonl(f.sft_bal, {chat, math});
        save_jsonl(f.sft_math, {math, math});
        save_jsonl(f.cpt, {{{"segments", {"two plus two is four"}}, {"kind", "pretrain"}},
                           {{"segments", {"numbers count things"}}, {"kind", "cot"}}});
        RewardTask t1, t2;
        t1.kind = t2.kind = "math";
        t1.prompt = "1+1";
        t1.answer = "2";
        t2.prompt = "2+3";
        t2.answer = "5";
        save_jsonl(f.tasks, {t1.to_json(), t2.to_json()});
        return f;
    }();
    return files;
}

// Miniature fig3-shaped graph: init, upscale, cpt, two SFT branches, merge,
// GRPO branches, weighted final merge, eval report.
PipelineConfig fig3_like_config() {
    const DataFiles& f = data_files();
    const json train = {{"epochs", 1}, {"batch_samples", 2}, {"seq_len", 32},
                        {"base_lr", 1e-3}, {"final_lr", 1e-4}};
    const json grpo = {{"steps", 1}, {"group_size", 2}, {"batch_prompts", 2},
                       {"max_new", 6}, {"lr", 1e-4}};
    PipelineConfig c;
    c.seed = 7;
    c.stages = {
        stage("base", "init", {}, {{"model", tiny_model_json()}}),
        stage("up", "upscale", {"base"}, {{"target_layers", 4}, {"strategy", "duplicate"}}),
        stage("cpt", "cpt", {"up"}, {{"data", f.cpt.string()}, {"train", train}}),
        stage("A", "sft", {"cpt"}, {{"data", f.sft_bal.string()}, {"train", train}}),
        stage("B", "sft", {"cpt"}, {{"data", f.sft_math.string()}, {"train", train}}),
        stage("C", "merge", {"A", "B"}, {{"weights", {0.5, 0.5}}}),
        stage("D", "grpo", {"A"}, {{"tasks", f.tasks.string()}, {"grpo", grpo}}),
        stage("E", "merge", {"C", "D"}, {{"weights", {0.5, 0.5}}}),
        stage("F", "grpo", {"E"}, {{"tasks", f.tasks.string()}, {"grpo", grpo}}),
        stage("G", "grpo", {"F"}, {{"tasks", f.tasks.string()}, {"grpo", grpo}}),
        stage("final", "merge", {"E", "F", "G"}, {{"weights", {0.3, 0.3, 0.4}}}),
        stage("report", "eval", {"final"},
              {{"suite", f.tasks.string()},
               {"eval", {{"max_new", 8}, {"seeds", {1, 2}}}}}),
    };
    return c;
}

}  // namespace

TEST_CASE("pipeline validation diagnostics") {
    PipelineConfig empty;
    CHECK(validate_pipeline(empty) == std::vector<std::string>{"pipeline has no stages"});

    PipelineConfig dup;
    dup.stages = {stage("a", "init"), stage("a", "init")};
    CHECK(has_diag(validate_pipeline(dup), "duplicate stage id 'a'"));

    PipelineConfig bad_kind;
    bad_kind.stages = {stage("a", "blend")};
    CHECK(has_diag(validate_pipeline(bad_kind), "stage 'a': unknown kind 'blend'"));

    PipelineConfig dangling;
    dangling.stages = {stage("a", "init"), stage("b", "sft", {"missing"})};
    CHECK(has_diag(validate_pipeline(dangling), "stage 'b': unknown input 'missing'"));

    PipelineConfig init_in;
    init_in.stages = {stage("a", "init", {"a"})};
    CHECK(has_diag(validate_pipeline(init_in), "stage 'a': init takes no inputs"));

    PipelineConfig arity;
    arity.stages = {stage("a", "init"), stage("b", "init"), stage("c", "cpt", {"a", "b"}),
                    stage("m", "merge", {"a"}, {{"weights", {1.0}}})};
    const auto arity_diags = validate_pipeline(arity);
    CHECK(has_diag(arity_diags, "stage 'c': needs exactly one input"));
    CHECK(has_diag(arity_diags, "stage 'm': merge needs at least two inputs"));

    PipelineConfig weights;
    weights.stages = {stage("a", "init"), stage("b", "init"),
                      stage("m", "merge", {"a", "b"}, {{"weights", {0.3, 0.3, 0.4}}})};
    CHECK(has_diag(validate_pipeline(weights), "stage 'm': 3 weights for 2 inputs"));

    weights.stages[2].params["weights"] = {0.6, 0.3};
    CHECK(has_diag(validate_pipeline(weights), "stage 'm': weights sum 0.9 ≠ 1"));

    weights.stages[2].params["weights"] = {1.5, -0.5};
    CHECK(has_diag(validate_pipeline(weights), "stage 'm': weights must be positive"));

    weights.stages[2].params.erase("weights");
    CHECK(has_diag(validate_pipeline(weights), "stage 'm': merge needs a weights array"));

    PipelineConfig cyc;
    cyc.stages = {stage("A", "sft", {"B"}), stage("B", "sft", {"A"})};
    CHECK(has_diag(validate_pipeline(cyc), "cycle: A,B"));

    PipelineConfig eval_in;
    eval_in.stages = {stage("a", "init"), stage("e", "eval", {"a"}),
                      stage("c", "cpt", {"e"})};
    CHECK(has_diag(validate_pipeline(eval_in),
                   "stage 'c': input 'e' is an eval stage, not a checkpoint"));

    // Path-like inputs are deferred to run time, not flagged.
    PipelineConfig path_in;
    path_in.stages = {stage("c", "cpt", {"models/base.anmt"})};
    CHECK(validate_pipeline(path_in).empty());

    CHECK(validate_pipeline(fig3_like_config()).empty());
}

TEST_CASE("pipeline arch propagation") {
    json small = tiny_model_json();
    json wide = tiny_model_json();
    wide["d_model"] = 32;
    wide["n_heads"] = 4;

    PipelineConfig mismatch;
    mismatch.stages = {stage("a", "init", {}, {{"model", small}}),
                       stage("b", "init", {}, {{"model", wide}}),
                       stage("m", "merge", {"a", "b"}, {{"weights", {0.5, 0.5}}})};
    CHECK(has_diag(validate_pipeline(mismatch),
                   "stage 'm': arch mismatch between inputs 'a' and 'b'"));

    // Upscale changes the derived arch, so merging with its own source trips.
    PipelineConfig grown;
    grown.stages = {stage("a", "init", {}, {{"model", small}}),
                    stage("u", "upscale", {"a"}, {{"target_layers", 4}}),
                    stage("m", "merge", {"u", "a"}, {{"weights", {0.5, 0.5}}})};
    CHECK(has_diag(validate_pipeline(grown),
                   "stage 'm': arch mismatch between inputs 'u' and 'a'"));

    // Drop restores the layer count, so the same merge is clean again.
    PipelineConfig restored;
    restored.stages = {stage("a", "init", {}, {{"model", small}}),
                       stage("u", "upscale", {"a"}, {{"target_layers", 4}}),
                       stage("d", "drop", {"u"}, {{"layers", {2}}}),
                       stage("m", "merge", {"d", "a"}, {{"weights", {0.5, 0.5}}})};
    CHECK(validate_pipeline(restored).empty());

    json bad = tiny_model_json();
    bad["d_model"] = 10;  // not divisible by n_heads
    bad["n_heads"] = 3;
    PipelineConfig bad_model;
    bad_model.stages = {stage("a", "init", {}, {{"model", bad}})};
    const auto diags = validate_pipeline(bad_model);
    REQUIRE(diags.size() == 1);
    CHECK(diags[0].rfind("stage 'a': bad model config: ", 0) == 0);
}

TEST_CASE("pipeline stage seeds") {
    CHECK(stage_seed(7, "A") == stage_seed(7, "A"));
    CHECK(stage_seed(7, "A") != stage_seed(7, "B"));
    CHECK(stage_seed(7, "A") != stage_seed(8, "A"));
}

TEST_CASE("pipeline config json round trip") {
    const PipelineConfig c = fig3_like_config();
    const PipelineConfig back = PipelineConfig::from_json(c.to_json());
    REQUIRE(back.stages.size() == c.stages.size());
    CHECK(back.seed == c.seed);
    for (size_t i = 0; i < c.stages.size(); ++i) {
        CHECK(back.stages[i].id == c.stages[i].id);
        CHECK(back.stages[i].kind == c.stages[i].kind);
        CHECK(back.stages[i].inputs == c.stages[i].inputs);
        CHECK(back.stages[i].params == c.stages[i].params);
    }
}

TEST_CASE("pipeline run, merge equality, and determinism") {
    const PipelineConfig config = fig3_like_config();
    const fs::path work = fresh_dir("forge15_pipeline_run");
    const PipelineManifest manifest = run_pipeline(config, work);

    REQUIRE(manifest.stages.size() == config.stages.size());
    CHECK(fs::exists(work / "manifest.json"));
    std::map<std::string, size_t> position;
    for (size_t i = 0; i < manifest.stages.size(); ++i) {
        const StageRecord& r = manifest.stages[i];
        position[r.id] = i;
        CHECK(fs::exists(r.path));
        CHECK(!r.fingerprint.empty());
        CHECK(!r.reused);
    }
    for (const auto& s : config.stages) {
        for (const auto& in : s.inputs) CHECK(position.at(in) < position.at(s.id));
    }

    // Merge stages equal the same merge done by hand on their inputs.
    const Checkpoint a = load_checkpoint(manifest.find("A")->path);
    const Checkpoint b = load_checkpoint(manifest.find("B")->path);
    CHECK(manifest.find("C")->fingerprint == fingerprint(linear_merge({a, b}, {0.5, 0.5})));
    const Checkpoint e = load_checkpoint(manifest.find("E")->path);
    const Checkpoint f = load_checkpoint(manifest.find("F")->path);
    const Checkpoint g = load_checkpoint(manifest.find("G")->path);
    CHECK(manifest.find("final")->fingerprint ==
          fingerprint(linear_merge({e, f, g}, {0.3, 0.3, 0.4})));

    // Input fingerprints recorded against the producing stage.
    CHECK(manifest.find("C")->inputs.at("A") == manifest.find("A")->fingerprint);
    CHECK(manifest.find("C")->inputs.at("B") == manifest.find("B")->fingerprint);

    const json report = load_json_file(manifest.find("report")->path);
    CHECK(report.at("model") == "final");
    CHECK(report.at("n") == 4);  // two tasks, two seeds
    CHECK(report.at("pass_at_1").is_number());
    CHECK(report.at("mean_thinking_tokens").is_number());

    // Manifest file round-trips.
    const PipelineManifest read = PipelineManifest::from_json(load_json_file(work / "manifest.json"));
    REQUIRE(read.stages.size() == manifest.stages.size());
    for (size_t i = 0; i < read.stages.size(); ++i) {
        CHECK(read.stages[i].id == manifest.stages[i].id);
        CHECK(read.stages[i].fingerprint == manifest.stages[i].fingerprint);
        CHECK(read.stages[i].config_hash == manifest.stages[i].config_hash);
        CHECK(read.stages[i].inputs == manifest.stages[i].inputs);
    }

    // A second run in a fresh workdir reproduces every fingerprint.
    const PipelineManifest again = run_pipeline(config, fresh_dir("forge15_pipeline_run2"));
    REQUIRE(again.stages.size() == manifest.stages.size());
    for (size_t i = 0; i < again.stages.size(); ++i) {
        CHECK(again.stages[i].id == manifest.stages[i].id);
        CHECK(again.stages[i].fingerprint == manifest.stages[i].fingerprint);
    }

    SUBCASE("resume skips satisfied stages") {
        const PipelineManifest resumed = run_pipeline(config, work);
        for (const auto& r : resumed.stages) {
            CHECK(r.reused);
            CHECK(r.fingerprint == manifest.find(r.id)->fingerprint);
        }

        // Deleting one artifact re-executes just that stage; downstream
        // stages see unchanged input fingerprints and stay reused.
        fs::remove(work / "C.anmt");
        const PipelineManifest patched = run_pipeline(config, work);
        for (const auto& r : patched.stages) {
            CHECK(r.reused == (r.id != "C"));
            CHECK(r.fingerprint == manifest.find(r.id)->fingerprint);
        }

        // Changing a stage's params invalidates it and everything downstream.
        PipelineConfig edited = config;
        for (auto& s : edited.stages) {
            if (s.id == "B") s.params["train"]["base_lr"] = 2e-3;
        }
        const PipelineManifest rebuilt = run_pipeline(edited, work);
        const std::set<std::string> fresh = {"B", "C", "E", "F", "G", "final", "report"};
        for (const auto& r : rebuilt.stages) {
            CHECK(r.reused == !fresh.count(r.id));
        }
        CHECK(rebuilt.find("B")->fingerprint != manifest.find("B")->fingerprint);
        CHECK(rebuilt.find("A")->fingerprint == manifest.find("A")->fingerprint);
    }
}

TEST_CASE("pipeline run failures") {
    PipelineConfig invalid;
    invalid.stages = {stage("a", "sft", {"missing"})};
    CHECK(error_message([&] { run_pipeline(invalid, fresh_dir("forge15_pipeline_bad")); }) ==
          "invalid pipeline: stage 'a': unknown input 'missing'");

    PipelineConfig bad_data;
    bad_data.stages = {stage("a", "init", {}, {{"model", tiny_model_json()}}),
                       stage("c", "cpt", {"a"}, {{"data", "/nonexistent.jsonl"}})};
    const std::string msg =
        error_message([&] { run_pipeline(bad_data, fresh_dir("forge15_pipeline_bad2")); });
    CHECK(msg.rfind("stage 'c': ", 0) == 0);

    PipelineConfig no_op;
    no_op.stages = {stage("a", "init", {}, {{"model", tiny_model_json()}}),
                    stage("u", "upscale", {"a"})};
    CHECK(error_message([&] { run_pipeline(no_op, fresh_dir("forge15_pipeline_bad3")); }) ==
          "stage 'u': upscale needs target_layers or new_d_ff");

    PipelineConfig path_missing;
    path_missing.stages = {stage("c", "cpt", {"models/absent.anmt"},
                                 {{"data", data_files().cpt.string()}})};
    const std::string missing_msg = error_message(
        [&] { run_pipeline(path_missing, fresh_dir("forge15_pipeline_bad4")); });
    CHECK(missing_msg.rfind("stage 'c': input 'models/absent.anmt':", 0) == 0);
}
