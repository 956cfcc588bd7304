#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "doctest.h"
#include "forge15/checkpoint.hpp"
#include "forge15/jsonio.hpp"
#include "forge15/trainer.hpp"

using namespace forge15;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.vocab_size = 264;
    cfg.max_seq_len = 64;
    return cfg;
}

std::vector<nlohmann::json> cpt_rows(const std::vector<std::string>& texts) {
    std::vector<nlohmann::json> rows;
    for (const std::string& t : texts) {
        rows.push_back({{"kind", "pretrain"}, {"segments", {t}}});
    }
    return rows;
}

bool same_tensors(const Checkpoint& a, const Checkpoint& b) {
    for (const auto& [name, tensor] : a.tensors) {
        if (b.tensors.at(name).data != tensor.data) return false;
    }
    return true;
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

}  // namespace

TEST_CASE("lr schedule hits its boundaries exactly") {
    TrainConfig cfg;
    cfg.base_lr = 5e-5;
    cfg.final_lr = 5e-6;
    cfg.warmup_frac = 0.10;

    // total 20 -> 2 warmup steps
    CHECK(lr_at(0, 20, cfg) == 5e-5 * 1 / 2.0);
    CHECK(lr_at(2, 20, cfg) == 5e-5);
    CHECK(lr_at(20, 20, cfg) == 5e-6);

    // decay midpoint: (11 - 2) / (20 - 2) = 0.5
    CHECK(lr_at(11, 20, cfg) == doctest::Approx(2.75e-5).epsilon(1e-12));

    for (int64_t s = 2; s < 20; ++s) {
        CHECK(lr_at(s + 1, 20, cfg) <= lr_at(s, 20, cfg));
    }

    TrainConfig no_warmup = cfg;
    no_warmup.warmup_frac = 0.0;
    CHECK(lr_at(0, 10, no_warmup) == 5e-5);

    CHECK(error_message([&] { lr_at(0, 0, cfg); }) == "total_steps must be positive");
    CHECK(error_message([&] { lr_at(-1, 10, cfg); }) == "step out of range");
    CHECK(error_message([&] { lr_at(11, 10, cfg); }) == "step out of range");
}

TEST_CASE("adamw matches a hand-evaluated update") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamMap params{{"w", {1.0}}};
    AdamState state;

    adamw_step(params, GradMap{{"w", {1.0}}}, state, 0.1, cfg);
    // Step 1: bias correction makes mhat = vhat = 1.
    const double step1 = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8);
    CHECK(std::abs(params["w"][0] - step1) <= 1e-12);

    adamw_step(params, GradMap{{"w", {1.0}}}, state, 0.1, cfg);
    const double m2 = 0.9 * 0.1 + 0.1 * 1.0;
    const double v2 = 0.999 * 0.001 + 0.001 * 1.0;
    const double mhat2 = m2 / (1.0 - 0.9 * 0.9);
    const double vhat2 = v2 / (1.0 - 0.999 * 0.999);
    const double step2 = step1 - 0.1 * mhat2 / (std::sqrt(vhat2) + 1e-8);
    CHECK(std::abs(params["w"][0] - step2) <= 1e-12);
}

TEST_CASE("adamw identity, decay exemptions and validation") {
    TrainConfig cfg;
    cfg.weight_decay = 0.0;
    ParamMap params{{"w", {0.7, -1.3}}};
    const ParamMap before = params;
    AdamState state;
    adamw_step(params, GradMap{{"w", {0.0, 0.0}}}, state, 0.1, cfg);
    CHECK(params == before);  // zero grads, zero decay: bit-exact identity

    TrainConfig decay = cfg;
    decay.weight_decay = 0.1;
    ParamMap mixed{{"embed.tok", {2.0}},
                   {"head.out", {2.0}},
                   {"layers.0.attn.q", {2.0}},
                   {"layers.0.attn_norm.scale", {2.0}}};
    GradMap zeros{{"embed.tok", {0.0}},
                  {"head.out", {0.0}},
                  {"layers.0.attn.q", {0.0}},
                  {"layers.0.attn_norm.scale", {0.0}}};
    AdamState state2;
    adamw_step(mixed, zeros, state2, 0.1, decay);
    CHECK(mixed["embed.tok"][0] == 2.0);
    CHECK(mixed["layers.0.attn_norm.scale"][0] == 2.0);
    CHECK(mixed["head.out"][0] == 2.0 - 0.1 * 0.1 * 2.0);
    CHECK(mixed["layers.0.attn.q"][0] == 2.0 - 0.1 * 0.1 * 2.0);

    AdamState state3;
    ParamMap p3{{"w", {1.0}}};
    CHECK(error_message([&] { adamw_step(p3, GradMap{}, state3, 0.1, cfg); }) ==
          "missing gradient for 'w'");
    CHECK(error_message([&] { adamw_step(p3, GradMap{{"w", {1.0, 2.0}}}, state3, 0.1, cfg); }) ==
          "shape mismatch for tensor 'w'");
    const double inf = std::numeric_limits<double>::infinity();
    CHECK(error_message([&] { adamw_step(p3, GradMap{{"w", {inf}}}, state3, 0.1, cfg); }) ==
          "non-finite gradient for 'w'");
}

TEST_CASE("gradient clipping rescales by the global norm") {
    GradMap g{{"a", {3.0}}, {"b", {4.0}}};
    const double norm = clip_gradients(g, 1.0);
    CHECK(norm == 5.0);
    CHECK(g["a"][0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(g["b"][0] == doctest::Approx(0.8).epsilon(1e-15));

    GradMap small{{"a", {0.3}}};
    clip_gradients(small, 1.0);
    CHECK(small["a"][0] == 0.3);

    GradMap big{{"a", {30.0}}};
    CHECK(clip_gradients(big, 0.0) == 30.0);
    CHECK(big["a"][0] == 30.0);  // 0 disables clipping
}

TEST_CASE("train config validates and round-trips through JSON") {
    TrainConfig cfg;
    cfg.base_lr = 3e-3;
    cfg.epochs = 5;
    cfg.seed = 17;
    const TrainConfig back = TrainConfig::from_json(cfg.to_json());
    CHECK(back.base_lr == cfg.base_lr);
    CHECK(back.epochs == cfg.epochs);
    CHECK(back.seed == cfg.seed);
    CHECK(back.weight_decay == cfg.weight_decay);

    auto withf = [](auto setter) {
        TrainConfig c;
        setter(c);
        c.validate();
    };
    CHECK(error_message([&] { withf([](TrainConfig& c) { c.base_lr = 0.0; }); }) ==
          "base_lr must be positive");
    CHECK(error_message([&] { withf([](TrainConfig& c) { c.warmup_frac = 1.0; }); }) ==
          "warmup_frac must be in [0, 1)");
    CHECK(error_message([&] { withf([](TrainConfig& c) { c.batch_samples = 0; }); }) ==
          "batch_samples must be positive");
    CHECK(error_message([&] { withf([](TrainConfig& c) { c.adam_beta2 = 1.0; }); }) ==
          "adam betas must be in [0, 1)");
}

TEST_CASE("supervised training is deterministic and writes its artifacts") {
    const auto dir = std::filesystem::temp_directory_path() / "forge15_trainer_det";
    std::filesystem::remove_all(dir);

    const Checkpoint start = init_checkpoint(tiny_config(), 7);
    const auto rows = cpt_rows({"alpha beta gamma", "delta epsilon", "zeta eta theta",
                                "iota kappa", "lambda mu nu", "xi omicron pi"});
    TrainConfig cfg;
    cfg.base_lr = 1e-3;
    cfg.final_lr = 1e-4;
    cfg.epochs = 2;
    cfg.batch_samples = 2;
    cfg.seq_len = 32;
    cfg.seed = 9;
    cfg.checkpoint_every = 3;

    const TrainResult a = train_supervised(start, rows, cfg, "cpt", dir / "a");
    const TrainResult b = train_supervised(start, rows, cfg, "cpt", dir / "b");
    CHECK(fingerprint(a.model) == fingerprint(b.model));
    REQUIRE(a.log.size() == b.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].loss == b.log[i].loss);
        CHECK(a.log[i].lr == b.log[i].lr);
    }

    const int64_t total = static_cast<int64_t>(a.log.size());
    for (size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].step == static_cast<int64_t>(i) + 1);
        CHECK(a.log[i].lr == lr_at(static_cast<int64_t>(i), total, cfg));
        CHECK(std::isfinite(a.log[i].loss));
    }

    CHECK(std::filesystem::exists(dir / "a" / "epoch-1.anmt"));
    CHECK(std::filesystem::exists(dir / "a" / "epoch-2.anmt"));
    CHECK(std::filesystem::exists(dir / "a" / "final.anmt"));
    CHECK(std::filesystem::exists(dir / "a" / "step-3.anmt"));
    CHECK(load_jsonl(dir / "a" / "loss.jsonl").size() == a.log.size());

    const Checkpoint final_file = load_checkpoint(dir / "a" / "final.anmt");
    CHECK(fingerprint(final_file) == fingerprint(a.model));
    CHECK(final_file.meta.at("stage") == "cpt");
    CHECK(final_file.meta.at("parent") == fingerprint(start));

    // A different seed must change the outcome.
    TrainConfig other = cfg;
    other.seed = 10;
    const TrainResult c = train_supervised(start, rows, other, "cpt", dir / "c");
    CHECK(fingerprint(c.model) != fingerprint(a.model));

    std::filesystem::remove_all(dir);
}

TEST_CASE("zero epochs returns the input parameters with an empty log") {
    const auto dir = std::filesystem::temp_directory_path() / "forge15_trainer_zero";
    std::filesystem::remove_all(dir);

    const Checkpoint start = init_checkpoint(tiny_config(), 3);
    TrainConfig cfg;
    cfg.epochs = 0;
    cfg.seq_len = 32;
    const TrainResult r = train_supervised(start, cpt_rows({"some text"}), cfg, "cpt", dir);
    CHECK(r.log.empty());
    CHECK(same_tensors(r.model, start));
    CHECK(load_jsonl(dir / "loss.jsonl").empty());

    std::filesystem::remove_all(dir);
}

TEST_CASE("training rejects bad inputs") {
    const auto dir = std::filesystem::temp_directory_path() / "forge15_trainer_bad";
    const Checkpoint start = init_checkpoint(tiny_config(), 3);
    TrainConfig cfg;
    cfg.seq_len = 32;
    CHECK(error_message([&] { train_supervised(start, {}, cfg, "cpt", dir); }) == "empty dataset");
    CHECK(error_message([&] { train_supervised(start, cpt_rows({"x"}), cfg, "dpo", dir); }) ==
          "unknown training mode 'dpo'");
    // Single-byte documents never have an in-document predecessor to score.
    CHECK(error_message([&] { train_supervised(start, cpt_rows({"x", "y"}), cfg, "cpt", dir); }) ==
          "empty loss mask");
}

TEST_CASE("a tiny model overfits a fixed corpus") {
    const auto dir = std::filesystem::temp_directory_path() / "forge15_trainer_overfit";
    std::filesystem::remove_all(dir);

    const std::vector<std::string> texts = {"the cat sat", "a dog ran", "birds fly high",
                                            "fish swim deep", "suns set red", "moons rise up",
                                            "rain falls down", "winds blow cold"};
    std::vector<std::string> corpus;
    for (int copy = 0; copy < 4; ++copy) {
        for (const std::string& t : texts) corpus.push_back(t);
    }

    const Checkpoint start = init_checkpoint(tiny_config(), 11);
    TrainConfig cfg;
    cfg.base_lr = 3e-3;
    cfg.final_lr = 3e-4;
    cfg.epochs = 100;
    cfg.batch_samples = 8;
    cfg.seq_len = 32;
    cfg.weight_decay = 0.0;
    cfg.seed = 4;

    const TrainResult r = train_supervised(start, cpt_rows(corpus), cfg, "cpt", dir);
    REQUIRE_FALSE(r.log.empty());
    const double initial = r.log.front().loss;
    const double final_loss = r.log.back().loss;
    CHECK(initial > 1.0);
    CHECK(final_loss < 0.1 * initial);

    std::filesystem::remove_all(dir);
}
