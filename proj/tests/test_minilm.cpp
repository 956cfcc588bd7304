#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "forge15/checkpoint.hpp"
#include "forge15/model.hpp"
#include "forge15/rng.hpp"
#include "forge15/tokenizer.hpp"

using namespace forge15;

namespace {

ModelConfig small_config(int vocab = 24) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_ff = 24;
    cfg.vocab_size = vocab;
    cfg.max_seq_len = 32;
    return cfg;
}

TokenBatch make_batch(std::vector<int> tokens, std::vector<int> docs, std::vector<int> mask) {
    TokenBatch b;
    b.tokens = std::move(tokens);
    b.doc_ids = std::move(docs);
    for (int m : mask) b.loss_mask.push_back(static_cast<uint8_t>(m));
    return b;
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

TEST_CASE("forward returns finite logits of the right shape") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 1);
    const TokenBatch batch = make_batch({1, 2, 3, 4, 5}, {0, 0, 0, 0, 0}, {1, 1, 1, 1, 1});
    const auto logits = forward(ckpt, batch);
    CHECK(logits.size() == 5u * 24u);
    for (double v : logits) CHECK(std::isfinite(v));
}

TEST_CASE("packed forward matches per-document forward") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 2);
    const std::vector<std::vector<int>> docs = {{5, 9, 2}, {7, 7, 1, 3}, {4}};

    TokenBatch packed;
    for (size_t d = 0; d < docs.size(); ++d) {
        for (int t : docs[d]) {
            packed.tokens.push_back(t);
            packed.doc_ids.push_back(static_cast<int>(d));
            packed.loss_mask.push_back(1);
        }
    }
    const auto packed_logits = forward(ckpt, packed);

    const int V = ckpt.arch.vocab_size;
    size_t row = 0;
    double max_diff = 0.0;
    for (const auto& doc : docs) {
        TokenBatch single;
        single.tokens = doc;
        single.doc_ids.assign(doc.size(), 0);
        single.loss_mask.assign(doc.size(), 1);
        const auto solo_logits = forward(ckpt, single);
        for (size_t i = 0; i < solo_logits.size(); ++i) {
            max_diff = std::max(max_diff,
                                std::abs(solo_logits[i] - packed_logits[row * V + i]));
        }
        row += doc.size();
    }
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("document isolation: permuting doc 1 leaves doc 2 logits unchanged") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 3);
    TokenBatch a = make_batch({5, 9, 2, 7, 7, 1}, {0, 0, 0, 1, 1, 1}, {1, 1, 1, 1, 1, 1});
    TokenBatch b = a;
    std::swap(b.tokens[0], b.tokens[2]);

    const auto la = forward(ckpt, a);
    const auto lb = forward(ckpt, b);
    const int V = ckpt.arch.vocab_size;
    CHECK(std::memcmp(la.data() + 3 * V, lb.data() + 3 * V, 3 * V * sizeof(double)) == 0);
}

TEST_CASE("uniform logits give ln(vocab) loss") {
    TokenBatch batch = make_batch({1, 2, 3}, {0, 0, 0}, {1, 1, 1});
    const std::vector<double> logits(3 * 264, 0.37);
    CHECK(lm_loss(logits, batch) == doctest::Approx(std::log(264.0)).epsilon(1e-12));
}

TEST_CASE("tokens feeding only masked positions cannot move the loss") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 4);
    TokenBatch batch = make_batch({3, 8, 1, 6, 2}, {0, 0, 0, 0, 0}, {0, 1, 1, 0, 0});
    const double before = lm_loss(forward(ckpt, batch), batch);
    batch.tokens[3] = 19;  // successor position 4 is masked out
    batch.tokens[4] = 11;
    const double after = lm_loss(forward(ckpt, batch), batch);
    CHECK(before == after);
}

TEST_CASE("all-ones mask equals the plain mean cross-entropy") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 5);
    const TokenBatch batch = make_batch({1, 2, 3, 4}, {0, 0, 0, 0}, {1, 1, 1, 1});
    const auto logits = forward(ckpt, batch);
    const auto lsm = log_softmax_rows(logits, ckpt.arch.vocab_size);

    double expect = 0.0;
    for (int t = 1; t < 4; ++t) {
        expect -= lsm[static_cast<size_t>(t - 1) * 24 + batch.tokens[static_cast<size_t>(t)]];
    }
    expect /= 3.0;
    CHECK(lm_loss(logits, batch) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss is invariant to a per-position constant logit shift") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 6);
    const TokenBatch batch = make_batch({9, 4, 4, 2}, {0, 0, 0, 0}, {1, 1, 1, 1});
    auto logits = forward(ckpt, batch);
    const double base = lm_loss(logits, batch);
    const int V = ckpt.arch.vocab_size;
    for (int t = 0; t < 4; ++t) {
        for (int v = 0; v < V; ++v) logits[static_cast<size_t>(t) * V + v] += 0.8 * (t + 1);
    }
    CHECK(std::abs(lm_loss(logits, batch) - base) <= 1e-5);
}

TEST_CASE("all-zero mask is rejected") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 7);
    const TokenBatch batch = make_batch({1, 2, 3}, {0, 0, 0}, {0, 0, 0});
    const auto logits = forward(ckpt, batch);
    CHECK(error_message([&] { lm_loss(logits, batch); }) == "empty loss mask");
    CHECK(error_message([&] { grad(ckpt, batch); }) == "empty loss mask");
}

TEST_CASE("analytic gradients match central finite differences") {
    const ModelConfig cfg = small_config();
    Checkpoint ckpt = init_checkpoint(cfg, 8);
    // Two documents, padding, and a few masked positions in one packed row.
    const TokenBatch batch = make_batch({2, 9, 14, 7, 1, 5, 5, 11, 3, 20, 0, 0},
                                        {0, 0, 0, 0, 0, 1, 1, 1, 1, 1, -1, -1},
                                        {0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0});

    double loss0 = 0.0;
    const GradMap grads = grad(ckpt, batch, &loss0);
    CHECK(std::isfinite(loss0));

    std::vector<std::string> names;
    for (const auto& [name, g] : grads) names.push_back(name);

    Rng rng(99);
    double max_rel = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const std::string& name = names[rng.bounded(names.size())];
        Tensor& t = ckpt.at(name);
        const size_t idx = rng.bounded(t.data.size());
        const float orig = t.data[idx];
        const double h = 1e-3;

        t.data[idx] = static_cast<float>(orig + h);
        const double hi = static_cast<double>(t.data[idx]);
        const double loss_hi = lm_loss(forward(ckpt, batch), batch);

        t.data[idx] = static_cast<float>(orig - h);
        const double lo = static_cast<double>(t.data[idx]);
        const double loss_lo = lm_loss(forward(ckpt, batch), batch);
        t.data[idx] = orig;

        const double numeric = (loss_hi - loss_lo) / (hi - lo);
        const double analytic = grads.at(name)[idx];
        const double rel = std::abs(analytic - numeric) /
                           std::max(std::abs(analytic) + std::abs(numeric), 1e-8);
        CAPTURE(name);
        CAPTURE(idx);
        CHECK(rel < 1e-3);
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel < 1e-3);
}

TEST_CASE("embedding rows of unused tokens get exactly zero gradient") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 9);
    const TokenBatch batch = make_batch({1, 2, 3, 4}, {0, 0, 0, 0}, {1, 1, 1, 1});
    const GradMap grads = grad(ckpt, batch);
    const auto& ge = grads.at("embed.tok");
    const int D = ckpt.arch.d_model;
    for (int i = 0; i < D; ++i) {
        CHECK(ge[static_cast<size_t>(17) * D + i] == 0.0);
    }
}

TEST_CASE("nucleus rule hand examples") {
    {
        const auto dist = nucleus_distribution({0.5, 0.3, 0.2}, 0.7);
        REQUIRE(dist.size() == 2);
        CHECK(dist[0].first == 0);
        CHECK(dist[0].second == doctest::Approx(0.625).epsilon(1e-12));
        CHECK(dist[1].first == 1);
        CHECK(dist[1].second == doctest::Approx(0.375).epsilon(1e-12));
    }
    {
        // Ties broken by ascending id.
        const auto dist = nucleus_distribution({0.2, 0.4, 0.4}, 0.5);
        REQUIRE(dist.size() == 2);
        CHECK(dist[0].first == 1);
        CHECK(dist[1].first == 2);
        CHECK(dist[0].second == doctest::Approx(0.5).epsilon(1e-12));
    }
    {
        const auto dist = nucleus_distribution({0.5, 0.3, 0.2}, 1.0);
        CHECK(dist.size() == 3);
    }
    {
        const auto dist = nucleus_distribution({0.5, 0.3, 0.2}, 0.01);
        REQUIRE(dist.size() == 1);
        CHECK(dist[0].first == 0);
        CHECK(dist[0].second == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("sampling is deterministic per seed") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 10);
    const std::vector<int> prompt = {3, 1, 4};
    const SampleResult a = sample(ckpt, prompt, 1.0, 0.95, 16, 7);
    const SampleResult b = sample(ckpt, prompt, 1.0, 0.95, 16, 7);
    CHECK(a.tokens == b.tokens);
    CHECK(a.logprobs == b.logprobs);

    bool any_difference = false;
    for (uint64_t seed = 0; seed < 8 && !any_difference; ++seed) {
        any_difference = sample(ckpt, prompt, 1.0, 0.95, 16, seed).tokens != a.tokens;
    }
    CHECK(any_difference);
}

TEST_CASE("full-nucleus sampling frequencies match the softmax within 3 sigma") {
    ModelConfig cfg = small_config(16);
    const Checkpoint ckpt = init_checkpoint(cfg, 11);
    const std::vector<int> prompt = {3, 7};

    TokenBatch batch = make_batch({3, 7}, {0, 0}, {0, 1});
    const auto logits = forward(ckpt, batch);
    const auto lsm = log_softmax_rows(logits, 16);
    std::vector<double> p(16);
    for (int v = 0; v < 16; ++v) p[static_cast<size_t>(v)] = std::exp(lsm[16 + v]);

    const int n = 10000;
    std::vector<int> counts(16, 0);
    for (int i = 0; i < n; ++i) {
        const SampleResult r = sample(ckpt, prompt, 1.0, 1.0, 1, static_cast<uint64_t>(i));
        REQUIRE(r.tokens.size() == 1);
        counts[static_cast<size_t>(r.tokens[0])]++;
    }
    for (int v = 0; v < 16; ++v) {
        const double mean = n * p[static_cast<size_t>(v)];
        const double sigma = std::sqrt(n * p[static_cast<size_t>(v)] * (1.0 - p[static_cast<size_t>(v)]));
        CAPTURE(v);
        CHECK(std::abs(counts[static_cast<size_t>(v)] - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("sampled logprobs agree with sequence_logprobs") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 12);
    const std::vector<int> prompt = {3, 1, 4, 1, 5};
    for (double temp : {1.0, 0.7}) {
        const SampleResult r = sample(ckpt, prompt, temp, 0.95, 12, 21);
        REQUIRE(!r.tokens.empty());
        std::vector<int> full = prompt;
        full.insert(full.end(), r.tokens.begin(), r.tokens.end());
        const auto lp = sequence_logprobs(ckpt, full, static_cast<int>(prompt.size()));
        REQUIRE(lp.size() == r.logprobs.size());
        for (size_t i = 0; i < lp.size(); ++i) {
            CHECK(std::abs(lp[i] - r.logprobs[i]) <= 1e-5);
        }
    }
}

TEST_CASE("log-softmax rows are normalized") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 13);
    const TokenBatch batch = make_batch({2, 4, 6}, {0, 0, 0}, {1, 1, 1});
    const auto lsm = log_softmax_rows(forward(ckpt, batch), 24);
    for (int t = 0; t < 3; ++t) {
        double sum = 0.0;
        for (int v = 0; v < 24; ++v) sum += std::exp(lsm[static_cast<size_t>(t) * 24 + v]);
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("sampling input validation") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 14);
    CHECK(error_message([&] { sample(ckpt, {}, 1.0, 0.95, 4, 0); }) == "empty prompt");
    CHECK(error_message([&] { sample(ckpt, {1}, 0.0, 0.95, 4, 0); }) == "invalid temperature");
    CHECK(error_message([&] { sample(ckpt, {1}, 1.0, 0.0, 4, 0); }) == "invalid top_p");
    CHECK(error_message([&] { sample(ckpt, {1}, 1.0, 1.5, 4, 0); }) == "invalid top_p");
    CHECK(error_message([&] { sample(ckpt, {99}, 1.0, 0.95, 4, 0); }) == "out-of-range token id");
}

TEST_CASE("sequence_logprobs length validation") {
    const Checkpoint ckpt = init_checkpoint(small_config(), 15);
    CHECK(error_message([&] { sequence_logprobs(ckpt, {1, 2, 3}, 3); }) ==
          "prompt_len must be less than the token count");
    CHECK(error_message([&] { sequence_logprobs(ckpt, {1, 2, 3}, 0); }) ==
          "prompt_len must be at least 1");
}

TEST_CASE("token batch validation") {
    const ModelConfig cfg = small_config();
    const Checkpoint ckpt = init_checkpoint(cfg, 16);

    TokenBatch bad_id = make_batch({1, 99}, {0, 0}, {1, 1});
    CHECK(error_message([&] { forward(ckpt, bad_id); }) == "out-of-range token id");

    TokenBatch too_long;
    too_long.tokens.assign(33, 1);
    too_long.doc_ids.assign(33, 0);
    too_long.loss_mask.assign(33, 1);
    CHECK(error_message([&] { forward(ckpt, too_long); }) == "sequence too long");

    TokenBatch mismatched = make_batch({1, 2}, {0, 0}, {1, 1});
    mismatched.doc_ids.pop_back();
    CHECK(error_message([&] { forward(ckpt, mismatched); }) ==
          "token batch field lengths differ");

    TokenBatch pad_inside = make_batch({1, 2, 3}, {0, -1, 0}, {1, 0, 1});
    CHECK(error_message([&] { forward(ckpt, pad_inside); }) == "padding must be trailing");

    TokenBatch decreasing = make_batch({1, 2, 3}, {1, 0, 0}, {1, 1, 1});
    CHECK(error_message([&] { forward(ckpt, decreasing); }) ==
          "doc_ids must be non-decreasing");
}
