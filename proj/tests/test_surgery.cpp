#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "doctest.h"
#include "forge15/checkpoint.hpp"
#include "forge15/model.hpp"
#include "forge15/rng.hpp"
#include "forge15/surgery.hpp"

using namespace forge15;

namespace {

ModelConfig deep_config(int layers = 8) {
    ModelConfig cfg;
    cfg.n_layers = layers;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.vocab_size = 20;
    cfg.max_seq_len = 16;
    return cfg;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), 4 * a.data.size()) == 0;
}

bool layers_equal(const Checkpoint& a, int la, const Checkpoint& b, int lb) {
    static const char* suffixes[] = {"attn.q", "attn.k", "attn.v", "attn.o",
                                     "attn_norm.scale", "mlp.gate", "mlp.up",
                                     "mlp.down", "mlp_norm.scale"};
    for (const char* s : suffixes) {
        if (!tensors_equal(a.at(layer_prefix(la) + s), b.at(layer_prefix(lb) + s))) return false;
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

TEST_CASE("duplicate upscale interleaves exact copies") {
    const Checkpoint base = init_checkpoint(deep_config(), 1);
    const Checkpoint up = depth_upscale(base, 10, DepthStrategy::duplicate,
                                        LayerSpan{3, 4});
    CHECK(up.arch.n_layers == 10);

    const int source_of[10] = {0, 1, 2, 3, 3, 4, 4, 5, 6, 7};
    for (int dst = 0; dst < 10; ++dst) {
        CHECK(layers_equal(up, dst, base, source_of[dst]));
    }
    CHECK(tensors_equal(up.at("embed.tok"), base.at("embed.tok")));
    CHECK(tensors_equal(up.at("head.out"), base.at("head.out")));
    CHECK(tensors_equal(up.at("final_norm.scale"), base.at("final_norm.scale")));
    CHECK(up.meta.at("strategy") == "duplicate");
    CHECK(up.meta.at("span") == "3..4");
    CHECK(up.meta.at("parent") == fingerprint(base));
}

TEST_CASE("default span is the centered block") {
    const Checkpoint base = init_checkpoint(deep_config(), 2);
    const Checkpoint up = depth_upscale(base, 10, DepthStrategy::duplicate);
    CHECK(up.meta.at("span") == "3..4");
    const Checkpoint explicit_span =
        depth_upscale(base, 10, DepthStrategy::duplicate, LayerSpan{3, 4});
    CHECK(serialize_checkpoint(up) == serialize_checkpoint(explicit_span));
}

TEST_CASE("average strategy inserts the midpoint of adjacent layers") {
    const Checkpoint base = init_checkpoint(deep_config(), 3);
    const Checkpoint up = depth_upscale(base, 9, DepthStrategy::average, LayerSpan{3, 3});
    // Output stack: [0,1,2,3,avg(3,4),4,5,6,7]; the inserted layer is index 4.
    const Tensor& a = base.at("layers.3.mlp.gate");
    const Tensor& b = base.at("layers.4.mlp.gate");
    const Tensor& mid = up.at("layers.4.mlp.gate");
    for (size_t i = 0; i < mid.data.size(); ++i) {
        CHECK(mid.data[i] == static_cast<float>(0.5 * (static_cast<double>(a.data[i]) +
                                                       static_cast<double>(b.data[i]))));
    }
    CHECK(layers_equal(up, 5, base, 4));
}

TEST_CASE("maxpool strategy takes the elementwise max of adjacent layers") {
    const Checkpoint base = init_checkpoint(deep_config(), 4);
    const Checkpoint up = depth_upscale(base, 9, DepthStrategy::maxpool, LayerSpan{2, 2});
    const Tensor& a = base.at("layers.2.attn.q");
    const Tensor& b = base.at("layers.3.attn.q");
    const Tensor& ins = up.at("layers.3.attn.q");
    for (size_t i = 0; i < ins.data.size(); ++i) {
        CHECK(ins.data[i] == std::max(a.data[i], b.data[i]));
    }
}

TEST_CASE("average_alternate uses layers i and i+2") {
    const Checkpoint base = init_checkpoint(deep_config(), 5);
    const Checkpoint up =
        depth_upscale(base, 9, DepthStrategy::average_alternate, LayerSpan{3, 3});
    const Tensor& a = base.at("layers.3.attn.v");
    const Tensor& b = base.at("layers.5.attn.v");
    const Tensor& ins = up.at("layers.4.attn.v");
    for (size_t i = 0; i < ins.data.size(); ++i) {
        CHECK(ins.data[i] == static_cast<float>(0.5 * (static_cast<double>(a.data[i]) +
                                                       static_cast<double>(b.data[i]))));
    }
}

TEST_CASE("parameter count closed form holds for random configs") {
    Rng rng(55);
    for (int rep = 0; rep < 20; ++rep) {
        ModelConfig cfg;
        cfg.n_layers = 4 + static_cast<int>(rng.bounded(5));
        cfg.n_heads = 1 + static_cast<int>(rng.bounded(3));
        cfg.d_model = cfg.n_heads * 2 * (1 + static_cast<int>(rng.bounded(3)));
        cfg.d_ff = 4 + static_cast<int>(rng.bounded(10));
        cfg.vocab_size = 8 + static_cast<int>(rng.bounded(30));
        cfg.max_seq_len = 8;

        const Checkpoint base = init_checkpoint(cfg, rng.next_u64());
        const int target = cfg.n_layers + 1 + static_cast<int>(rng.bounded(
                               static_cast<uint64_t>(cfg.n_layers - 2)));
        const Checkpoint up = depth_upscale(base, target, DepthStrategy::duplicate);

        int64_t actual = 0;
        for (const auto& [name, t] : up.tensors) actual += t.numel();
        CHECK(actual == total_param_count(up.arch));
        CHECK(total_param_count(up.arch) ==
              total_param_count(cfg) + (target - cfg.n_layers) * per_layer_param_count(cfg));
    }
}

TEST_CASE("depth upscale input validation") {
    const Checkpoint base = init_checkpoint(deep_config(), 6);
    CHECK(error_message([&] { depth_upscale(base, 8, DepthStrategy::duplicate); }) ==
          "target layer count must exceed the source layer count");
    CHECK(error_message([&] {
              depth_upscale(base, 10, DepthStrategy::duplicate, LayerSpan{0, 1});
          }) == "insert span touches a boundary layer");
    CHECK(error_message([&] {
              depth_upscale(base, 10, DepthStrategy::duplicate, LayerSpan{6, 7});
          }) == "insert span touches a boundary layer");
    CHECK(error_message([&] {
              depth_upscale(base, 9, DepthStrategy::average_alternate, LayerSpan{6, 6});
          }).find("past the last layer") != std::string::npos);
    CHECK(error_message([&] {
              depth_upscale(base, 12, DepthStrategy::duplicate, LayerSpan{3, 4});
          }) == "span size must equal target minus source layers");
    CHECK(error_message([&] { depth_strategy_from_string("fancy"); }) ==
          "unknown depth strategy 'fancy'");
}

TEST_CASE("zero-preserving width upscale keeps the function") {
    ModelConfig cfg = deep_config(2);
    const Checkpoint base = init_checkpoint(cfg, 7);
    const Checkpoint wide = width_upscale(base, 20, WidthInit::zero_preserving);
    CHECK(wide.arch.d_ff == 20);

    Rng rng(8);
    double max_diff = 0.0;
    for (int rep = 0; rep < 64; ++rep) {
        TokenBatch batch;
        const int len = 1 + static_cast<int>(rng.bounded(8));
        for (int t = 0; t < len; ++t) {
            batch.tokens.push_back(static_cast<int>(rng.bounded(20)));
            batch.doc_ids.push_back(0);
            batch.loss_mask.push_back(1);
        }
        const auto la = forward(base, batch);
        const auto lb = forward(wide, batch);
        for (size_t i = 0; i < la.size(); ++i) {
            max_diff = std::max(max_diff, std::abs(la[i] - lb[i]));
        }
    }
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("duplicate-halved width upscale with exact doubling keeps the function") {
    ModelConfig cfg = deep_config(2);
    const Checkpoint base = init_checkpoint(cfg, 9);
    const Checkpoint wide = width_upscale(base, 24, WidthInit::duplicate_halved);

    Rng rng(10);
    double max_diff = 0.0;
    for (int rep = 0; rep < 64; ++rep) {
        TokenBatch batch;
        const int len = 1 + static_cast<int>(rng.bounded(8));
        for (int t = 0; t < len; ++t) {
            batch.tokens.push_back(static_cast<int>(rng.bounded(20)));
            batch.doc_ids.push_back(0);
            batch.loss_mask.push_back(1);
        }
        const auto la = forward(base, batch);
        const auto lb = forward(wide, batch);
        for (size_t i = 0; i < la.size(); ++i) {
            max_diff = std::max(max_diff, std::abs(la[i] - lb[i]));
        }
    }
    CHECK(max_diff <= 1e-5);
}

TEST_CASE("width upscale reshapes the MLP and nothing else") {
    const Checkpoint base = init_checkpoint(deep_config(2), 11);
    const Checkpoint wide = width_upscale(base, 17, WidthInit::zero_preserving);

    CHECK(tensors_equal(wide.at("embed.tok"), base.at("embed.tok")));
    CHECK(tensors_equal(wide.at("head.out"), base.at("head.out")));
    CHECK(tensors_equal(wide.at("layers.0.attn.q"), base.at("layers.0.attn.q")));
    CHECK(tensors_equal(wide.at("layers.1.attn_norm.scale"), base.at("layers.1.attn_norm.scale")));

    const Tensor& gate = wide.at("layers.0.mlp.gate");
    const Tensor& src_gate = base.at("layers.0.mlp.gate");
    const int d = base.arch.d_model;
    // Row 12 copies row 0, row 16 copies row 4.
    CHECK(std::memcmp(gate.data.data() + 12 * d, src_gate.data.data(), 4 * d) == 0);
    CHECK(std::memcmp(gate.data.data() + 16 * d, src_gate.data.data() + 4 * d, 4 * d) == 0);

    const Tensor& down = wide.at("layers.0.mlp.down");
    for (int o = 0; o < d; ++o) {
        for (int f = 12; f < 17; ++f) {
            CHECK(down.data[static_cast<size_t>(o) * 17 + f] == 0.0f);
        }
    }

    CHECK(error_message([&] { width_upscale(base, 12, WidthInit::zero_preserving); }) ==
          "new d_ff must exceed the current d_ff");
    CHECK(error_message([&] { width_init_from_string("xavier"); }) ==
          "unknown width init 'xavier'");
}

TEST_CASE("dropping no layers is the identity on tensors and arch") {
    const Checkpoint base = init_checkpoint(deep_config(), 12);
    const Checkpoint out = drop_layers(base, {});
    CHECK(out.arch == base.arch);
    for (const auto& [name, t] : base.tensors) {
        CHECK(tensors_equal(out.at(name), t));
    }
    CHECK(out.meta.at("stage") == "drop_layers");
}

TEST_CASE("dropping layers re-indexes the survivors") {
    const Checkpoint base = init_checkpoint(deep_config(), 13);
    const Checkpoint out = drop_layers(base, {2, 5});
    CHECK(out.arch.n_layers == 6);
    // Survivors 0,1,3,4,6,7 land at 0,1,2,3,4,5.
    CHECK(layers_equal(out, 0, base, 0));
    CHECK(layers_equal(out, 1, base, 1));
    CHECK(layers_equal(out, 2, base, 3));
    CHECK(layers_equal(out, 3, base, 4));
    CHECK(layers_equal(out, 4, base, 6));
    CHECK(layers_equal(out, 5, base, 7));
    CHECK(out.meta.at("dropped") == "2,5");
}

TEST_CASE("drop_layers input validation") {
    const Checkpoint base = init_checkpoint(deep_config(2), 14);
    CHECK(error_message([&] { drop_layers(base, {0, 1}); }) == "cannot drop all layers");
    CHECK(error_message([&] { drop_layers(base, {0, 0}); }) == "duplicate layer index 0");
    CHECK(error_message([&] { drop_layers(base, {7}); }) == "layer index 7 out of range");
}

TEST_CASE("drop then duplicate restores a valid stack of the original depth") {
    const Checkpoint base = init_checkpoint(deep_config(), 15);
    const Checkpoint dropped = drop_layers(base, {2, 5});
    const Checkpoint restored = depth_upscale(dropped, 8, DepthStrategy::duplicate);
    CHECK(restored.arch.n_layers == 8);
    restored.validate();
}
