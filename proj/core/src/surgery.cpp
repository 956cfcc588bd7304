#include "forge15/surgery.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

namespace forge15 {

namespace {

const char* kLayerSuffixes[] = {
    "attn.q", "attn.k", "attn.v", "attn.o", "attn_norm.scale",
    "mlp.gate", "mlp.up", "mlp.down", "mlp_norm.scale",
};

std::string span_string(const LayerSpan& span) {
    return std::to_string(span.first) + ".." + std::to_string(span.last);
}

}  // namespace

DepthStrategy depth_strategy_from_string(const std::string& s) {
    if (s == "duplicate") return DepthStrategy::duplicate;
    if (s == "average") return DepthStrategy::average;
    if (s == "maxpool") return DepthStrategy::maxpool;
    if (s == "average_alternate") return DepthStrategy::average_alternate;
    throw std::runtime_error("unknown depth strategy '" + s + "'");
}

std::string to_string(DepthStrategy s) {
    switch (s) {
        case DepthStrategy::duplicate: return "duplicate";
        case DepthStrategy::average: return "average";
        case DepthStrategy::maxpool: return "maxpool";
        case DepthStrategy::average_alternate: return "average_alternate";
    }
    throw std::runtime_error("unknown depth strategy");
}

WidthInit width_init_from_string(const std::string& s) {
    if (s == "zero_preserving") return WidthInit::zero_preserving;
    if (s == "duplicate_halved") return WidthInit::duplicate_halved;
    throw std::runtime_error("unknown width init '" + s + "'");
}

std::string to_string(WidthInit w) {
    switch (w) {
        case WidthInit::zero_preserving: return "zero_preserving";
        case WidthInit::duplicate_halved: return "duplicate_halved";
    }
    throw std::runtime_error("unknown width init");
}

Checkpoint depth_upscale(const Checkpoint& ckpt, int target_layers, DepthStrategy strategy,
                         std::optional<LayerSpan> insert_span) {
    ckpt.validate();
    const int source = ckpt.arch.n_layers;
    if (target_layers <= source) {
        throw std::runtime_error("target layer count must exceed the source layer count");
    }
    const int added = target_layers - source;

    LayerSpan span;
    if (insert_span) {
        span = *insert_span;
        if (span.last - span.first + 1 != added) {
            throw std::runtime_error("span size must equal target minus source layers");
        }
    } else {
        span.first = (source - added) / 2;
        span.last = span.first + added - 1;
    }

    // The span must sit strictly inside the stack, and pair-based strategies
    // must find their partner layers.
    const int needs_ahead = strategy == DepthStrategy::duplicate          ? 0
                            : strategy == DepthStrategy::average_alternate ? 2
                                                                           : 1;
    if (span.first < 1 || span.last > source - 2) {
        throw std::runtime_error("insert span touches a boundary layer");
    }
    if (span.last + needs_ahead > source - 1) {
        throw std::runtime_error("strategy needs layer " + std::to_string(span.last) + "+" +
                                 std::to_string(needs_ahead) + " which is past the last layer");
    }

    Checkpoint out;
    out.arch = ckpt.arch;
    out.arch.n_layers = target_layers;

    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("layers.", 0) != 0) {
            out.tensors.emplace(name, t);
        }
    }

    auto emit_layer = [&](int dst, int src) {
        for (const char* suffix : kLayerSuffixes) {
            Tensor t = ckpt.at(layer_prefix(src) + suffix);
            t.name = layer_prefix(dst) + suffix;
            out.tensors.emplace(t.name, std::move(t));
        }
    };
    auto emit_synthesized = [&](int dst, int src) {
        for (const char* suffix : kLayerSuffixes) {
            const Tensor& a = ckpt.at(layer_prefix(src) + suffix);
            Tensor t = a;
            t.name = layer_prefix(dst) + suffix;
            switch (strategy) {
                case DepthStrategy::duplicate:
                    break;
                case DepthStrategy::average:
                case DepthStrategy::average_alternate: {
                    const int other = src + (strategy == DepthStrategy::average ? 1 : 2);
                    const Tensor& b = ckpt.at(layer_prefix(other) + suffix);
                    for (size_t i = 0; i < t.data.size(); ++i) {
                        t.data[i] = static_cast<float>(
                            0.5 * (static_cast<double>(a.data[i]) + static_cast<double>(b.data[i])));
                    }
                    break;
                }
                case DepthStrategy::maxpool: {
                    const Tensor& b = ckpt.at(layer_prefix(src + 1) + suffix);
                    for (size_t i = 0; i < t.data.size(); ++i) {
                        t.data[i] = std::max(a.data[i], b.data[i]);
                    }
                    break;
                }
            }
            out.tensors.emplace(t.name, std::move(t));
        }
    };

    int dst = 0;
    for (int i = 0; i < source; ++i) {
        emit_layer(dst++, i);
        if (i >= span.first && i <= span.last) emit_synthesized(dst++, i);
    }

    out.meta["stage"] = "depth_upscale";
    out.meta["strategy"] = to_string(strategy);
    out.meta["span"] = span_string(span);
    out.meta["parent"] = fingerprint(ckpt);
    out.validate();
    return out;
}

Checkpoint width_upscale(const Checkpoint& ckpt, int new_d_ff, WidthInit init) {
    ckpt.validate();
    const int old_ff = ckpt.arch.d_ff;
    const int d = ckpt.arch.d_model;
    if (new_d_ff <= old_ff) {
        throw std::runtime_error("new d_ff must exceed the current d_ff");
    }

    Checkpoint out;
    out.arch = ckpt.arch;
    out.arch.d_ff = new_d_ff;

    // Copies per source unit: unit r >= old_ff mirrors source (r - old_ff) % old_ff.
    std::vector<int> copies(static_cast<size_t>(old_ff), 0);
    for (int r = old_ff; r < new_d_ff; ++r) copies[static_cast<size_t>((r - old_ff) % old_ff)]++;

    for (const auto& [name, t] : ckpt.tensors) {
        const bool is_gate_up = name.find("mlp.gate") != std::string::npos ||
                                name.find("mlp.up") != std::string::npos;
        const bool is_down = name.find("mlp.down") != std::string::npos;
        if (is_gate_up) {
            Tensor n(name, {new_d_ff, d});
            std::copy(t.data.begin(), t.data.end(), n.data.begin());
            for (int r = old_ff; r < new_d_ff; ++r) {
                const int src = (r - old_ff) % old_ff;
                std::copy(t.data.begin() + static_cast<size_t>(src) * d,
                          t.data.begin() + static_cast<size_t>(src + 1) * d,
                          n.data.begin() + static_cast<size_t>(r) * d);
            }
            out.tensors.emplace(name, std::move(n));
        } else if (is_down) {
            Tensor n(name, {d, new_d_ff});
            for (int o = 0; o < d; ++o) {
                const float* src_row = t.data.data() + static_cast<size_t>(o) * old_ff;
                float* dst_row = n.data.data() + static_cast<size_t>(o) * new_d_ff;
                for (int f = 0; f < old_ff; ++f) {
                    dst_row[f] = init == WidthInit::zero_preserving
                                     ? src_row[f]
                                     : src_row[f] / static_cast<float>(copies[static_cast<size_t>(f)] + 1);
                }
                for (int r = old_ff; r < new_d_ff; ++r) {
                    const int src = (r - old_ff) % old_ff;
                    dst_row[r] = init == WidthInit::zero_preserving
                                     ? 0.0f
                                     : src_row[src] / static_cast<float>(copies[static_cast<size_t>(src)] + 1);
                }
            }
            out.tensors.emplace(name, std::move(n));
        } else {
            out.tensors.emplace(name, t);
        }
    }

    out.meta["stage"] = "width_upscale";
    out.meta["init"] = to_string(init);
    out.meta["new_d_ff"] = std::to_string(new_d_ff);
    out.meta["parent"] = fingerprint(ckpt);
    out.validate();
    return out;
}

Checkpoint drop_layers(const Checkpoint& ckpt, const std::vector<int>& indices) {
    ckpt.validate();
    const int source = ckpt.arch.n_layers;
    std::set<int> dropped;
    for (int i : indices) {
        if (i < 0 || i >= source) {
            throw std::runtime_error("layer index " + std::to_string(i) + " out of range");
        }
        if (!dropped.insert(i).second) {
            throw std::runtime_error("duplicate layer index " + std::to_string(i));
        }
    }
    if (static_cast<int>(dropped.size()) == source) {
        throw std::runtime_error("cannot drop all layers");
    }

    Checkpoint out;
    out.arch = ckpt.arch;
    out.arch.n_layers = source - static_cast<int>(dropped.size());

    for (const auto& [name, t] : ckpt.tensors) {
        if (name.rfind("layers.", 0) != 0) out.tensors.emplace(name, t);
    }
    int dst = 0;
    for (int i = 0; i < source; ++i) {
        if (dropped.count(i)) continue;
        for (const char* suffix : kLayerSuffixes) {
            Tensor t = ckpt.at(layer_prefix(i) + suffix);
            t.name = layer_prefix(dst) + suffix;
            out.tensors.emplace(t.name, std::move(t));
        }
        ++dst;
    }

    std::string joined;
    for (int i : dropped) {
        if (!joined.empty()) joined += ",";
        joined += std::to_string(i);
    }
    out.meta["stage"] = "drop_layers";
    out.meta["dropped"] = joined;
    out.meta["parent"] = fingerprint(ckpt);
    out.validate();
    return out;
}

}  // namespace forge15
