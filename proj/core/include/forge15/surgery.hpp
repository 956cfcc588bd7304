#pragma once

#include <optional>
#include <string>
#include <vector>

#include "forge15/checkpoint.hpp"

namespace forge15 {

enum class DepthStrategy { duplicate, average, maxpool, average_alternate };

DepthStrategy depth_strategy_from_string(const std::string& s);
std::string to_string(DepthStrategy s);

enum class WidthInit { zero_preserving, duplicate_halved };

WidthInit width_init_from_string(const std::string& s);
std::string to_string(WidthInit w);

// Inclusive range of source layer indices. After emitting source layer i in
// the span, a synthesized layer derived from position i is inserted.
struct LayerSpan {
    int first = 0;
    int last = 0;
};

// Grow the layer stack to target_layers. Synthesized layer at position i:
// duplicate = L[i]; average = (L[i]+L[i+1])/2; maxpool = max(L[i], L[i+1]);
// average_alternate = (L[i]+L[i+2])/2. Default span is a centered block of
// size target_layers - source layers.
Checkpoint depth_upscale(const Checkpoint& ckpt, int target_layers, DepthStrategy strategy,
                         std::optional<LayerSpan> insert_span = std::nullopt);

// Widen the MLP intermediate dimension. zero_preserving adds cyclically
// copied gate/up rows with zeroed down columns (function preserved exactly);
// duplicate_halved copies units and splits each source's down column evenly
// across the source and its copies.
Checkpoint width_upscale(const Checkpoint& ckpt, int new_d_ff, WidthInit init);

// Remove the given layers and re-index the survivors contiguously.
Checkpoint drop_layers(const Checkpoint& ckpt, const std::vector<int>& indices);

}  // namespace forge15
