#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "forge15/checkpoint.hpp"

namespace forge15 {

// One (possibly packed) training row. doc_ids mark document membership so
// attention can be restricted to within-document positions; -1 marks padding.
// loss_mask picks the target positions the loss is averaged over.
struct TokenBatch {
    std::vector<int> tokens;
    std::vector<int> doc_ids;
    std::vector<uint8_t> loss_mask;

    size_t size() const { return tokens.size(); }
    void validate(const ModelConfig& cfg) const;
};

// Named f64 gradient buffers, shapes mirroring the checkpoint tensors.
using GradMap = std::map<std::string, std::vector<double>>;

GradMap zero_grads(const ModelConfig& cfg);

// Activations cached by forward() for the manual backward pass.
struct LayerTrace {
    std::vector<double> x_in;        // T x D residual stream entering the layer
    std::vector<double> attn_normed; // T x D
    std::vector<double> attn_rms_inv;// T
    std::vector<double> q, k, v;     // T x D (q, k post-rotation)
    std::vector<double> probs;       // H x T x T attention weights
    std::vector<double> ctx;         // T x D concatenated head outputs
    std::vector<double> x_mid;       // T x D residual after attention
    std::vector<double> mlp_normed;  // T x D
    std::vector<double> mlp_rms_inv; // T
    std::vector<double> gate_pre;    // T x F
    std::vector<double> up_out;      // T x F
    std::vector<double> hidden;      // T x F silu(gate) * up
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    std::vector<double> x_final;       // T x D input to final norm
    std::vector<double> final_normed;  // T x D
    std::vector<double> final_rms_inv; // T
    std::vector<int> positions;        // document-relative position per token
};

// Causal, document-masked forward pass. Returns logits [T x vocab] row-major
// (f64; weights stay f32, all arithmetic runs in f64). When `trace` is given
// the activations needed by backward() are recorded.
std::vector<double> forward(const Checkpoint& params, const TokenBatch& batch,
                            ForwardTrace* trace = nullptr);

// Positions scored by lm_loss: loss_mask 1, not padding, and a predecessor
// in the same document (position t is predicted from logits row t-1).
std::vector<int> loss_positions(const TokenBatch& batch);

// Mean next-token cross-entropy over positions with loss_mask == 1. A masked
// position contributes the logprob of its own token given the previous
// position of the same document; positions with no in-document predecessor
// are skipped. Throws "empty loss mask" when nothing contributes.
double lm_loss(const std::vector<double>& logits, const TokenBatch& batch);

// Propagates d(loss)/d(logits) back to every parameter tensor, accumulating
// into `grads` (so multiple rows can share one gradient buffer).
void backward(const Checkpoint& params, const TokenBatch& batch,
              const ForwardTrace& trace, const std::vector<double>& dlogits,
              GradMap& grads);

// Exact gradient of lm_loss. Returns the loss through `loss_out` if set.
GradMap grad(const Checkpoint& params, const TokenBatch& batch,
             double* loss_out = nullptr);

struct SampleResult {
    std::vector<int> tokens;       // completion only; includes EOS if emitted
    std::vector<double> logprobs;  // raw (temperature-1) model logprob per token
};

// The nucleus rule on its own: sort probabilities descending (ties broken by
// ascending id), keep the smallest prefix with cumulative mass >= top_p,
// renormalize. Returned pairs are (token id, prob) in that sorted order.
std::vector<std::pair<int, double>> nucleus_distribution(
    const std::vector<double>& probs, double top_p);

// Nucleus sampling: softmax of logits/temperature filtered through
// nucleus_distribution, then one rng draw per emitted token. Deterministic
// for a given seed. Stops at EOS or after max_new tokens.
SampleResult sample(const Checkpoint& params, const std::vector<int>& prompt,
                    double temperature, double top_p, int max_new, uint64_t seed);

// Teacher-forced logprob of tokens[prompt_len..] given their prefixes
// (single document). Matches the logprobs reported by sample().
std::vector<double> sequence_logprobs(const Checkpoint& params,
                                      const std::vector<int>& tokens,
                                      int prompt_len);

// Row-wise log-softmax of [T x V] logits, f64.
std::vector<double> log_softmax_rows(const std::vector<double>& logits, int vocab);

}  // namespace forge15
