#pragma once

#include <filesystem>
#include <vector>

#include "forge15/checkpoint.hpp"

namespace forge15 {

// Weighted elementwise sum of checkpoints. Inputs are accumulated in f64 in
// fingerprint order (ties broken by weight), which makes the result bit-exact
// under paired permutation of (ckpts, weights). Weights must be positive and
// sum to 1 within 1e-9.
Checkpoint linear_merge(const std::vector<Checkpoint>& ckpts,
                        const std::vector<double>& weights);

// Equal-weight merge of k checkpoints picked at indices round(i*(M-1)/(k-1))
// from the step-{N}.anmt files in `dir`, sorted by step.
Checkpoint average_equally_spaced(const std::filesystem::path& dir, int k);

// The file-picking rule on its own, exposed for direct testing.
std::vector<size_t> equally_spaced_indices(size_t available, int k);

}  // namespace forge15
