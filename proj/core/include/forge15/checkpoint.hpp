#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "forge15/model_config.hpp"
#include "forge15/tensor.hpp"

namespace forge15 {

// The unit that surgery, merging, and training operate on. Immutable by
// convention once handed to another stage; meta carries provenance (stage,
// seed, parent fingerprints) so merge graphs can be audited afterwards.
struct Checkpoint {
    ModelConfig arch;
    std::map<std::string, Tensor> tensors;  // ascending by name
    std::map<std::string, std::string> meta;

    // Enforces the structural invariant: tensor set exactly matches the set
    // demanded by arch, with the right shapes. Throws on violation.
    void validate() const;

    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
};

// ANMT: magic "ANMT" | version u32 LE | header_len u64 LE | JSON header |
// zero pad to 64 | raw f32 LE tensor data, offsets 64-byte aligned relative
// to the data section start. Serialization is a pure function of the value.
std::string serialize_checkpoint(const Checkpoint& ckpt);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// SHA-256 hex of the canonical serialized bytes.
std::string fingerprint(const Checkpoint& ckpt);

// Fresh randomly initialized checkpoint. Uniform fan-in scaled weights and
// unit norm scales; bit-reproducible for a given (cfg, seed).
Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed);

}  // namespace forge15
