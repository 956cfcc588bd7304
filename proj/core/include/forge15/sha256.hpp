#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>

namespace forge15 {

// Incremental SHA-256 (FIPS 180-4). Dependency-free so checkpoint
// fingerprints stay identical on every platform the library builds on.
class Sha256 {
public:
    Sha256();

    void update(const void* data, size_t len);
    std::array<uint8_t, 32> finish();

    static std::string hex_digest(const void* data, size_t len);

private:
    void process_block(const uint8_t* block);

    std::array<uint32_t, 8> state_;
    std::array<uint8_t, 64> buffer_;
    size_t buffered_ = 0;
    uint64_t total_bytes_ = 0;
};

std::string to_hex(const std::array<uint8_t, 32>& digest);

}  // namespace forge15
