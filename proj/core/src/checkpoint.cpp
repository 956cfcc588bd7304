#include "forge15/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "forge15/rng.hpp"
#include "forge15/sha256.hpp"

namespace forge15 {

namespace {

constexpr char kMagic[4] = {'A', 'N', 'M', 'T'};
constexpr uint32_t kVersion = 1;
constexpr size_t kAlign = 64;

size_t align_up(size_t n) { return (n + kAlign - 1) & ~(kAlign - 1); }

void append_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t read_u32_le(const std::string& s, size_t off) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(s[off + i])) << (8 * i);
    return v;
}

uint64_t read_u64_le(const std::string& s, size_t off) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(s[off + i])) << (8 * i);
    return v;
}

void append_f32_data(std::string& out, const std::vector<float>& data) {
    if constexpr (std::endian::native == std::endian::little) {
        const size_t pos = out.size();
        out.resize(pos + data.size() * 4);
        std::memcpy(out.data() + pos, data.data(), data.size() * 4);
    } else {
        for (float f : data) append_u32_le(out, std::bit_cast<uint32_t>(f));
    }
}

uint64_t name_stream(const std::string& name) {
    // FNV-1a, so per-tensor init streams depend on the name alone.
    uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : name) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace

void Checkpoint::validate() const {
    arch.validate();
    const auto expected = expected_tensors(arch);
    for (const auto& [name, shape] : expected) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw std::runtime_error("incomplete checkpoint: missing tensor '" + name + "'");
        }
        if (it->second.shape != shape) {
            throw std::runtime_error("shape mismatch for tensor '" + name + "'");
        }
    }
    if (tensors.size() != expected.size()) {
        for (const auto& [name, t] : tensors) {
            bool known = false;
            for (const auto& [ename, eshape] : expected) {
                if (ename == name) { known = true; break; }
            }
            if (!known) {
                throw std::runtime_error("incomplete checkpoint: unexpected tensor '" + name + "'");
            }
        }
    }
    for (const auto& [name, t] : tensors) {
        if (t.name != name) {
            throw std::runtime_error("tensor key/name disagreement for '" + name + "'");
        }
        t.validate();
    }
}

Tensor& Checkpoint::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("no tensor named '" + name + "'");
    return it->second;
}

const Tensor& Checkpoint::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("no tensor named '" + name + "'");
    return it->second;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    ckpt.validate();

    nlohmann::ordered_json header;
    header["arch"] = ckpt.arch.to_json();
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
    for (const auto& [k, v] : ckpt.meta) meta[k] = v;  // std::map is already sorted
    header["meta"] = meta;

    nlohmann::ordered_json tens = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        offset = align_up(offset);
        nlohmann::ordered_json rec;
        rec["name"] = name;
        rec["shape"] = t.shape;
        rec["offset"] = offset;
        tens.push_back(std::move(rec));
        offset += t.data.size() * 4;
    }
    header["tensors"] = std::move(tens);

    const std::string header_str = header.dump();

    std::string out;
    out.reserve(16 + header_str.size() + kAlign + offset);
    out.append(kMagic, 4);
    append_u32_le(out, kVersion);
    append_u64_le(out, header_str.size());
    out.append(header_str);
    out.resize(align_up(out.size()), '\0');

    const size_t data_start = out.size();
    for (const auto& [name, t] : ckpt.tensors) {
        out.resize(data_start + align_up(out.size() - data_start), '\0');
        append_f32_data(out, t.data);
    }
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "' for writing");
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("write failed for '" + path.string() + "'");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path.string() + "'");
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw std::runtime_error("bad magic");
    }
    const uint32_t version = read_u32_le(bytes, 4);
    if (version != kVersion) {
        throw std::runtime_error("unsupported version " + std::to_string(version));
    }
    const uint64_t header_len = read_u64_le(bytes, 8);
    if (16 + header_len > bytes.size()) throw std::runtime_error("truncated payload");

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, header_len));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("corrupt header: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.arch = ModelConfig::from_json(header.at("arch"));
        for (const auto& [k, v] : header.at("meta").items()) {
            ckpt.meta[k] = v.get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("corrupt header: ") + e.what());
    }

    const size_t data_start = align_up(16 + header_len);
    if (data_start > bytes.size()) throw std::runtime_error("truncated payload");
    const size_t data_len = bytes.size() - data_start;

    if (!header.contains("tensors") || !header["tensors"].is_array()) {
        throw std::runtime_error("corrupt header: missing tensor list");
    }
    std::string prev_name;
    uint64_t expected_offset = 0;
    for (const auto& rec : header["tensors"]) {
        Tensor t;
        uint64_t offset = 0;
        try {
            t.name = rec.at("name").get<std::string>();
            t.shape = rec.at("shape").get<std::vector<int64_t>>();
            offset = rec.at("offset").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw std::runtime_error(std::string("corrupt header: ") + e.what());
        }

        if (!prev_name.empty() && !(prev_name < t.name)) {
            throw std::runtime_error("corrupt header: tensors not sorted by name at '" + t.name + "'");
        }
        prev_name = t.name;

        for (int64_t d : t.shape) {
            if (d <= 0) throw std::runtime_error("shape mismatch for tensor '" + t.name + "'");
        }
        expected_offset = align_up(expected_offset);
        if (offset != expected_offset || offset % kAlign != 0) {
            throw std::runtime_error("shape mismatch for tensor '" + t.name + "'");
        }
        const uint64_t nbytes = static_cast<uint64_t>(Tensor::numel(t.shape)) * 4;
        if (offset + nbytes > data_len) throw std::runtime_error("truncated payload");
        expected_offset = offset + nbytes;

        t.data.resize(static_cast<size_t>(nbytes / 4));
        if constexpr (std::endian::native == std::endian::little) {
            std::memcpy(t.data.data(), bytes.data() + data_start + offset, nbytes);
        } else {
            for (size_t i = 0; i < t.data.size(); ++i) {
                t.data[i] = std::bit_cast<float>(read_u32_le(bytes, data_start + offset + 4 * i));
            }
        }
        ckpt.tensors.emplace(t.name, std::move(t));
    }
    if (data_len != expected_offset) throw std::runtime_error("truncated payload");

    ckpt.validate();
    return ckpt;
}

std::string fingerprint(const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    return Sha256::hex_digest(bytes.data(), bytes.size());
}

Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Checkpoint ckpt;
    ckpt.arch = cfg;
    ckpt.meta["stage"] = "init";
    ckpt.meta["seed"] = std::to_string(seed);

    for (const auto& [name, shape] : expected_tensors(cfg)) {
        Tensor t(name, shape);
        if (name.ends_with("norm.scale")) {
            std::fill(t.data.begin(), t.data.end(), 1.0f);
        } else {
            // head.out is [d_model, vocab] and contracts dim 0; every other
            // matrix contracts its last dim.
            int64_t fan_in = shape.back();
            if (name == "head.out") fan_in = shape.front();
            const float scale = 1.0f / std::sqrt(static_cast<float>(fan_in));
            Rng rng(derive_seed(seed, name_stream(name)));
            for (float& x : t.data) x = rng.uniform_sym(scale);
        }
        ckpt.tensors.emplace(name, std::move(t));
    }
    ckpt.validate();
    return ckpt;
}

}  // namespace forge15
