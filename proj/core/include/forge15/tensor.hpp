#pragma once

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace forge15 {

// One named weight: row-major f32 data plus its shape.
struct Tensor {
    std::string name;
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::string n, std::vector<int64_t> s)
        : name(std::move(n)), shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel(shape)), 0.0f);
    }

    static int64_t numel(const std::vector<int64_t>& shape) {
        int64_t n = 1;
        for (int64_t d : shape) n *= d;
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }

    void validate() const {
        if (name.empty()) throw std::runtime_error("tensor has empty name");
        if (shape.empty()) throw std::runtime_error("tensor '" + name + "' has empty shape");
        for (int64_t d : shape) {
            if (d <= 0) throw std::runtime_error("tensor '" + name + "' has non-positive dim");
        }
        if (numel(shape) != static_cast<int64_t>(data.size())) {
            throw std::runtime_error("tensor '" + name + "' shape/data size mismatch");
        }
    }
};

}  // namespace forge15
