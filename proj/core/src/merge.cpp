#include "forge15/merge.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace forge15 {

namespace {

// Names the first tensor whose presence or shape differs between a and b, or
// an empty string when the tensor sets agree.
std::string first_tensor_difference(const Checkpoint& a, const Checkpoint& b) {
    auto ia = a.tensors.begin();
    auto ib = b.tensors.begin();
    while (ia != a.tensors.end() || ib != b.tensors.end()) {
        if (ia == a.tensors.end()) return ib->first;
        if (ib == b.tensors.end()) return ia->first;
        if (ia->first != ib->first) return std::min(ia->first, ib->first);
        if (ia->second.shape != ib->second.shape) return ia->first;
        ++ia;
        ++ib;
    }
    return "";
}

}  // namespace

Checkpoint linear_merge(const std::vector<Checkpoint>& ckpts,
                        const std::vector<double>& weights) {
    if (ckpts.size() < 2) throw std::runtime_error("need at least 2 checkpoints to merge");
    if (ckpts.size() != weights.size()) {
        throw std::runtime_error("got " + std::to_string(ckpts.size()) + " checkpoints but " +
                                 std::to_string(weights.size()) + " weights");
    }
    double sum = 0.0;
    for (double w : weights) {
        if (!(w > 0.0)) throw std::runtime_error("merge weights must be positive");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-9) {
        std::ostringstream msg;
        msg << "weights sum " << sum << " \xE2\x89\xA0 1";
        throw std::runtime_error(msg.str());
    }

    for (const Checkpoint& c : ckpts) c.validate();
    for (size_t i = 1; i < ckpts.size(); ++i) {
        if (!(ckpts[i].arch == ckpts[0].arch)) {
            const std::string tensor = first_tensor_difference(ckpts[0], ckpts[i]);
            throw std::runtime_error("arch mismatch: " +
                                     (tensor.empty() ? "model config" : "tensor '" + tensor + "'"));
        }
    }

    // Fingerprint-sorted accumulation order; ties (identical checkpoints)
    // fall back to the weight so paired permutations stay bit-exact.
    std::vector<size_t> order(ckpts.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<std::string> prints(ckpts.size());
    for (size_t i = 0; i < ckpts.size(); ++i) prints[i] = fingerprint(ckpts[i]);
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
        if (prints[x] != prints[y]) return prints[x] < prints[y];
        return weights[x] < weights[y];
    });

    Checkpoint out;
    out.arch = ckpts[0].arch;
    for (const auto& [name, t0] : ckpts[0].tensors) {
        Tensor t(name, t0.shape);
        std::vector<double> acc(t.data.size(), 0.0);
        for (size_t idx : order) {
            const Tensor& src = ckpts[idx].at(name);
            const double w = weights[idx];
            for (size_t i = 0; i < acc.size(); ++i) {
                acc[i] += w * static_cast<double>(src.data[i]);
            }
        }
        for (size_t i = 0; i < acc.size(); ++i) t.data[i] = static_cast<float>(acc[i]);
        out.tensors.emplace(name, std::move(t));
    }

    std::string parents, wlist;
    for (size_t idx : order) {
        if (!parents.empty()) {
            parents += ",";
            wlist += ",";
        }
        parents += prints[idx];
        std::ostringstream w;
        w << weights[idx];
        wlist += w.str();
    }
    out.meta["stage"] = "merge";
    out.meta["parents"] = parents;
    out.meta["weights"] = wlist;
    out.validate();
    return out;
}

std::vector<size_t> equally_spaced_indices(size_t available, int k) {
    if (k < 2) throw std::runtime_error("k must be at least 2");
    if (available < static_cast<size_t>(k)) {
        throw std::runtime_error("found " + std::to_string(available) +
                                 " step checkpoints, need at least " + std::to_string(k));
    }
    std::vector<size_t> out;
    out.reserve(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) {
        out.push_back(static_cast<size_t>(std::llround(
            static_cast<double>(i) * static_cast<double>(available - 1) / (k - 1))));
    }
    return out;
}

Checkpoint average_equally_spaced(const std::filesystem::path& dir, int k) {
    std::vector<std::pair<long long, std::filesystem::path>> steps;
    if (std::filesystem::is_directory(dir)) {
        for (const auto& entry : std::filesystem::directory_iterator(dir)) {
            const std::string fname = entry.path().filename().string();
            if (fname.rfind("step-", 0) != 0 || fname.size() <= 10 ||
                fname.substr(fname.size() - 5) != ".anmt") {
                continue;
            }
            const std::string num = fname.substr(5, fname.size() - 10);
            if (num.empty() || num.find_first_not_of("0123456789") != std::string::npos) continue;
            steps.emplace_back(std::stoll(num), entry.path());
        }
    } else {
        throw std::runtime_error("'" + dir.string() + "' is not a directory");
    }
    std::sort(steps.begin(), steps.end());

    const std::vector<size_t> picks = equally_spaced_indices(steps.size(), k);
    std::vector<Checkpoint> ckpts;
    ckpts.reserve(picks.size());
    std::string sources;
    for (size_t idx : picks) {
        ckpts.push_back(load_checkpoint(steps[idx].second));
        if (!sources.empty()) sources += ",";
        sources += steps[idx].second.filename().string();
    }
    Checkpoint out = linear_merge(ckpts, std::vector<double>(picks.size(), 1.0 / k));
    out.meta["stage"] = "avg_checkpoints";
    out.meta["sources"] = sources;
    return out;
}

}  // namespace forge15
