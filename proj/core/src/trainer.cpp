#include "forge15/trainer.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

#include "forge15/data.hpp"
#include "forge15/jsonio.hpp"
#include "forge15/rng.hpp"

namespace forge15 {
namespace {

bool decay_exempt(const std::string& name) {
    if (name == "embed.tok") return true;
    const std::string suffix = ".scale";
    return name.size() >= suffix.size() &&
           name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void stamp_meta(Checkpoint& ckpt, const std::string& stage, const TrainConfig& config,
                const std::string& parent, const std::string& key, int64_t value) {
    ckpt.meta.clear();
    ckpt.meta["stage"] = stage;
    ckpt.meta["parent"] = parent;
    ckpt.meta["seed"] = std::to_string(config.seed);
    ckpt.meta[key] = std::to_string(value);
}

}  // namespace

void TrainConfig::validate() const {
    if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
    if (!(final_lr >= 0.0)) throw std::invalid_argument("final_lr must be non-negative");
    if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
        throw std::invalid_argument("warmup_frac must be in [0, 1)");
    }
    if (epochs < 0) throw std::invalid_argument("epochs must be non-negative");
    if (batch_samples <= 0) throw std::invalid_argument("batch_samples must be positive");
    if (seq_len <= 0) throw std::invalid_argument("seq_len must be positive");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("weight_decay must be non-negative");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
        throw std::invalid_argument("adam betas must be in [0, 1)");
    }
    if (!(adam_eps > 0.0)) throw std::invalid_argument("adam_eps must be positive");
    if (!(grad_clip >= 0.0)) throw std::invalid_argument("grad_clip must be non-negative");
    if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be non-negative");
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.base_lr = j.value("base_lr", c.base_lr);
    c.final_lr = j.value("final_lr", c.final_lr);
    c.warmup_frac = j.value("warmup_frac", c.warmup_frac);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_samples = j.value("batch_samples", c.batch_samples);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.validate();
    return c;
}

nlohmann::ordered_json TrainConfig::to_json() const {
    return {{"base_lr", base_lr},
            {"final_lr", final_lr},
            {"warmup_frac", warmup_frac},
            {"epochs", epochs},
            {"batch_samples", batch_samples},
            {"seq_len", seq_len},
            {"weight_decay", weight_decay},
            {"adam_beta1", adam_beta1},
            {"adam_beta2", adam_beta2},
            {"adam_eps", adam_eps},
            {"grad_clip", grad_clip},
            {"seed", seed},
            {"checkpoint_every", checkpoint_every}};
}

double lr_at(int64_t step, int64_t total_steps, const TrainConfig& config) {
    config.validate();
    if (total_steps <= 0) throw std::invalid_argument("total_steps must be positive");
    if (step < 0 || step > total_steps) throw std::invalid_argument("step out of range");
    const int64_t warmup = std::llround(config.warmup_frac * static_cast<double>(total_steps));
    if (step < warmup) {
        return config.base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (step == total_steps) return config.final_lr;
    if (step == warmup) return config.base_lr;
    const double frac =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return config.final_lr +
           0.5 * (config.base_lr - config.final_lr) * (1.0 + std::cos(M_PI * frac));
}

ParamMap to_master(const Checkpoint& ckpt) {
    ParamMap out;
    for (const auto& [name, tensor] : ckpt.tensors) {
        out.emplace(name, std::vector<double>(tensor.data.begin(), tensor.data.end()));
    }
    return out;
}

void write_back(const ParamMap& params, Checkpoint& ckpt) {
    for (const auto& [name, values] : params) {
        auto& data = ckpt.tensors.at(name).data;
        for (size_t i = 0; i < values.size(); ++i) data[i] = static_cast<float>(values[i]);
    }
}

void adamw_step(ParamMap& params, const GradMap& grads, AdamState& state, double lr,
                const TrainConfig& config) {
    config.validate();
    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.t));
    for (auto& [name, p] : params) {
        const auto git = grads.find(name);
        if (git == grads.end()) throw std::invalid_argument("missing gradient for '" + name + "'");
        const std::vector<double>& g = git->second;
        if (g.size() != p.size()) {
            throw std::invalid_argument("shape mismatch for tensor '" + name + "'");
        }
        for (double v : g) {
            if (!std::isfinite(v)) {
                throw std::runtime_error("non-finite gradient for '" + name + "'");
            }
        }
        auto& m = state.m[name];
        auto& v = state.v[name];
        m.resize(p.size(), 0.0);
        v.resize(p.size(), 0.0);
        const double wd = decay_exempt(name) ? 0.0 : config.weight_decay;
        for (size_t i = 0; i < p.size(); ++i) {
            m[i] = config.adam_beta1 * m[i] + (1.0 - config.adam_beta1) * g[i];
            v[i] = config.adam_beta2 * v[i] + (1.0 - config.adam_beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] = p[i] - lr * mhat / (std::sqrt(vhat) + config.adam_eps) - lr * wd * p[i];
        }
    }
}

double clip_gradients(GradMap& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
        for (double v : g) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& [name, g] : grads) {
            for (double& v : g) v *= scale;
        }
    }
    return norm;
}

TrainResult train_supervised(const Checkpoint& start, const std::vector<nlohmann::json>& rows,
                             const TrainConfig& config, const std::string& mode,
                             const std::filesystem::path& out_dir) {
    config.validate();
    if (mode != "cpt" && mode != "sft") {
        throw std::invalid_argument("unknown training mode '" + mode + "'");
    }
    std::vector<TokenBatch> rendered;
    rendered.reserve(rows.size());
    for (const auto& row : rows) {
        if (mode == "cpt") {
            rendered.push_back(render_cpt(CPTSample::from_json(row)));
        } else {
            rendered.push_back(render_chat(ChatSample::from_json(row)));
        }
    }
    if (rendered.empty()) throw std::invalid_argument("empty dataset");
    const std::vector<TokenBatch> packed = pack_sequences(rendered, config.seq_len);

    std::vector<double> row_weight(packed.size(), 0.0);  // scored positions per row
    double any_scored = 0.0;
    for (size_t i = 0; i < packed.size(); ++i) {
        row_weight[i] = static_cast<double>(loss_positions(packed[i]).size());
        any_scored += row_weight[i];
    }
    if (any_scored == 0.0) throw std::invalid_argument("empty loss mask");

    TrainResult out{start, {}};
    Checkpoint& model = out.model;
    const std::string parent = fingerprint(start);
    ParamMap master = to_master(model);
    AdamState state;

    const int64_t n_rows = static_cast<int64_t>(packed.size());
    const int64_t per_epoch = (n_rows + config.batch_samples - 1) / config.batch_samples;
    const int64_t total_steps = per_epoch * config.epochs;

    std::filesystem::create_directories(out_dir);
    int64_t step = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::vector<size_t> order(packed.size());
        std::iota(order.begin(), order.end(), size_t{0});
        Rng rng(derive_seed(config.seed, 0x45504f43ull, static_cast<uint64_t>(epoch)));
        rng.shuffle(order);

        for (int64_t b = 0; b < per_epoch; ++b) {
            const size_t lo = static_cast<size_t>(b) * config.batch_samples;
            const size_t hi = std::min(order.size(), lo + config.batch_samples);
            double m_tot = 0.0;
            for (size_t k = lo; k < hi; ++k) m_tot += row_weight[order[k]];

            GradMap grads = zero_grads(model.arch);
            double ce_sum = 0.0;
            if (m_tot > 0.0) {
                for (size_t k = lo; k < hi; ++k) {
                    const size_t idx = order[k];
                    if (row_weight[idx] == 0.0) continue;
                    double row_loss = 0.0;
                    const GradMap g = grad(model, packed[idx], &row_loss);
                    const double w = row_weight[idx] / m_tot;
                    for (const auto& [name, vec] : g) {
                        auto& acc = grads.at(name);
                        for (size_t i = 0; i < vec.size(); ++i) acc[i] += vec[i] * w;
                    }
                    ce_sum += row_loss * row_weight[idx];
                }
            }
            const double loss = m_tot > 0.0 ? ce_sum / m_tot : 0.0;
            clip_gradients(grads, config.grad_clip);
            const double lr = lr_at(step, total_steps, config);
            adamw_step(master, grads, state, lr, config);
            write_back(master, model);
            ++step;
            out.log.push_back({step, lr, loss});
            if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
                stamp_meta(model, mode, config, parent, "step", step);
                save_checkpoint(model, out_dir / ("step-" + std::to_string(step) + ".anmt"));
            }
        }
        stamp_meta(model, mode, config, parent, "epoch", epoch + 1);
        save_checkpoint(model, out_dir / ("epoch-" + std::to_string(epoch + 1) + ".anmt"));
    }

    stamp_meta(model, mode, config, parent, "step", step);
    save_checkpoint(model, out_dir / "final.anmt");
    std::vector<nlohmann::json> log_rows;
    log_rows.reserve(out.log.size());
    for (const TrainLogEntry& e : out.log) {
        log_rows.push_back({{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}});
    }
    save_jsonl(out_dir / "loss.jsonl", log_rows);
    return out;
}

}  // namespace forge15
