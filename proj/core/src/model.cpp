#include "forge15/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "forge15/rng.hpp"
#include "forge15/tokenizer.hpp"

namespace forge15 {

namespace {

// y = W x, W row-major f32 [out x in], x/y f64.
void matvec(const float* W, const double* x, double* y, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const float* row = W + static_cast<size_t>(o) * in;
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += static_cast<double>(row[i]) * x[i];
        y[o] = acc;
    }
}

// dW += dy * x^T and dx += W^T dy.
void matvec_backward(const float* W, const double* x, const double* dy,
                     double* dW, double* dx, int out, int in) {
    for (int o = 0; o < out; ++o) {
        const double g = dy[o];
        if (g == 0.0) continue;
        const float* row = W + static_cast<size_t>(o) * in;
        double* drow = dW + static_cast<size_t>(o) * in;
        for (int i = 0; i < in; ++i) {
            drow[i] += g * x[i];
            dx[i] += static_cast<double>(row[i]) * g;
        }
    }
}

double rms_inv_of(const double* x, int n, double eps) {
    double ss = 0.0;
    for (int i = 0; i < n; ++i) ss += x[i] * x[i];
    return 1.0 / std::sqrt(ss / n + eps);
}

// dx += backward of y = (x * r) .* scale given dy; also accumulates dscale.
void rmsnorm_backward(const double* x, double r, const float* scale,
                      const double* dy, double* dx, double* dscale, int n) {
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += dy[i] * static_cast<double>(scale[i]) * x[i];
    const double coef = r * r * r / n * dot;
    for (int i = 0; i < n; ++i) {
        dx[i] += static_cast<double>(scale[i]) * dy[i] * r - x[i] * coef;
        dscale[i] += dy[i] * x[i] * r;
    }
}

struct LayerW {
    const float *q, *k, *v, *o, *attn_norm, *gate, *up, *down, *mlp_norm;
};

struct ModelW {
    const float* embed;
    const float* head;
    const float* final_norm;
    std::vector<LayerW> layers;
};

ModelW view_weights(const Checkpoint& params) {
    ModelW w;
    w.embed = params.at("embed.tok").data.data();
    w.head = params.at("head.out").data.data();
    w.final_norm = params.at("final_norm.scale").data.data();
    w.layers.resize(static_cast<size_t>(params.arch.n_layers));
    for (int l = 0; l < params.arch.n_layers; ++l) {
        const std::string p = layer_prefix(l);
        LayerW& lw = w.layers[static_cast<size_t>(l)];
        lw.q = params.at(p + "attn.q").data.data();
        lw.k = params.at(p + "attn.k").data.data();
        lw.v = params.at(p + "attn.v").data.data();
        lw.o = params.at(p + "attn.o").data.data();
        lw.attn_norm = params.at(p + "attn_norm.scale").data.data();
        lw.gate = params.at(p + "mlp.gate").data.data();
        lw.up = params.at(p + "mlp.up").data.data();
        lw.down = params.at(p + "mlp.down").data.data();
        lw.mlp_norm = params.at(p + "mlp_norm.scale").data.data();
    }
    return w;
}

// cos/sin per (position, pair); pairs are (2i, 2i+1) within each head.
struct RopeTable {
    int half;
    std::vector<double> c, s;  // indexed pos * half + i

    RopeTable(int max_pos, int head_dim, double theta) : half(head_dim / 2) {
        c.resize(static_cast<size_t>(max_pos) * half);
        s.resize(static_cast<size_t>(max_pos) * half);
        for (int i = 0; i < half; ++i) {
            const double freq = std::pow(theta, -2.0 * i / head_dim);
            for (int p = 0; p < max_pos; ++p) {
                c[static_cast<size_t>(p) * half + i] = std::cos(p * freq);
                s[static_cast<size_t>(p) * half + i] = std::sin(p * freq);
            }
        }
    }

    void rotate(double* vec, int n_heads, int head_dim, int pos) const {
        const double* cp = c.data() + static_cast<size_t>(pos) * half;
        const double* sp = s.data() + static_cast<size_t>(pos) * half;
        for (int h = 0; h < n_heads; ++h) {
            double* hv = vec + h * head_dim;
            for (int i = 0; i < half; ++i) {
                const double a = hv[2 * i], b = hv[2 * i + 1];
                hv[2 * i] = a * cp[i] - b * sp[i];
                hv[2 * i + 1] = a * sp[i] + b * cp[i];
            }
        }
    }

    void rotate_back(double* vec, int n_heads, int head_dim, int pos) const {
        const double* cp = c.data() + static_cast<size_t>(pos) * half;
        const double* sp = s.data() + static_cast<size_t>(pos) * half;
        for (int h = 0; h < n_heads; ++h) {
            double* hv = vec + h * head_dim;
            for (int i = 0; i < half; ++i) {
                const double a = hv[2 * i], b = hv[2 * i + 1];
                hv[2 * i] = a * cp[i] + b * sp[i];
                hv[2 * i + 1] = -a * sp[i] + b * cp[i];
            }
        }
    }
};

std::vector<int> doc_positions(const TokenBatch& batch, std::vector<int>* run_start_out) {
    const int T = static_cast<int>(batch.size());
    std::vector<int> pos(static_cast<size_t>(T));
    std::vector<int> run_start(static_cast<size_t>(T));
    int start = 0;
    for (int t = 0; t < T; ++t) {
        if (t > 0 && batch.doc_ids[static_cast<size_t>(t)] != batch.doc_ids[static_cast<size_t>(t - 1)]) {
            start = t;
        }
        run_start[static_cast<size_t>(t)] = start;
        pos[static_cast<size_t>(t)] = t - start;
    }
    if (run_start_out) *run_start_out = std::move(run_start);
    return pos;
}

double silu(double g) { return g / (1.0 + std::exp(-g)); }

}  // namespace

void TokenBatch::validate(const ModelConfig& cfg) const {
    if (tokens.empty()) throw std::runtime_error("empty token batch");
    if (tokens.size() != doc_ids.size() || tokens.size() != loss_mask.size()) {
        throw std::runtime_error("token batch field lengths differ");
    }
    if (static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        throw std::runtime_error("sequence too long");
    }
    bool in_pad = false;
    for (size_t t = 0; t < tokens.size(); ++t) {
        if (tokens[t] < 0 || tokens[t] >= cfg.vocab_size) {
            throw std::runtime_error("out-of-range token id");
        }
        if (doc_ids[t] < -1) throw std::runtime_error("invalid doc id");
        if (doc_ids[t] == -1) {
            in_pad = true;
        } else {
            if (in_pad) throw std::runtime_error("padding must be trailing");
            if (t > 0 && doc_ids[t - 1] != -1 && doc_ids[t] < doc_ids[t - 1]) {
                throw std::runtime_error("doc_ids must be non-decreasing");
            }
        }
        if (loss_mask[t] > 1) throw std::runtime_error("loss mask entries must be 0/1");
    }
}

GradMap zero_grads(const ModelConfig& cfg) {
    GradMap g;
    for (const auto& [name, shape] : expected_tensors(cfg)) {
        g.emplace(name, std::vector<double>(static_cast<size_t>(Tensor::numel(shape)), 0.0));
    }
    return g;
}

std::vector<double> forward(const Checkpoint& params, const TokenBatch& batch,
                            ForwardTrace* trace) {
    const ModelConfig& cfg = params.arch;
    batch.validate(cfg);

    const int T = static_cast<int>(batch.size());
    const int D = cfg.d_model;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int F = cfg.d_ff;
    const double eps = cfg.norm_eps;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const ModelW w = view_weights(params);
    std::vector<int> run_start;
    const std::vector<int> pos = doc_positions(batch, &run_start);
    const RopeTable rope(T, hd, cfg.rope_theta);

    if (trace) {
        trace->layers.assign(static_cast<size_t>(cfg.n_layers), LayerTrace{});
        trace->positions = pos;
    }

    std::vector<double> x(static_cast<size_t>(T) * D);
    for (int t = 0; t < T; ++t) {
        const float* row = w.embed + static_cast<size_t>(batch.tokens[static_cast<size_t>(t)]) * D;
        for (int i = 0; i < D; ++i) x[static_cast<size_t>(t) * D + i] = row[i];
    }

    std::vector<double> normed(static_cast<size_t>(T) * D);
    std::vector<double> q(static_cast<size_t>(T) * D), k(q), v(q), ctx(q), attn_out(q);
    std::vector<double> gate_pre(static_cast<size_t>(T) * F), up_out(gate_pre), hidden(gate_pre);
    std::vector<double> scores(static_cast<size_t>(T));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerW& lw = w.layers[static_cast<size_t>(l)];
        LayerTrace* lt = trace ? &trace->layers[static_cast<size_t>(l)] : nullptr;
        if (lt) {
            lt->x_in = x;
            lt->attn_rms_inv.resize(static_cast<size_t>(T));
            lt->probs.assign(static_cast<size_t>(H) * T * T, 0.0);
        }

        // Attention block.
        for (int t = 0; t < T; ++t) {
            double* nx = normed.data() + static_cast<size_t>(t) * D;
            const double* xt = x.data() + static_cast<size_t>(t) * D;
            const double r = rms_inv_of(xt, D, eps);
            if (lt) lt->attn_rms_inv[static_cast<size_t>(t)] = r;
            for (int i = 0; i < D; ++i) nx[i] = xt[i] * r * static_cast<double>(lw.attn_norm[i]);

            matvec(lw.q, nx, q.data() + static_cast<size_t>(t) * D, D, D);
            matvec(lw.k, nx, k.data() + static_cast<size_t>(t) * D, D, D);
            matvec(lw.v, nx, v.data() + static_cast<size_t>(t) * D, D, D);
            rope.rotate(q.data() + static_cast<size_t>(t) * D, H, hd, pos[static_cast<size_t>(t)]);
            rope.rotate(k.data() + static_cast<size_t>(t) * D, H, hd, pos[static_cast<size_t>(t)]);
        }
        if (lt) {
            lt->attn_normed = normed;
            lt->q = q;
            lt->k = k;
            lt->v = v;
        }

        for (int t = 0; t < T; ++t) {
            const int j0 = run_start[static_cast<size_t>(t)];
            for (int h = 0; h < H; ++h) {
                const double* qh = q.data() + static_cast<size_t>(t) * D + h * hd;
                double mx = -1e300;
                for (int j = j0; j <= t; ++j) {
                    const double* kh = k.data() + static_cast<size_t>(j) * D + h * hd;
                    double s = 0.0;
                    for (int i = 0; i < hd; ++i) s += qh[i] * kh[i];
                    s *= att_scale;
                    scores[static_cast<size_t>(j)] = s;
                    mx = std::max(mx, s);
                }
                double denom = 0.0;
                for (int j = j0; j <= t; ++j) {
                    scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                    denom += scores[static_cast<size_t>(j)];
                }
                double* ch = ctx.data() + static_cast<size_t>(t) * D + h * hd;
                std::fill(ch, ch + hd, 0.0);
                for (int j = j0; j <= t; ++j) {
                    const double p = scores[static_cast<size_t>(j)] / denom;
                    if (lt) {
                        lt->probs[(static_cast<size_t>(h) * T + t) * T + j] = p;
                    }
                    const double* vh = v.data() + static_cast<size_t>(j) * D + h * hd;
                    for (int i = 0; i < hd; ++i) ch[i] += p * vh[i];
                }
            }
        }
        if (lt) lt->ctx = ctx;

        for (int t = 0; t < T; ++t) {
            matvec(lw.o, ctx.data() + static_cast<size_t>(t) * D,
                   attn_out.data() + static_cast<size_t>(t) * D, D, D);
            for (int i = 0; i < D; ++i) x[static_cast<size_t>(t) * D + i] += attn_out[static_cast<size_t>(t) * D + i];
        }
        if (lt) {
            lt->x_mid = x;
            lt->mlp_rms_inv.resize(static_cast<size_t>(T));
        }

        // Gated MLP block.
        for (int t = 0; t < T; ++t) {
            double* nx = normed.data() + static_cast<size_t>(t) * D;
            const double* xt = x.data() + static_cast<size_t>(t) * D;
            const double r = rms_inv_of(xt, D, eps);
            if (lt) lt->mlp_rms_inv[static_cast<size_t>(t)] = r;
            for (int i = 0; i < D; ++i) nx[i] = xt[i] * r * static_cast<double>(lw.mlp_norm[i]);

            double* gp = gate_pre.data() + static_cast<size_t>(t) * F;
            double* uo = up_out.data() + static_cast<size_t>(t) * F;
            double* hh = hidden.data() + static_cast<size_t>(t) * F;
            matvec(lw.gate, nx, gp, F, D);
            matvec(lw.up, nx, uo, F, D);
            for (int f = 0; f < F; ++f) hh[f] = silu(gp[f]) * uo[f];

            // down projection straight into the residual stream
            double* xt_mut = x.data() + static_cast<size_t>(t) * D;
            for (int o = 0; o < D; ++o) {
                const float* row = lw.down + static_cast<size_t>(o) * F;
                double acc = 0.0;
                for (int f = 0; f < F; ++f) acc += static_cast<double>(row[f]) * hh[f];
                xt_mut[o] += acc;
            }
        }
        if (lt) {
            lt->mlp_normed = normed;
            lt->gate_pre = gate_pre;
            lt->up_out = up_out;
            lt->hidden = hidden;
        }
    }

    if (trace) {
        trace->x_final = x;
        trace->final_rms_inv.resize(static_cast<size_t>(T));
        trace->final_normed.resize(static_cast<size_t>(T) * D);
    }

    std::vector<double> logits(static_cast<size_t>(T) * V, 0.0);
    std::vector<double> fn(static_cast<size_t>(D));
    for (int t = 0; t < T; ++t) {
        const double* xt = x.data() + static_cast<size_t>(t) * D;
        const double r = rms_inv_of(xt, D, eps);
        for (int i = 0; i < D; ++i) fn[static_cast<size_t>(i)] = xt[i] * r * static_cast<double>(w.final_norm[i]);
        if (trace) {
            trace->final_rms_inv[static_cast<size_t>(t)] = r;
            std::copy(fn.begin(), fn.end(), trace->final_normed.begin() + static_cast<size_t>(t) * D);
        }
        double* lrow = logits.data() + static_cast<size_t>(t) * V;
        for (int d = 0; d < D; ++d) {
            const float* hrow = w.head + static_cast<size_t>(d) * V;
            const double hv = fn[static_cast<size_t>(d)];
            for (int vv = 0; vv < V; ++vv) lrow[vv] += hv * static_cast<double>(hrow[vv]);
        }
    }

    for (double lv : logits) {
        if (!std::isfinite(lv)) throw std::runtime_error("non-finite logits");
    }
    return logits;
}

// Positions whose token is scored: loss_mask == 1 and an in-document
// predecessor exists. The logits row used is the predecessor's.
std::vector<int> loss_positions(const TokenBatch& batch) {
    std::vector<int> out;
    for (size_t t = 1; t < batch.size(); ++t) {
        if (batch.loss_mask[t] == 1 && batch.doc_ids[t] != -1 &&
            batch.doc_ids[t] == batch.doc_ids[t - 1]) {
            out.push_back(static_cast<int>(t));
        }
    }
    return out;
}

double lm_loss(const std::vector<double>& logits, const TokenBatch& batch) {
    const int T = static_cast<int>(batch.size());
    if (T == 0 || logits.size() % static_cast<size_t>(T) != 0) {
        throw std::runtime_error("logits/batch size mismatch");
    }
    const int V = static_cast<int>(logits.size() / static_cast<size_t>(T));
    const std::vector<int> targets = loss_positions(batch);
    if (targets.empty()) throw std::runtime_error("empty loss mask");

    double total = 0.0;
    for (int t : targets) {
        const double* row = logits.data() + static_cast<size_t>(t - 1) * V;
        double mx = row[0];
        for (int vv = 1; vv < V; ++vv) mx = std::max(mx, row[vv]);
        double denom = 0.0;
        for (int vv = 0; vv < V; ++vv) denom += std::exp(row[vv] - mx);
        const double lp = row[batch.tokens[static_cast<size_t>(t)]] - mx - std::log(denom);
        total -= lp;
    }
    return total / static_cast<double>(targets.size());
}

void backward(const Checkpoint& params, const TokenBatch& batch,
              const ForwardTrace& trace, const std::vector<double>& dlogits,
              GradMap& grads) {
    const ModelConfig& cfg = params.arch;
    const int T = static_cast<int>(batch.size());
    const int D = cfg.d_model;
    const int V = cfg.vocab_size;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int F = cfg.d_ff;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));

    if (dlogits.size() != static_cast<size_t>(T) * V) {
        throw std::runtime_error("dlogits size mismatch");
    }

    const ModelW w = view_weights(params);
    std::vector<int> run_start;
    doc_positions(batch, &run_start);
    const std::vector<int>& pos = trace.positions;
    const RopeTable rope(T, hd, cfg.rope_theta);

    double* g_embed = grads.at("embed.tok").data();
    double* g_head = grads.at("head.out").data();
    double* g_fnorm = grads.at("final_norm.scale").data();

    // Head and final norm.
    std::vector<double> dx(static_cast<size_t>(T) * D, 0.0);
    {
        std::vector<double> dfn(static_cast<size_t>(D));
        for (int t = 0; t < T; ++t) {
            const double* drow = dlogits.data() + static_cast<size_t>(t) * V;
            const double* fn = trace.final_normed.data() + static_cast<size_t>(t) * D;
            std::fill(dfn.begin(), dfn.end(), 0.0);
            for (int d = 0; d < D; ++d) {
                const float* hrow = w.head + static_cast<size_t>(d) * V;
                double* ghrow = g_head + static_cast<size_t>(d) * V;
                const double fv = fn[d];
                double acc = 0.0;
                for (int vv = 0; vv < V; ++vv) {
                    ghrow[vv] += fv * drow[vv];
                    acc += static_cast<double>(hrow[vv]) * drow[vv];
                }
                dfn[static_cast<size_t>(d)] = acc;
            }
            rmsnorm_backward(trace.x_final.data() + static_cast<size_t>(t) * D,
                             trace.final_rms_inv[static_cast<size_t>(t)], w.final_norm,
                             dfn.data(), dx.data() + static_cast<size_t>(t) * D, g_fnorm, D);
        }
    }

    std::vector<double> dmid(static_cast<size_t>(T) * D);
    std::vector<double> dnormed(static_cast<size_t>(T) * D);
    std::vector<double> dq(static_cast<size_t>(T) * D), dk(dq), dv(dq), dctx(dq);
    std::vector<double> dgate(static_cast<size_t>(T) * F), dup(dgate), dhidden(dgate);

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerW& lw = w.layers[static_cast<size_t>(l)];
        const LayerTrace& lt = trace.layers[static_cast<size_t>(l)];
        const std::string p = layer_prefix(l);
        double* g_q = grads.at(p + "attn.q").data();
        double* g_k = grads.at(p + "attn.k").data();
        double* g_v = grads.at(p + "attn.v").data();
        double* g_o = grads.at(p + "attn.o").data();
        double* g_anorm = grads.at(p + "attn_norm.scale").data();
        double* g_gate = grads.at(p + "mlp.gate").data();
        double* g_up = grads.at(p + "mlp.up").data();
        double* g_down = grads.at(p + "mlp.down").data();
        double* g_mnorm = grads.at(p + "mlp_norm.scale").data();

        // MLP backward: dx holds d(loss)/d(x_out).
        std::copy(dx.begin(), dx.end(), dmid.begin());
        std::fill(dnormed.begin(), dnormed.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            const double* dxt = dx.data() + static_cast<size_t>(t) * D;
            const double* hh = lt.hidden.data() + static_cast<size_t>(t) * F;
            double* dh = dhidden.data() + static_cast<size_t>(t) * F;
            std::fill(dh, dh + F, 0.0);
            for (int o = 0; o < D; ++o) {
                const double g = dxt[o];
                if (g == 0.0) continue;
                const float* row = lw.down + static_cast<size_t>(o) * F;
                double* drow = g_down + static_cast<size_t>(o) * F;
                for (int f = 0; f < F; ++f) {
                    drow[f] += g * hh[f];
                    dh[f] += static_cast<double>(row[f]) * g;
                }
            }
            const double* gp = lt.gate_pre.data() + static_cast<size_t>(t) * F;
            const double* uo = lt.up_out.data() + static_cast<size_t>(t) * F;
            double* dg = dgate.data() + static_cast<size_t>(t) * F;
            double* du = dup.data() + static_cast<size_t>(t) * F;
            for (int f = 0; f < F; ++f) {
                const double sig = 1.0 / (1.0 + std::exp(-gp[f]));
                const double si = gp[f] * sig;
                dg[f] = dh[f] * uo[f] * sig * (1.0 + gp[f] * (1.0 - sig));
                du[f] = dh[f] * si;
            }
            const double* n2 = lt.mlp_normed.data() + static_cast<size_t>(t) * D;
            double* dn2 = dnormed.data() + static_cast<size_t>(t) * D;
            matvec_backward(lw.gate, n2, dg, g_gate, dn2, F, D);
            matvec_backward(lw.up, n2, du, g_up, dn2, F, D);
            rmsnorm_backward(lt.x_mid.data() + static_cast<size_t>(t) * D,
                             lt.mlp_rms_inv[static_cast<size_t>(t)], lw.mlp_norm, dn2,
                             dmid.data() + static_cast<size_t>(t) * D, g_mnorm, D);
        }

        // Attention backward: dmid holds d(loss)/d(x_mid).
        std::copy(dmid.begin(), dmid.end(), dx.begin());  // residual into x_in
        std::fill(dctx.begin(), dctx.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            matvec_backward(lw.o, lt.ctx.data() + static_cast<size_t>(t) * D,
                            dmid.data() + static_cast<size_t>(t) * D, g_o,
                            dctx.data() + static_cast<size_t>(t) * D, D, D);
        }

        std::fill(dq.begin(), dq.end(), 0.0);
        std::fill(dk.begin(), dk.end(), 0.0);
        std::fill(dv.begin(), dv.end(), 0.0);
        std::vector<double> dp(static_cast<size_t>(T));
        for (int t = 0; t < T; ++t) {
            const int j0 = run_start[static_cast<size_t>(t)];
            for (int h = 0; h < H; ++h) {
                const double* dch = dctx.data() + static_cast<size_t>(t) * D + h * hd;
                const double* prow = lt.probs.data() + (static_cast<size_t>(h) * T + t) * T;
                double dsum = 0.0;
                for (int j = j0; j <= t; ++j) {
                    const double* vh = lt.v.data() + static_cast<size_t>(j) * D + h * hd;
                    double acc = 0.0;
                    for (int i = 0; i < hd; ++i) acc += dch[i] * vh[i];
                    dp[static_cast<size_t>(j)] = acc;
                    dsum += prow[j] * acc;
                    double* dvh = dv.data() + static_cast<size_t>(j) * D + h * hd;
                    const double pj = prow[j];
                    for (int i = 0; i < hd; ++i) dvh[i] += pj * dch[i];
                }
                const double* qh = lt.q.data() + static_cast<size_t>(t) * D + h * hd;
                double* dqh = dq.data() + static_cast<size_t>(t) * D + h * hd;
                for (int j = j0; j <= t; ++j) {
                    const double ds = prow[j] * (dp[static_cast<size_t>(j)] - dsum) * att_scale;
                    if (ds == 0.0) continue;
                    const double* kh = lt.k.data() + static_cast<size_t>(j) * D + h * hd;
                    double* dkh = dk.data() + static_cast<size_t>(j) * D + h * hd;
                    for (int i = 0; i < hd; ++i) {
                        dqh[i] += ds * kh[i];
                        dkh[i] += ds * qh[i];
                    }
                }
            }
        }

        std::fill(dnormed.begin(), dnormed.end(), 0.0);
        for (int t = 0; t < T; ++t) {
            rope.rotate_back(dq.data() + static_cast<size_t>(t) * D, H, hd, pos[static_cast<size_t>(t)]);
            rope.rotate_back(dk.data() + static_cast<size_t>(t) * D, H, hd, pos[static_cast<size_t>(t)]);
            const double* n1 = lt.attn_normed.data() + static_cast<size_t>(t) * D;
            double* dn1 = dnormed.data() + static_cast<size_t>(t) * D;
            matvec_backward(lw.q, n1, dq.data() + static_cast<size_t>(t) * D, g_q, dn1, D, D);
            matvec_backward(lw.k, n1, dk.data() + static_cast<size_t>(t) * D, g_k, dn1, D, D);
            matvec_backward(lw.v, n1, dv.data() + static_cast<size_t>(t) * D, g_v, dn1, D, D);
            rmsnorm_backward(lt.x_in.data() + static_cast<size_t>(t) * D,
                             lt.attn_rms_inv[static_cast<size_t>(t)], lw.attn_norm, dn1,
                             dx.data() + static_cast<size_t>(t) * D, g_anorm, D);
        }
    }

    for (int t = 0; t < T; ++t) {
        double* grow = g_embed + static_cast<size_t>(batch.tokens[static_cast<size_t>(t)]) * D;
        const double* dxt = dx.data() + static_cast<size_t>(t) * D;
        for (int i = 0; i < D; ++i) grow[i] += dxt[i];
    }
}

GradMap grad(const Checkpoint& params, const TokenBatch& batch, double* loss_out) {
    const ModelConfig& cfg = params.arch;
    ForwardTrace trace;
    const std::vector<double> logits = forward(params, batch, &trace);
    const int T = static_cast<int>(batch.size());
    const int V = cfg.vocab_size;

    const std::vector<int> targets = loss_positions(batch);
    if (targets.empty()) throw std::runtime_error("empty loss mask");
    const double inv_m = 1.0 / static_cast<double>(targets.size());

    double total = 0.0;
    std::vector<double> dlogits(static_cast<size_t>(T) * V, 0.0);
    for (int t : targets) {
        const double* row = logits.data() + static_cast<size_t>(t - 1) * V;
        double* drow = dlogits.data() + static_cast<size_t>(t - 1) * V;
        double mx = row[0];
        for (int vv = 1; vv < V; ++vv) mx = std::max(mx, row[vv]);
        double denom = 0.0;
        for (int vv = 0; vv < V; ++vv) denom += std::exp(row[vv] - mx);
        const int target = batch.tokens[static_cast<size_t>(t)];
        total -= row[target] - mx - std::log(denom);
        for (int vv = 0; vv < V; ++vv) {
            drow[vv] += std::exp(row[vv] - mx) / denom * inv_m;
        }
        drow[target] -= inv_m;
    }

    GradMap grads = zero_grads(cfg);
    backward(params, batch, trace, dlogits, grads);
    if (loss_out) *loss_out = total * inv_m;
    return grads;
}

std::vector<double> log_softmax_rows(const std::vector<double>& logits, int vocab) {
    std::vector<double> out(logits.size());
    const size_t rows = logits.size() / static_cast<size_t>(vocab);
    for (size_t t = 0; t < rows; ++t) {
        const double* row = logits.data() + t * vocab;
        double* orow = out.data() + t * vocab;
        double mx = row[0];
        for (int vv = 1; vv < vocab; ++vv) mx = std::max(mx, row[vv]);
        double denom = 0.0;
        for (int vv = 0; vv < vocab; ++vv) denom += std::exp(row[vv] - mx);
        const double lse = mx + std::log(denom);
        for (int vv = 0; vv < vocab; ++vv) orow[vv] = row[vv] - lse;
    }
    return out;
}

namespace {

// Incremental decoding state: cached rotated keys and values per layer.
struct KvCache {
    int capacity = 0;
    int length = 0;
    std::vector<std::vector<double>> k, v;  // per layer, capacity x D

    KvCache(const ModelConfig& cfg, int cap) : capacity(cap) {
        k.assign(static_cast<size_t>(cfg.n_layers),
                 std::vector<double>(static_cast<size_t>(cap) * cfg.d_model));
        v = k;
    }
};

// Forward one token at position `cache.length`, append its k/v, return logits.
std::vector<double> step_token(const ModelW& w, const ModelConfig& cfg, const RopeTable& rope,
                               KvCache& cache, int token) {
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int hd = cfg.head_dim();
    const int F = cfg.d_ff;
    const int V = cfg.vocab_size;
    const double eps = cfg.norm_eps;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const int t = cache.length;

    std::vector<double> x(static_cast<size_t>(D));
    const float* erow = w.embed + static_cast<size_t>(token) * D;
    for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] = erow[i];

    std::vector<double> normed(static_cast<size_t>(D));
    std::vector<double> q(static_cast<size_t>(D)), ctx(static_cast<size_t>(D)), tmp(static_cast<size_t>(D));
    std::vector<double> gp(static_cast<size_t>(F)), uo(static_cast<size_t>(F));
    std::vector<double> scores(static_cast<size_t>(t + 1));

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerW& lw = w.layers[static_cast<size_t>(l)];
        double* kc = cache.k[static_cast<size_t>(l)].data() + static_cast<size_t>(t) * D;
        double* vc = cache.v[static_cast<size_t>(l)].data() + static_cast<size_t>(t) * D;

        const double r = rms_inv_of(x.data(), D, eps);
        for (int i = 0; i < D; ++i) normed[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] * r * static_cast<double>(lw.attn_norm[i]);
        matvec(lw.q, normed.data(), q.data(), D, D);
        matvec(lw.k, normed.data(), kc, D, D);
        matvec(lw.v, normed.data(), vc, D, D);
        rope.rotate(q.data(), H, hd, t);
        rope.rotate(kc, H, hd, t);

        const std::vector<double>& kl = cache.k[static_cast<size_t>(l)];
        const std::vector<double>& vl = cache.v[static_cast<size_t>(l)];
        for (int h = 0; h < H; ++h) {
            const double* qh = q.data() + h * hd;
            double mx = -1e300;
            for (int j = 0; j <= t; ++j) {
                const double* kh = kl.data() + static_cast<size_t>(j) * D + h * hd;
                double s = 0.0;
                for (int i = 0; i < hd; ++i) s += qh[i] * kh[i];
                s *= att_scale;
                scores[static_cast<size_t>(j)] = s;
                mx = std::max(mx, s);
            }
            double denom = 0.0;
            for (int j = 0; j <= t; ++j) {
                scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
                denom += scores[static_cast<size_t>(j)];
            }
            double* ch = ctx.data() + h * hd;
            std::fill(ch, ch + hd, 0.0);
            for (int j = 0; j <= t; ++j) {
                const double p = scores[static_cast<size_t>(j)] / denom;
                const double* vh = vl.data() + static_cast<size_t>(j) * D + h * hd;
                for (int i = 0; i < hd; ++i) ch[i] += p * vh[i];
            }
        }
        matvec(lw.o, ctx.data(), tmp.data(), D, D);
        for (int i = 0; i < D; ++i) x[static_cast<size_t>(i)] += tmp[static_cast<size_t>(i)];

        const double r2 = rms_inv_of(x.data(), D, eps);
        for (int i = 0; i < D; ++i) normed[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] * r2 * static_cast<double>(lw.mlp_norm[i]);
        matvec(lw.gate, normed.data(), gp.data(), F, D);
        matvec(lw.up, normed.data(), uo.data(), F, D);
        for (int f = 0; f < F; ++f) gp[static_cast<size_t>(f)] = silu(gp[static_cast<size_t>(f)]) * uo[static_cast<size_t>(f)];
        for (int o = 0; o < D; ++o) {
            const float* row = lw.down + static_cast<size_t>(o) * F;
            double acc = 0.0;
            for (int f = 0; f < F; ++f) acc += static_cast<double>(row[f]) * gp[static_cast<size_t>(f)];
            x[static_cast<size_t>(o)] += acc;
        }
    }
    cache.length = t + 1;

    const double rf = rms_inv_of(x.data(), D, eps);
    for (int i = 0; i < D; ++i) normed[static_cast<size_t>(i)] = x[static_cast<size_t>(i)] * rf * static_cast<double>(w.final_norm[i]);
    std::vector<double> logits(static_cast<size_t>(V), 0.0);
    for (int d = 0; d < D; ++d) {
        const float* hrow = w.head + static_cast<size_t>(d) * V;
        const double hv = normed[static_cast<size_t>(d)];
        for (int vv = 0; vv < V; ++vv) logits[static_cast<size_t>(vv)] += hv * static_cast<double>(hrow[vv]);
    }
    return logits;
}

}  // namespace

std::vector<std::pair<int, double>> nucleus_distribution(
    const std::vector<double>& probs, double top_p) {
    if (!(top_p > 0.0) || top_p > 1.0) throw std::runtime_error("invalid top_p");
    std::vector<int> order(probs.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (probs[static_cast<size_t>(a)] != probs[static_cast<size_t>(b)]) {
            return probs[static_cast<size_t>(a)] > probs[static_cast<size_t>(b)];
        }
        return a < b;
    });

    size_t kept = order.size();
    double cum = 0.0;
    for (size_t i = 0; i < order.size(); ++i) {
        cum += probs[static_cast<size_t>(order[i])];
        if (cum >= top_p) {
            kept = i + 1;
            break;
        }
    }

    std::vector<std::pair<int, double>> out;
    out.reserve(kept);
    for (size_t i = 0; i < kept; ++i) {
        out.emplace_back(order[i], probs[static_cast<size_t>(order[i])] / cum);
    }
    return out;
}

SampleResult sample(const Checkpoint& params, const std::vector<int>& prompt,
                    double temperature, double top_p, int max_new, uint64_t seed) {
    const ModelConfig& cfg = params.arch;
    if (prompt.empty()) throw std::runtime_error("empty prompt");
    if (!(temperature > 0.0)) throw std::runtime_error("invalid temperature");
    if (!(top_p > 0.0) || top_p > 1.0) throw std::runtime_error("invalid top_p");
    for (int t : prompt) {
        if (t < 0 || t >= cfg.vocab_size) throw std::runtime_error("out-of-range token id");
    }
    if (static_cast<int>(prompt.size()) >= cfg.max_seq_len) {
        throw std::runtime_error("sequence too long");
    }

    const ModelW w = view_weights(params);
    const RopeTable rope(cfg.max_seq_len, cfg.head_dim(), cfg.rope_theta);
    KvCache cache(cfg, cfg.max_seq_len);
    Rng rng(seed);

    std::vector<double> logits;
    for (int t : prompt) logits = step_token(w, cfg, rope, cache, t);

    const int V = cfg.vocab_size;
    const int budget = std::min(max_new, cfg.max_seq_len - static_cast<int>(prompt.size()));

    SampleResult res;
    std::vector<double> probs(static_cast<size_t>(V));
    for (int n = 0; n < budget; ++n) {
        // Raw temperature-1 logprobs are what gets reported.
        double mx = logits[0];
        for (int vv = 1; vv < V; ++vv) mx = std::max(mx, logits[static_cast<size_t>(vv)]);
        double raw_denom = 0.0;
        for (int vv = 0; vv < V; ++vv) raw_denom += std::exp(logits[static_cast<size_t>(vv)] - mx);
        const double raw_lse = mx + std::log(raw_denom);

        const double tmx = mx / temperature;
        double denom = 0.0;
        for (int vv = 0; vv < V; ++vv) {
            probs[static_cast<size_t>(vv)] = std::exp(logits[static_cast<size_t>(vv)] / temperature - tmx);
            denom += probs[static_cast<size_t>(vv)];
        }
        for (int vv = 0; vv < V; ++vv) probs[static_cast<size_t>(vv)] /= denom;

        const auto dist = nucleus_distribution(probs, top_p);
        const double u = rng.next_unit();
        int choice = dist.back().first;
        double walk = 0.0;
        for (const auto& [id, p] : dist) {
            walk += p;
            if (u < walk) {
                choice = id;
                break;
            }
        }

        res.tokens.push_back(choice);
        res.logprobs.push_back(logits[static_cast<size_t>(choice)] - raw_lse);
        if (choice == tok::EOS) break;
        if (n + 1 < budget) logits = step_token(w, cfg, rope, cache, choice);
    }
    return res;
}

std::vector<double> sequence_logprobs(const Checkpoint& params,
                                      const std::vector<int>& tokens,
                                      int prompt_len) {
    if (prompt_len < 1) throw std::runtime_error("prompt_len must be at least 1");
    if (prompt_len >= static_cast<int>(tokens.size())) {
        throw std::runtime_error("prompt_len must be less than the token count");
    }
    TokenBatch batch;
    batch.tokens = tokens;
    batch.doc_ids.assign(tokens.size(), 0);
    batch.loss_mask.assign(tokens.size(), 0);

    const std::vector<double> logits = forward(params, batch);
    const int V = params.arch.vocab_size;

    std::vector<double> out;
    out.reserve(tokens.size() - static_cast<size_t>(prompt_len));
    for (size_t t = static_cast<size_t>(prompt_len); t < tokens.size(); ++t) {
        const double* row = logits.data() + (t - 1) * static_cast<size_t>(V);
        double mx = row[0];
        for (int vv = 1; vv < V; ++vv) mx = std::max(mx, row[vv]);
        double denom = 0.0;
        for (int vv = 0; vv < V; ++vv) denom += std::exp(row[vv] - mx);
        out.push_back(row[tokens[t]] - mx - std::log(denom));
    }
    return out;
}

}  // namespace forge15
