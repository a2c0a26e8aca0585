#include "immlab/errors.hpp"
#include "immlab/toylm.hpp"

#include "ops.hpp"

#include <cmath>
#include <limits>

namespace immlab::lm {

namespace {

struct Layout {
    std::vector<std::size_t> offset;
    std::vector<std::size_t> length;
    std::vector<std::size_t> prob_offset;
    std::size_t rows = 0;
    std::size_t prob_size = 0;
};

Layout make_layout(std::span<const Sequence> batch, const ModelConfig& cfg) {
    Layout lay;
    for (const auto& s : batch) {
        const std::size_t L = s.tokens.size();
        if (L == 0) {
            throw DataError("empty token sequence");
        }
        if (L > cfg.max_seq_len) {
            throw DataError("sequence of length " + std::to_string(L) + " exceeds max_seq_len " +
                            std::to_string(cfg.max_seq_len));
        }
        if (s.loss_mask.size() != L) {
            throw DataError("loss mask length differs from token count");
        }
        for (TokenId t : s.tokens) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
                throw DataError("token id " + std::to_string(t) + " is out of range");
            }
        }
        lay.offset.push_back(lay.rows);
        lay.length.push_back(L);
        lay.prob_offset.push_back(lay.prob_size);
        lay.rows += L;
        lay.prob_size += cfg.n_heads * L * L;
    }
    return lay;
}

template <class T>
struct LayerCache {
    std::vector<T> x_in, xhat1, n1, q, k, v, probs, attn, x1, xhat2, n2, h, g;
    std::vector<double> rstd1, rstd2;
};

template <class T>
struct Pass {
    const Params<T>& p;
    const ModelConfig& cfg;
    std::span<const Sequence> batch;
    const Layout& lay;
    std::vector<LayerCache<T>> layers;
    std::vector<T> x;      // residual stream [R x d]
    std::vector<T> xhatf, nf, logits;
    std::vector<double> rstdf;

    Pass(const Params<T>& params, std::span<const Sequence> b, const Layout& l, bool keep_all)
        : p(params), cfg(params.cfg), batch(b), lay(l), layers(keep_all ? cfg.n_layers : 1) {}

    void embed() {
        const std::size_t d = cfg.d_model;
        x.assign(lay.rows * d, T(0));
        for (std::size_t s = 0; s < batch.size(); ++s) {
            for (std::size_t i = 0; i < lay.length[s]; ++i) {
                const auto tok = static_cast<std::size_t>(batch[s].tokens[i]);
                T* row = x.data() + (lay.offset[s] + i) * d;
                for (std::size_t j = 0; j < d; ++j) {
                    row[j] = static_cast<T>(static_cast<double>(p.embed[tok * d + j]) +
                                            ops::position_code(i, j, d));
                }
            }
        }
    }

    void block_forward(std::size_t l, LayerCache<T>& c) {
        const BlockParams<T>& b = p.blocks[l];
        const std::size_t R = lay.rows;
        const std::size_t d = cfg.d_model;
        const std::size_t F = cfg.d_ff;
        const std::size_t H = cfg.n_heads;
        const std::size_t hd = cfg.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

        c.x_in = x;
        c.xhat1.resize(R * d);
        c.n1.resize(R * d);
        c.rstd1.resize(R);
        ops::layernorm_rows(x.data(), b.norm1.data(), c.n1.data(), c.xhat1.data(), c.rstd1.data(), R, d);
        c.q.resize(R * d);
        c.k.resize(R * d);
        c.v.resize(R * d);
        kernels::matmul(c.n1.data(), b.wq.data(), c.q.data(), R, d, d);
        kernels::matmul(c.n1.data(), b.wk.data(), c.k.data(), R, d, d);
        kernels::matmul(c.n1.data(), b.wv.data(), c.v.data(), R, d, d);

        c.probs.assign(lay.prob_size, T(0));
        c.attn.assign(R * d, T(0));
        std::vector<double> scratch;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const std::size_t off = lay.offset[s];
            const std::size_t L = lay.length[s];
            for (std::size_t h = 0; h < H; ++h) {
                T* P = c.probs.data() + lay.prob_offset[s] + h * L * L;
                const T* keys = c.k.data() + off * d + h * hd;
                const T* vals = c.v.data() + off * d + h * hd;
                for (std::size_t i = 0; i < L; ++i) {
                    ops::attend_row(c.q.data() + (off + i) * d + h * hd, keys, vals, i + 1, d, hd,
                                    scale, P + i * L, c.attn.data() + (off + i) * d + h * hd,
                                    scratch);
                }
            }
        }

        std::vector<T> tmp(R * d);
        kernels::matmul(c.attn.data(), b.wo.data(), tmp.data(), R, d, d);
        c.x1 = c.x_in;
        ops::add_into(c.x1.data(), tmp.data(), R * d);

        c.xhat2.resize(R * d);
        c.n2.resize(R * d);
        c.rstd2.resize(R);
        ops::layernorm_rows(c.x1.data(), b.norm2.data(), c.n2.data(), c.xhat2.data(), c.rstd2.data(), R, d);
        c.h.resize(R * F);
        c.g.resize(R * F);
        kernels::matmul(c.n2.data(), b.w1.data(), c.h.data(), R, d, F);
        for (std::size_t i = 0; i < R * F; ++i) {
            c.g[i] = static_cast<T>(ops::gelu(static_cast<double>(c.h[i])));
        }
        kernels::matmul(c.g.data(), b.w2.data(), tmp.data(), R, F, d);
        x = c.x1;
        ops::add_into(x.data(), tmp.data(), R * d);
    }

    void forward() {
        embed();
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            block_forward(l, layers.size() == 1 ? layers[0] : layers[l]);
        }
        const std::size_t R = lay.rows;
        const std::size_t d = cfg.d_model;
        xhatf.resize(R * d);
        nf.resize(R * d);
        rstdf.resize(R);
        ops::layernorm_rows(x.data(), p.norm_f.data(), nf.data(), xhatf.data(), rstdf.data(), R, d);
        logits.resize(R * cfg.vocab_size);
        kernels::matmul(nf.data(), p.head.data(), logits.data(), R, d, cfg.vocab_size);
    }

    // Sum of target losses; fills dlogits = grad_scale * d(sum)/d(logits).
    double loss(double grad_scale, std::vector<T>* dlogits) const {
        const std::size_t V = cfg.vocab_size;
        if (dlogits) {
            dlogits->assign(lay.rows * V, T(0));
        }
        double total = 0.0;
        std::vector<double> prob(V);
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const auto& seq = batch[s];
            for (std::size_t i = 0; i + 1 < lay.length[s]; ++i) {
                if (!seq.loss_mask[i + 1]) {
                    continue;
                }
                const auto target = static_cast<std::size_t>(seq.tokens[i + 1]);
                const std::size_t r = lay.offset[s] + i;
                const T* lr = logits.data() + r * V;
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t v = 0; v < V; ++v) {
                    mx = std::max(mx, static_cast<double>(lr[v]));
                }
                double sum = 0.0;
                for (std::size_t v = 0; v < V; ++v) {
                    prob[v] = std::exp(static_cast<double>(lr[v]) - mx);
                    sum += prob[v];
                }
                total += std::log(sum) + mx - static_cast<double>(lr[target]);
                if (dlogits) {
                    T* dr = dlogits->data() + r * V;
                    for (std::size_t v = 0; v < V; ++v) {
                        const double pv = prob[v] / sum - (v == target ? 1.0 : 0.0);
                        dr[v] = static_cast<T>(pv * grad_scale);
                    }
                }
            }
        }
        return total;
    }

    void attention_backward(const LayerCache<T>& c, const std::vector<T>& dattn, std::vector<T>& dq,
                            std::vector<T>& dk, std::vector<T>& dv) const {
        const std::size_t d = cfg.d_model;
        const std::size_t H = cfg.n_heads;
        const std::size_t hd = cfg.head_dim();
        const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
        dq.assign(lay.rows * d, T(0));
        dk.assign(lay.rows * d, T(0));
        dv.assign(lay.rows * d, T(0));
        std::vector<double> gq, gk, gv, dp;
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const std::size_t off = lay.offset[s];
            const std::size_t L = lay.length[s];
            for (std::size_t h = 0; h < H; ++h) {
                const T* P = c.probs.data() + lay.prob_offset[s] + h * L * L;
                gq.assign(L * hd, 0.0);
                gk.assign(L * hd, 0.0);
                gv.assign(L * hd, 0.0);
                dp.resize(L);
                auto at = [&](const std::vector<T>& m, std::size_t i) {
                    return m.data() + (off + i) * d + h * hd;
                };
                for (std::size_t i = 0; i < L; ++i) {
                    const T* doi = at(dattn, i);
                    double rowdot = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        const T* vj = at(c.v, j);
                        double s_ = 0.0;
                        for (std::size_t t = 0; t < hd; ++t) {
                            s_ += static_cast<double>(doi[t]) * static_cast<double>(vj[t]);
                        }
                        dp[j] = s_;
                        const double pij = static_cast<double>(P[i * L + j]);
                        rowdot += pij * s_;
                        for (std::size_t t = 0; t < hd; ++t) {
                            gv[j * hd + t] += pij * static_cast<double>(doi[t]);
                        }
                    }
                    const T* qi = at(c.q, i);
                    for (std::size_t j = 0; j <= i; ++j) {
                        const double ds = static_cast<double>(P[i * L + j]) * (dp[j] - rowdot) * scale;
                        const T* kj = at(c.k, j);
                        for (std::size_t t = 0; t < hd; ++t) {
                            gq[i * hd + t] += ds * static_cast<double>(kj[t]);
                            gk[j * hd + t] += ds * static_cast<double>(qi[t]);
                        }
                    }
                }
                for (std::size_t i = 0; i < L; ++i) {
                    T* q_out = dq.data() + (off + i) * d + h * hd;
                    T* k_out = dk.data() + (off + i) * d + h * hd;
                    T* v_out = dv.data() + (off + i) * d + h * hd;
                    for (std::size_t t = 0; t < hd; ++t) {
                        q_out[t] = static_cast<T>(gq[i * hd + t]);
                        k_out[t] = static_cast<T>(gk[i * hd + t]);
                        v_out[t] = static_cast<T>(gv[i * hd + t]);
                    }
                }
            }
        }
    }

    // dx: gradient w.r.t. the block output on entry, block input on exit.
    void block_backward(std::size_t l, std::vector<T>& dx, BlockParams<double>& g) const {
        const LayerCache<T>& c = layers[l];
        const BlockParams<T>& b = p.blocks[l];
        const std::size_t R = lay.rows;
        const std::size_t d = cfg.d_model;
        const std::size_t F = cfg.d_ff;

        // MLP branch
        kernels::matmul_tn_accumulate(c.g.data(), dx.data(), g.w2.data(), R, F, d);
        std::vector<T> dh(R * F);
        kernels::matmul_nt(dx.data(), b.w2.data(), dh.data(), R, d, F);
        for (std::size_t i = 0; i < R * F; ++i) {
            dh[i] = static_cast<T>(static_cast<double>(dh[i]) * ops::gelu_grad(static_cast<double>(c.h[i])));
        }
        kernels::matmul_tn_accumulate(c.n2.data(), dh.data(), g.w1.data(), R, d, F);
        std::vector<T> dn(R * d);
        kernels::matmul_nt(dh.data(), b.w1.data(), dn.data(), R, F, d);
        ops::layernorm_backward(dn.data(), c.xhat2.data(), c.rstd2.data(), b.norm2.data(), dx.data(),
                                g.norm2.data(), R, d);

        // attention branch
        kernels::matmul_tn_accumulate(c.attn.data(), dx.data(), g.wo.data(), R, d, d);
        std::vector<T> dattn(R * d);
        kernels::matmul_nt(dx.data(), b.wo.data(), dattn.data(), R, d, d);
        std::vector<T> dq, dk, dv;
        attention_backward(c, dattn, dq, dk, dv);
        kernels::matmul_tn_accumulate(c.n1.data(), dq.data(), g.wq.data(), R, d, d);
        kernels::matmul_tn_accumulate(c.n1.data(), dk.data(), g.wk.data(), R, d, d);
        kernels::matmul_tn_accumulate(c.n1.data(), dv.data(), g.wv.data(), R, d, d);
        std::vector<T> part(R * d);
        kernels::matmul_nt(dq.data(), b.wq.data(), dn.data(), R, d, d);
        kernels::matmul_nt(dk.data(), b.wk.data(), part.data(), R, d, d);
        ops::add_into(dn.data(), part.data(), R * d);
        kernels::matmul_nt(dv.data(), b.wv.data(), part.data(), R, d, d);
        ops::add_into(dn.data(), part.data(), R * d);
        ops::layernorm_backward(dn.data(), c.xhat1.data(), c.rstd1.data(), b.norm1.data(), dx.data(),
                                g.norm1.data(), R, d);
    }

    void backward(const std::vector<T>& dlogits, Params<double>& g) const {
        const std::size_t R = lay.rows;
        const std::size_t d = cfg.d_model;
        const std::size_t V = cfg.vocab_size;
        kernels::matmul_tn_accumulate(nf.data(), dlogits.data(), g.head.data(), R, d, V);
        std::vector<T> dnf(R * d);
        kernels::matmul_nt(dlogits.data(), p.head.data(), dnf.data(), R, V, d);
        std::vector<T> dx(R * d, T(0));
        ops::layernorm_backward(dnf.data(), xhatf.data(), rstdf.data(), p.norm_f.data(), dx.data(),
                                g.norm_f.data(), R, d);
        for (std::size_t l = cfg.n_layers; l-- > 0;) {
            block_backward(l, dx, g.blocks[l]);
        }
        for (std::size_t s = 0; s < batch.size(); ++s) {
            for (std::size_t i = 0; i < lay.length[s]; ++i) {
                const auto tok = static_cast<std::size_t>(batch[s].tokens[i]);
                const T* row = dx.data() + (lay.offset[s] + i) * d;
                double* dst = g.embed.data() + tok * d;
                for (std::size_t j = 0; j < d; ++j) {
                    dst[j] += static_cast<double>(row[j]);
                }
            }
        }
    }
};

} // namespace

std::size_t count_targets(std::span<const Sequence> batch) {
    std::size_t n = 0;
    for (const auto& s : batch) {
        for (std::size_t i = 1; i < s.loss_mask.size(); ++i) {
            n += s.loss_mask[i] ? 1 : 0;
        }
    }
    return n;
}

template <class T>
double loss_and_grads(const Params<T>& p, std::span<const Sequence> batch, double grad_scale,
                      Params<double>* grads) {
    if (batch.empty()) {
        return 0.0;
    }
    const Layout lay = make_layout(batch, p.cfg);
    Pass<T> pass(p, batch, lay, grads != nullptr);
    pass.forward();
    if (!grads) {
        return pass.loss(grad_scale, nullptr);
    }
    std::vector<T> dlogits;
    const double total = pass.loss(grad_scale, &dlogits);
    pass.backward(dlogits, *grads);
    return total;
}

template double loss_and_grads<float>(const Params<float>&, std::span<const Sequence>, double,
                                      Params<double>*);
template double loss_and_grads<double>(const Params<double>&, std::span<const Sequence>, double,
                                       Params<double>*);

template <class T>
std::vector<T> forward_logits(const Params<T>& p, std::span<const TokenId> tokens) {
    Sequence seq;
    seq.tokens.assign(tokens.begin(), tokens.end());
    seq.loss_mask.assign(tokens.size(), 0);
    const std::span<const Sequence> batch(&seq, 1);
    const Layout lay = make_layout(batch, p.cfg);
    Pass<T> pass(p, batch, lay, false);
    pass.forward();
    return pass.logits;
}

template std::vector<float> forward_logits<float>(const Params<float>&, std::span<const TokenId>);
template std::vector<double> forward_logits<double>(const Params<double>&, std::span<const TokenId>);

Tensor forward(const Checkpoint& model, std::span<const TokenId> tokens) {
    const auto p = params_from_checkpoint<float>(model);
    auto logits = forward_logits(p, tokens);
    Tensor out({tokens.size(), p.cfg.vocab_size}, std::move(logits));
    require_finite(out, "logits");
    return out;
}

LossAndGrads sft_loss_and_grads(const Checkpoint& model, std::span<const Sequence> batch) {
    const std::size_t n = count_targets(batch);
    if (n == 0) {
        throw DataError("batch has no unmasked target positions");
    }
    const auto p = params_from_checkpoint<float>(model);
    auto grads = Params<double>::zeros(p.cfg);
    const double scale = 1.0 / static_cast<double>(n);
    const double total = loss_and_grads(p, batch, scale, &grads);
    LossAndGrads out;
    out.loss = total * scale;
    out.grads = grads_to_delta(grads);
    for (const auto& [name, t] : out.grads.tensors) {
        for (double v : t.values) {
            if (!std::isfinite(v)) {
                throw NumericError("gradient of '" + name + "' is not finite");
            }
        }
    }
    return out;
}

double mean_loss(const Params<float>& p, std::span<const Sequence> batch) {
    const std::size_t n = count_targets(batch);
    if (n == 0) {
        throw DataError("batch has no unmasked target positions");
    }
    return loss_and_grads<float>(p, batch, 1.0, nullptr) / static_cast<double>(n);
}

} // namespace immlab::lm
