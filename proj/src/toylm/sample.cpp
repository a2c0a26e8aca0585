#include "immlab/errors.hpp"
#include "immlab/toylm.hpp"

#include "ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace immlab::lm {

namespace {

// Keys and values of every layer for one sequence being decoded.
struct KvCache {
    std::vector<std::vector<float>> k;
    std::vector<std::vector<float>> v;
};

struct Row {
    std::size_t seq;
    std::size_t pos;
    TokenId token;
};

// Runs the rows through the network, appending their keys/values to the
// caches, and returns logits [rows x V]. Rows of one sequence must appear in
// ascending position order and every earlier position must already be cached
// or present in `rows`.
std::vector<float> decode_rows(const Params<float>& p, std::vector<KvCache>& caches,
                               const std::vector<Row>& rows) {
    const ModelConfig& cfg = p.cfg;
    const std::size_t B = rows.size();
    const std::size_t d = cfg.d_model;
    const std::size_t F = cfg.d_ff;
    const std::size_t hd = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    std::vector<float> x(B * d);
    for (std::size_t r = 0; r < B; ++r) {
        const auto tok = static_cast<std::size_t>(rows[r].token);
        for (std::size_t j = 0; j < d; ++j) {
            x[r * d + j] = static_cast<float>(static_cast<double>(p.embed[tok * d + j]) +
                                              ops::position_code(rows[r].pos, j, d));
        }
    }
    std::vector<float> n(B * d), q(B * d), k(B * d), v(B * d), attn(B * d), tmp(B * d);
    std::vector<float> h(B * F), probs(cfg.max_seq_len);
    std::vector<double> scratch;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const BlockParams<float>& b = p.blocks[l];
        ops::layernorm_rows<float>(x.data(), b.norm1.data(), n.data(), nullptr, nullptr, B, d);
        kernels::matmul(n.data(), b.wq.data(), q.data(), B, d, d);
        kernels::matmul(n.data(), b.wk.data(), k.data(), B, d, d);
        kernels::matmul(n.data(), b.wv.data(), v.data(), B, d, d);
        for (std::size_t r = 0; r < B; ++r) {
            auto& c = caches[rows[r].seq];
            std::copy_n(k.data() + r * d, d, c.k[l].data() + rows[r].pos * d);
            std::copy_n(v.data() + r * d, d, c.v[l].data() + rows[r].pos * d);
        }
        for (std::size_t r = 0; r < B; ++r) {
            const auto& c = caches[rows[r].seq];
            for (std::size_t hh = 0; hh < cfg.n_heads; ++hh) {
                ops::attend_row(q.data() + r * d + hh * hd, c.k[l].data() + hh * hd,
                                c.v[l].data() + hh * hd, rows[r].pos + 1, d, hd, scale, probs.data(),
                                attn.data() + r * d + hh * hd, scratch);
            }
        }
        kernels::matmul(attn.data(), b.wo.data(), tmp.data(), B, d, d);
        ops::add_into(x.data(), tmp.data(), B * d);
        ops::layernorm_rows<float>(x.data(), b.norm2.data(), n.data(), nullptr, nullptr, B, d);
        kernels::matmul(n.data(), b.w1.data(), h.data(), B, d, F);
        for (auto& e : h) {
            e = static_cast<float>(ops::gelu(static_cast<double>(e)));
        }
        kernels::matmul(h.data(), b.w2.data(), tmp.data(), B, F, d);
        ops::add_into(x.data(), tmp.data(), B * d);
    }
    ops::layernorm_rows<float>(x.data(), p.norm_f.data(), n.data(), nullptr, nullptr, B, d);
    std::vector<float> logits(B * cfg.vocab_size);
    kernels::matmul(n.data(), p.head.data(), logits.data(), B, d, cfg.vocab_size);
    return logits;
}

constexpr std::size_t kDecodeGroup = 64;

} // namespace

TokenId pick_token(std::span<const float> logits, double temperature, SeededStream& stream) {
    if (!(temperature >= 0.0)) {
        throw ConfigError("temperature must be nonnegative");
    }
    if (temperature == 0.0) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i) {
            if (logits[i] > logits[best]) {
                best = i;
            }
        }
        return static_cast<TokenId>(best);
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (float z : logits) {
        mx = std::max(mx, static_cast<double>(z) / temperature);
    }
    std::vector<double> w(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        w[i] = std::exp(static_cast<double>(logits[i]) / temperature - mx);
        sum += w[i];
    }
    const double u = stream.next_uniform() * sum;
    double cum = 0.0;
    std::size_t last_nonzero = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] > 0.0) {
            last_nonzero = i;
        }
        cum += w[i];
        if (u < cum) {
            return static_cast<TokenId>(i);
        }
    }
    return static_cast<TokenId>(last_nonzero);
}

std::vector<std::vector<TokenId>> sample_batch(const Params<float>& model,
                                               std::span<const SampleRequest> requests) {
    const ModelConfig& cfg = model.cfg;
    for (const auto& r : requests) {
        if (r.prompt.empty()) {
            throw DataError("cannot sample from an empty prompt");
        }
        if (r.prompt.size() >= cfg.max_seq_len) {
            throw DataError("prompt of " + std::to_string(r.prompt.size()) +
                            " tokens overflows the context of " + std::to_string(cfg.max_seq_len));
        }
        if (!(r.temperature >= 0.0)) {
            throw ConfigError("temperature must be nonnegative");
        }
        for (TokenId t : r.prompt) {
            if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
                throw DataError("prompt token id " + std::to_string(t) + " is out of range");
            }
        }
    }

    std::vector<std::vector<TokenId>> out(requests.size());
    const std::size_t V = cfg.vocab_size;
    for (std::size_t g0 = 0; g0 < requests.size(); g0 += kDecodeGroup) {
        const std::size_t G = std::min(kDecodeGroup, requests.size() - g0);
        std::vector<KvCache> caches(G);
        std::vector<SeededStream> streams;
        std::vector<Row> rows;
        std::vector<std::size_t> last_row(G);
        for (std::size_t s = 0; s < G; ++s) {
            caches[s].k.assign(cfg.n_layers, std::vector<float>(cfg.max_seq_len * cfg.d_model));
            caches[s].v.assign(cfg.n_layers, std::vector<float>(cfg.max_seq_len * cfg.d_model));
            streams.emplace_back(requests[g0 + s].seed);
            const auto& prompt = requests[g0 + s].prompt;
            for (std::size_t i = 0; i < prompt.size(); ++i) {
                rows.push_back({s, i, prompt[i]});
            }
            last_row[s] = rows.size() - 1;
        }
        std::vector<float> logits = decode_rows(model, caches, rows);
        std::vector<bool> done(G, false);
        std::vector<std::size_t> length(G);
        for (std::size_t s = 0; s < G; ++s) {
            length[s] = requests[g0 + s].prompt.size();
            if (requests[g0 + s].max_new_tokens == 0) {
                done[s] = true;
            }
        }
        while (true) {
            std::vector<Row> next;
            std::vector<std::size_t> next_row(G);
            for (std::size_t s = 0; s < G; ++s) {
                if (done[s]) {
                    continue;
                }
                const auto& req = requests[g0 + s];
                const std::span<const float> row(logits.data() + last_row[s] * V, V);
                const TokenId tok = pick_token(row, req.temperature, streams[s]);
                if (tok == tasks::kEos) {
                    done[s] = true;
                    continue;
                }
                out[g0 + s].push_back(tok);
                if (out[g0 + s].size() >= req.max_new_tokens || length[s] + 1 >= cfg.max_seq_len) {
                    done[s] = true;
                    continue;
                }
                next_row[s] = next.size();
                next.push_back({s, length[s], tok});
                ++length[s];
            }
            if (next.empty()) {
                break;
            }
            logits = decode_rows(model, caches, next);
            last_row = next_row;
        }
    }
    return out;
}

std::vector<TokenId> sample_completion(const Checkpoint& model, std::span<const TokenId> prompt,
                                       const SampleConfig& scfg) {
    if (scfg.max_new_tokens == 0) {
        throw ConfigError("max_new_tokens must be positive");
    }
    const auto p = params_from_checkpoint<float>(model);
    SampleRequest req{std::vector<TokenId>(prompt.begin(), prompt.end()), scfg.temperature,
                      scfg.max_new_tokens, scfg.seed};
    return sample_batch(p, std::span<const SampleRequest>(&req, 1)).front();
}

} // namespace immlab::lm
