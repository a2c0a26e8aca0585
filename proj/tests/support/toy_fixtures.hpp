#pragma once

// Tiny toy-model instances and a central-difference gradient shared by the
// unit and acceptance suites.

#include "immlab/analysis.hpp"
#include "immlab/checkpoint.hpp"
#include "immlab/tasks.hpp"
#include "immlab/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace toyfix {

inline immlab::lm::ModelConfig tiny_config() {
    immlab::lm::ModelConfig cfg;
    cfg.vocab_size = 32;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_seq_len = 8;
    return cfg;
}

// Tiny model with room for short arithmetic pairs.
inline immlab::lm::ModelConfig tiny_task_config() {
    auto cfg = tiny_config();
    cfg.max_seq_len = 40;
    return cfg;
}

// Random length-`len` token sequences; position 0 is never a target and every
// sequence has at least one target.
inline std::vector<immlab::lm::Sequence> random_batch(const immlab::lm::ModelConfig& cfg, std::size_t n,
                                                      std::size_t len, std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> tok(0, static_cast<int>(cfg.vocab_size) - 1);
    std::bernoulli_distribution mask(0.6);
    std::vector<immlab::lm::Sequence> out(n);
    for (auto& s : out) {
        for (std::size_t i = 0; i < len; ++i) {
            s.tokens.push_back(tok(gen));
            s.loss_mask.push_back(i > 0 && mask(gen) ? 1 : 0);
        }
        s.loss_mask[len - 1] = 1;
    }
    return out;
}

// Flattened parameter values in for_each order.
template <class T>
std::vector<T*> flat_refs(immlab::lm::Params<T>& p) {
    std::vector<T*> out;
    p.for_each([&](const std::string&, const std::vector<std::size_t>&, std::vector<T>& v) {
        for (auto& x : v) {
            out.push_back(&x);
        }
    });
    return out;
}

template <class T>
std::vector<double> flat_values(const immlab::lm::Params<T>& p) {
    std::vector<double> out;
    p.for_each([&](const std::string&, const std::vector<std::size_t>&, const std::vector<T>& v) {
        out.insert(out.end(), v.begin(), v.end());
    });
    return out;
}

// Central difference of the mean masked loss with respect to every parameter.
inline std::vector<double> finite_difference_grads(immlab::lm::Params<double> p,
                                                   const std::vector<immlab::lm::Sequence>& batch,
                                                   double h) {
    const double n = static_cast<double>(immlab::lm::count_targets(batch));
    auto loss = [&] { return immlab::lm::loss_and_grads<double>(p, batch, 1.0, nullptr) / n; };
    std::vector<double> out;
    for (double* x : flat_refs(p)) {
        const double keep = *x;
        *x = keep + h;
        const double up = loss();
        *x = keep - h;
        const double down = loss();
        *x = keep;
        out.push_back((up - down) / (2.0 * h));
    }
    return out;
}

// Analytic gradient of the mean masked loss, flattened like flat_values.
inline std::vector<double> analytic_grads(const immlab::lm::Params<double>& p,
                                          const std::vector<immlab::lm::Sequence>& batch) {
    const double n = static_cast<double>(immlab::lm::count_targets(batch));
    auto g = immlab::lm::Params<double>::zeros(p.cfg);
    immlab::lm::loss_and_grads<double>(p, batch, 1.0 / n, &g);
    return flat_values(g);
}

// Largest |a - b| / max(|a|, |b|, floor).
inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
        worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
    }
    return worst;
}

// Short arithmetic calibration pairs that fit tiny_task_config.
inline std::vector<immlab::CalibrationPair> short_calibration_pairs() {
    std::vector<immlab::CalibrationPair> out;
    for (std::uint64_t a = 1; a <= 9; a += 2) {
        const auto ex = immlab::tasks::make_example(immlab::tasks::TaskKind::Add, a, 9 - a / 2);
        out.push_back({ex.prompt, ex.rationale});
    }
    return out;
}

// Per-layer sum of |g * w| with g from central differences in binary64.
inline std::vector<double> finite_difference_layer_importance(const immlab::Checkpoint& model,
                                                              const std::vector<immlab::CalibrationPair>& pairs,
                                                              double h) {
    std::vector<immlab::lm::Sequence> batch;
    for (const auto& c : pairs) {
        batch.push_back(immlab::tasks::tokenize_pair(c.prompt, c.completion));
    }
    const auto p = immlab::lm::params_from_checkpoint<double>(model);
    const auto g = finite_difference_grads(p, batch, h);
    std::vector<double> out(p.cfg.n_layers, 0.0);
    std::size_t i = 0;
    p.for_each([&](const std::string& name, const std::vector<std::size_t>&, const std::vector<double>& w) {
        const auto key = immlab::parse_layer_key(name);
        for (double x : w) {
            if (key.layer) {
                out[*key.layer] += std::abs(g[i] * x);
            }
            ++i;
        }
    });
    return out;
}

} // namespace toyfix
