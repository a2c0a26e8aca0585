#include "immlab/errors.hpp"
#include "immlab/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace immlab::lm {

AdamState::AdamState(const ModelConfig& cfg, std::size_t total)
    : m(Params<double>::zeros(cfg)), v(Params<double>::zeros(cfg)), total_steps(total) {}

double learning_rate_at(const TrainConfig& tcfg, std::size_t step, std::size_t total_steps) {
    const auto warmup = static_cast<std::size_t>(
        std::ceil(tcfg.warmup_fraction * static_cast<double>(total_steps)));
    if (warmup > 0 && step <= warmup) {
        return tcfg.learning_rate * static_cast<double>(step) / static_cast<double>(warmup);
    }
    return tcfg.learning_rate;
}

void adamw_step(Params<float>& model, const Params<double>& grads, AdamState& state,
                const TrainConfig& tcfg, std::size_t step) {
    if (step == 0) {
        throw ConfigError("optimizer steps are 1-based");
    }
    const double lr = learning_rate_at(tcfg, step, state.total_steps);
    const double bc1 = 1.0 - std::pow(tcfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(tcfg.beta2, static_cast<double>(step));

    // Visit all four structures in lockstep: collect the grad/state buffers in
    // the shared fixed order first.
    std::vector<const std::vector<double>*> gs;
    std::vector<std::vector<double>*> ms;
    std::vector<std::vector<double>*> vs;
    std::vector<std::string> names;
    grads.for_each([&](const std::string& name, const auto&, const std::vector<double>& g) {
        gs.push_back(&g);
        names.push_back(name);
    });
    state.m.for_each([&](const std::string&, const auto&, std::vector<double>& x) { ms.push_back(&x); });
    state.v.for_each([&](const std::string&, const auto&, std::vector<double>& x) { vs.push_back(&x); });

    for (std::size_t t = 0; t < gs.size(); ++t) {
        for (double g : *gs[t]) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in '" + names[t] + "'");
            }
        }
    }

    std::size_t t = 0;
    model.for_each([&](const std::string& name, const auto&, std::vector<float>& w) {
        const auto& g = *gs[t];
        auto& m = *ms[t];
        auto& v = *vs[t];
        if (g.size() != w.size()) {
            throw IncongruentError("gradient for '" + name + "' has the wrong size");
        }
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = tcfg.beta1 * m[i] + (1.0 - tcfg.beta1) * g[i];
            v[i] = tcfg.beta2 * v[i] + (1.0 - tcfg.beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            const double wi = static_cast<double>(w[i]);
            w[i] = static_cast<float>(wi - lr * (mhat / (std::sqrt(vhat) + tcfg.epsilon) +
                                                 tcfg.weight_decay * wi));
        }
        ++t;
    });
}

void adamw_step(Checkpoint& model, const Delta& grads, AdamState& state, const TrainConfig& tcfg,
                std::size_t step) {
    auto p = params_from_checkpoint<float>(model);
    auto g = Params<double>::zeros(p.cfg);
    g.for_each([&](const std::string& name, const auto& shape, std::vector<double>& dst) {
        auto it = grads.tensors.find(name);
        if (it == grads.tensors.end() || it->second.shape != shape) {
            throw IncongruentError("gradient map does not match model tensor '" + name + "'");
        }
        dst = it->second.values;
    });
    if (grads.tensors.size() != model.tensors.size()) {
        throw IncongruentError("gradient map has extra tensors");
    }
    adamw_step(p, g, state, tcfg, step);
    auto meta = model.metadata;
    model = to_checkpoint(p, meta);
}

std::size_t steps_per_epoch(std::size_t n_examples, std::size_t batch_size) {
    return (n_examples + batch_size - 1) / batch_size;
}

TrainReport train_sft(Params<float>& model, std::span<const Sequence> data, const TrainConfig& tcfg) {
    tcfg.validate();
    TrainReport report;
    if (data.empty()) {
        return report;
    }
    const std::size_t spe = steps_per_epoch(data.size(), tcfg.batch_size);
    AdamState state(model.cfg, spe * tcfg.epochs);
    auto grads = Params<double>::zeros(model.cfg);
    std::vector<std::size_t> order(data.size());
    std::vector<Sequence> batch;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < tcfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        SeededStream stream(derive_tensor_seed(tcfg.seed, "epoch." + std::to_string(epoch)));
        tasks::shuffle(order, stream);
        for (std::size_t b = 0; b < spe; ++b) {
            batch.clear();
            const std::size_t end = std::min(data.size(), (b + 1) * tcfg.batch_size);
            for (std::size_t i = b * tcfg.batch_size; i < end; ++i) {
                batch.push_back(data[order[i]]);
            }
            const std::size_t n = count_targets(batch);
            if (n == 0) {
                throw DataError("training batch has no target positions");
            }
            grads.for_each([](const std::string&, const auto&, std::vector<double>& g) {
                std::fill(g.begin(), g.end(), 0.0);
            });
            const double scale = 1.0 / static_cast<double>(n);
            const double loss = loss_and_grads(model, batch, scale, &grads) * scale;
            if (!std::isfinite(loss)) {
                throw NumericError("training loss became non-finite at step " + std::to_string(step + 1));
            }
            adamw_step(model, grads, state, tcfg, ++step);
            report.step_losses.push_back(loss);
        }
    }
    report.steps = step;
    return report;
}

} // namespace immlab::lm
