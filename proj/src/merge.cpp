#include "immlab/merge.hpp"

#include "immlab/errors.hpp"
#include "immlab/parallel.hpp"
#include "immlab/rng.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>

namespace immlab {

using nlohmann::json;

std::string_view to_string(MergeMode m) {
    switch (m) {
    case MergeMode::Imm:
        return "imm";
    case MergeMode::Iimm:
        return "iimm";
    case MergeMode::Linear:
        return "linear";
    }
    return "?";
}

MergeMode parse_merge_mode(std::string_view s) {
    std::string lower(s);
    for (auto& c : lower) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    if (lower == "imm") {
        return MergeMode::Imm;
    }
    if (lower == "iimm") {
        return MergeMode::Iimm;
    }
    if (lower == "linear") {
        return MergeMode::Linear;
    }
    throw ConfigError("unknown merge mode '" + std::string(s) + "' (expected imm, iimm or linear)");
}

void MergeSpec::validate(std::optional<std::size_t> n_layers) const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha must lie in [0, 1]");
    }
    if (!(drop_rate_p >= 0.0 && drop_rate_p < 1.0)) {
        throw ConfigError("drop rate p must lie in [0, 1)");
    }
    if (mode == MergeMode::Iimm && !importance) {
        throw ConfigError("iimm merge requires a per-layer importance vector");
    }
    if (importance) {
        if (importance->empty()) {
            throw ConfigError("importance vector is empty");
        }
        double sum = 0.0;
        for (double v : *importance) {
            if (!(v >= 0.0) || !std::isfinite(v)) {
                throw ConfigError("importance values must be finite and nonnegative");
            }
            sum += v;
        }
        if (sum <= 0.0) {
            throw ConfigError("importance vector is all zero");
        }
        if (n_layers && importance->size() != *n_layers) {
            throw ConfigError("importance has " + std::to_string(importance->size()) +
                              " entries but the model has " + std::to_string(*n_layers) + " layers");
        }
    }
}

std::string MergeSpec::to_json() const {
    json j = {{"alpha", alpha},
              {"drop_rate_p", drop_rate_p},
              {"mode", std::string(to_string(mode))},
              {"master_seed", master_seed}};
    j["importance"] = importance ? json(*importance) : json(nullptr);
    return j.dump();
}

MergeSpec MergeSpec::from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("merge spec is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("merge spec must be a JSON object");
    }
    MergeSpec s;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            if (k == "alpha") {
                s.alpha = it->get<double>();
            } else if (k == "drop_rate_p") {
                s.drop_rate_p = it->get<double>();
            } else if (k == "mode") {
                s.mode = parse_merge_mode(it->get<std::string>());
            } else if (k == "master_seed") {
                s.master_seed = it->get<std::uint64_t>();
            } else if (k == "importance") {
                if (!it->is_null()) {
                    s.importance = it->get<std::vector<double>>();
                }
            } else {
                throw ConfigError("unknown merge spec key '" + k + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("merge spec has a value of the wrong type: ") + e.what());
    }
    s.validate();
    return s;
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void check_alpha(double alpha) {
    if (!(alpha >= 0.0 && alpha <= 1.0)) {
        throw ConfigError("alpha must lie in [0, 1], got " + fmt_double(alpha));
    }
}

void assert_delta_congruent(const Checkpoint& c, const Delta& d) {
    if (c.tensors.size() != d.tensors.size()) {
        throw IncongruentError("delta has " + std::to_string(d.tensors.size()) +
                               " tensors, checkpoint has " + std::to_string(c.tensors.size()));
    }
    for (const auto& [name, t] : c.tensors) {
        auto it = d.tensors.find(name);
        if (it == d.tensors.end()) {
            throw IncongruentError("delta is missing tensor '" + name + "'");
        }
        if (it->second.shape != t.shape()) {
            throw IncongruentError("delta tensor '" + name + "' has a different shape");
        }
    }
}

// alpha * a + (1 - alpha) * b with the endpoints returned verbatim.
inline double blend(double alpha, double a, double b) {
    if (alpha == 1.0) {
        return a;
    }
    if (alpha == 0.0) {
        return b;
    }
    return alpha * a + (1.0 - alpha) * b;
}

template <class Fn>
void for_each_tensor(Checkpoint& out, Fn&& fn) {
    std::vector<std::pair<const std::string*, Tensor*>> items;
    items.reserve(out.tensors.size());
    for (auto& [name, t] : out.tensors) {
        items.emplace_back(&name, &t);
    }
    parallel_for(items.size(), [&](std::size_t i) { fn(*items[i].first, *items[i].second); });
}

Checkpoint merge_with_scales(const Checkpoint& base, const Checkpoint& prev, const Delta& dh,
                             double alpha, std::span<const double> layer_scales, MergeMode mode) {
    check_alpha(alpha);
    assert_congruent(base, prev);
    assert_delta_congruent(base, dh);

    Checkpoint out;
    out.metadata = prev.metadata;
    out.tensors = prev.tensors;
    for_each_tensor(out, [&](const std::string& name, Tensor& t) {
        double scale = 1.0;
        if (!layer_scales.empty()) {
            const LayerKey key = parse_layer_key(name);
            if (key.layer) {
                if (*key.layer >= layer_scales.size()) {
                    throw ConfigError("tensor '" + name + "' lies outside the importance vector");
                }
                scale = layer_scales[*key.layer];
            }
        }
        const Tensor& b = base.tensors.at(name);
        const std::vector<double>& d = dh.tensors.at(name).values;
        auto out_values = t.data();
        for (std::size_t i = 0; i < out_values.size(); ++i) {
            const double update = scale == 1.0 ? d[i] : scale * d[i];
            const double tuned = static_cast<double>(out_values[i]) + update;
            out_values[i] = static_cast<float>(blend(alpha, static_cast<double>(b[i]), tuned));
        }
        require_finite(t, "merged tensor '" + name + "'");
    });
    out.metadata["merge.mode"] = std::string(to_string(mode));
    out.metadata["merge.alpha"] = fmt_double(alpha);
    out.metadata["merge.iteration"] = std::to_string(dh.iteration_t);
    out.metadata["merge.drop_rate"] = fmt_double(dh.drop_rate.value_or(0.0));
    if (dh.dare_seed) {
        out.metadata["merge.seed"] = std::to_string(*dh.dare_seed);
    } else {
        out.metadata.erase("merge.seed");
    }
    return out;
}

} // namespace

Delta compute_delta(const Checkpoint& theta_sft, const Checkpoint& theta_prev, std::size_t t) {
    assert_congruent(theta_sft, theta_prev);
    Delta d;
    d.iteration_t = t;
    for (const auto& [name, sft] : theta_sft.tensors) {
        const Tensor& prev = theta_prev.tensors.at(name);
        DeltaTensor dt;
        dt.shape = sft.shape();
        dt.values.resize(sft.numel());
        for (std::size_t i = 0; i < dt.values.size(); ++i) {
            dt.values[i] = static_cast<double>(sft[i]) - static_cast<double>(prev[i]);
        }
        d.tensors.emplace(name, std::move(dt));
    }
    return d;
}

void dare_tensor(std::span<double> values, double p, std::uint64_t tensor_seed) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ConfigError("DARE drop rate must lie in [0, 1), got " + fmt_double(p));
    }
    if (p == 0.0) {
        return;
    }
    const double keep_scale = 1.0 / (1.0 - p);
    SeededStream stream(tensor_seed);
    for (double& v : values) {
        const double u = stream.next_uniform();
        v = u < p ? 0.0 : v * keep_scale;
    }
}

Delta dare_transform(const Delta& d, double p, std::uint64_t master_seed) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw ConfigError("DARE drop rate must lie in [0, 1), got " + fmt_double(p));
    }
    Delta out = d;
    out.drop_rate = p;
    out.dare_seed = master_seed;
    std::vector<std::pair<const std::string*, DeltaTensor*>> items;
    for (auto& [name, t] : out.tensors) {
        items.emplace_back(&name, &t);
    }
    parallel_for(items.size(), [&](std::size_t i) {
        dare_tensor(items[i].second->values, p, derive_tensor_seed(master_seed, *items[i].first));
    });
    return out;
}

Checkpoint imm_merge(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                     const Delta& delta_hat, double alpha) {
    return merge_with_scales(theta_base, theta_prev, delta_hat, alpha, {}, MergeMode::Imm);
}

std::vector<double> iimm_layer_scales(std::span<const double> importance) {
    if (importance.empty()) {
        throw ConfigError("importance vector is empty");
    }
    double sum = 0.0;
    bool uniform = true;
    for (double v : importance) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw ConfigError("importance values must be finite and nonnegative");
        }
        sum += v;
        uniform = uniform && v == importance.front();
    }
    if (sum <= 0.0) {
        throw ConfigError("importance vector is all zero");
    }
    const auto n = static_cast<double>(importance.size());
    std::vector<double> scales(importance.size(), 1.0);
    if (!uniform) {
        for (std::size_t i = 0; i < importance.size(); ++i) {
            scales[i] = n * importance[i] / sum;
        }
    }
    return scales;
}

Checkpoint iimm_merge(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                      const Delta& delta_hat, double alpha, std::span<const double> importance) {
    const std::size_t n_layers = layer_count(theta_base);
    if (importance.size() != n_layers) {
        throw ConfigError("importance has " + std::to_string(importance.size()) +
                          " entries but the model has " + std::to_string(n_layers) + " layers");
    }
    const auto scales = iimm_layer_scales(importance);
    return merge_with_scales(theta_base, theta_prev, delta_hat, alpha, scales, MergeMode::Iimm);
}

Checkpoint linear_interpolate(const Checkpoint& a, const Checkpoint& b, double alpha) {
    check_alpha(alpha);
    assert_congruent(a, b);
    Checkpoint out;
    out.metadata = b.metadata;
    out.tensors = b.tensors;
    for_each_tensor(out, [&](const std::string& name, Tensor& t) {
        const Tensor& x = a.tensors.at(name);
        auto values = t.data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = static_cast<float>(
                blend(alpha, static_cast<double>(x[i]), static_cast<double>(values[i])));
        }
        require_finite(t, "interpolated tensor '" + name + "'");
    });
    out.metadata["merge.mode"] = "linear";
    out.metadata["merge.alpha"] = fmt_double(alpha);
    return out;
}

Checkpoint merge_iteration(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                           const Checkpoint& theta_sft, const MergeSpec& spec, std::size_t t) {
    spec.validate();
    assert_congruent(theta_base, theta_prev);
    assert_congruent(theta_base, theta_sft);
    if (spec.mode == MergeMode::Linear) {
        return linear_interpolate(theta_base, theta_sft, spec.alpha);
    }
    const Delta delta = compute_delta(theta_sft, theta_prev, t);
    const Delta delta_hat = dare_transform(delta, spec.drop_rate_p, spec.master_seed);
    if (spec.mode == MergeMode::Iimm) {
        return iimm_merge(theta_base, theta_prev, delta_hat, spec.alpha, *spec.importance);
    }
    return imm_merge(theta_base, theta_prev, delta_hat, spec.alpha);
}

} // namespace immlab
