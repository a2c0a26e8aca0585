#include "immlab/errors.hpp"
#include "immlab/toylm.hpp"

#include <json.hpp>

#include <cmath>
#include <set>

namespace immlab::lm {

using nlohmann::json;

void ModelConfig::validate() const {
    if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 ||
        max_seq_len == 0) {
        throw ConfigError("model config fields must all be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model (" + std::to_string(d_model) + ") must be divisible by n_heads (" +
                          std::to_string(n_heads) + ")");
    }
}

std::string ModelConfig::to_json() const {
    json j = {{"vocab_size", vocab_size}, {"d_model", d_model},   {"n_layers", n_layers},
              {"n_heads", n_heads},       {"d_ff", d_ff},         {"max_seq_len", max_seq_len}};
    return j.dump();
}

ModelConfig ModelConfig::from_json(std::string_view text) {
    ModelConfig cfg;
    try {
        const json j = json::parse(text);
        for (auto it = j.begin(); it != j.end(); ++it) {
            const auto v = it->get<std::size_t>();
            const std::string& k = it.key();
            if (k == "vocab_size") {
                cfg.vocab_size = v;
            } else if (k == "d_model") {
                cfg.d_model = v;
            } else if (k == "n_layers") {
                cfg.n_layers = v;
            } else if (k == "n_heads") {
                cfg.n_heads = v;
            } else if (k == "d_ff") {
                cfg.d_ff = v;
            } else if (k == "max_seq_len") {
                cfg.max_seq_len = v;
            } else {
                throw ConfigError("unknown model config key '" + k + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

ModelConfig ModelConfig::from_checkpoint(const Checkpoint& c) {
    auto it = c.metadata.find("model_config");
    if (it == c.metadata.end()) {
        throw DataError("checkpoint has no model_config metadata");
    }
    return from_json(it->second);
}

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) {
        throw ConfigError("learning_rate must be positive");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(epsilon > 0.0) || !(weight_decay >= 0.0)) {
        throw ConfigError("epsilon must be positive and weight_decay nonnegative");
    }
    if (epochs == 0 || batch_size == 0) {
        throw ConfigError("epochs and batch_size must be positive");
    }
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
        throw ConfigError("warmup_fraction must lie in [0, 1)");
    }
}

template <class T>
Params<T> Params<T>::zeros(const ModelConfig& cfg) {
    cfg.validate();
    Params<T> p;
    p.cfg = cfg;
    p.blocks.resize(cfg.n_layers);
    p.for_each([](const std::string&, const std::vector<std::size_t>& shape, std::vector<T>& v) {
        v.assign(shape_numel(shape), T(0));
    });
    return p;
}

template struct Params<float>;
template struct Params<double>;

std::vector<std::string> tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    Params<float> shell;
    shell.cfg = cfg;
    shell.blocks.resize(cfg.n_layers);
    shell.for_each([&](const std::string& name, const auto&, auto&) { names.push_back(name); });
    return names;
}

template <class T>
Params<T> params_from_checkpoint(const Checkpoint& c) {
    const ModelConfig cfg = ModelConfig::from_checkpoint(c);
    Params<T> p = Params<T>::zeros(cfg);
    std::set<std::string> seen;
    p.for_each([&](const std::string& name, const std::vector<std::size_t>& shape, std::vector<T>& v) {
        auto it = c.tensors.find(name);
        if (it == c.tensors.end()) {
            throw IncongruentError("checkpoint is missing model tensor '" + name + "'");
        }
        if (it->second.shape() != shape) {
            throw IncongruentError("tensor '" + name + "' has shape " + it->second.shape_string() +
                                   " but the model config requires another");
        }
        const auto src = it->second.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = static_cast<T>(src[i]);
        }
        seen.insert(name);
    });
    for (const auto& [name, _] : c.tensors) {
        if (!seen.contains(name)) {
            throw IncongruentError("checkpoint has unexpected tensor '" + name + "'");
        }
    }
    return p;
}

template Params<float> params_from_checkpoint<float>(const Checkpoint&);
template Params<double> params_from_checkpoint<double>(const Checkpoint&);

Checkpoint to_checkpoint(const Params<float>& p, const std::map<std::string, std::string>& extra) {
    Checkpoint c;
    c.metadata = extra;
    c.metadata["model_config"] = p.cfg.to_json();
    c.metadata["format_version"] = std::string(kFormatVersion);
    p.for_each([&](const std::string& name, const std::vector<std::size_t>& shape,
                   const std::vector<float>& v) { c.tensors.emplace(name, Tensor(shape, v)); });
    return c;
}

Delta grads_to_delta(const Params<double>& g) {
    Delta d;
    g.for_each([&](const std::string& name, const std::vector<std::size_t>& shape,
                   const std::vector<double>& v) { d.tensors.emplace(name, DeltaTensor{shape, v}); });
    return d;
}

Checkpoint init_params(const ModelConfig& cfg, std::uint64_t seed) {
    Params<float> p = Params<float>::zeros(cfg);
    const double out_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    p.for_each([&](const std::string& name, const std::vector<std::size_t>&, std::vector<float>& v) {
        if (name.ends_with(".g")) {
            std::fill(v.begin(), v.end(), 1.0f);
            return;
        }
        double std_dev = 0.02;
        if (name.ends_with("attn.wo") || name.ends_with("mlp.w2")) {
            std_dev *= out_scale;
        }
        SeededStream stream(derive_tensor_seed(seed, name));
        for (auto& x : v) {
            x = static_cast<float>(std_dev * stream.next_normal());
        }
    });
    return to_checkpoint(p);
}

} // namespace immlab::lm
