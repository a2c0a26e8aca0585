#include "immlab/analysis.hpp"

#include "immlab/errors.hpp"
#include "immlab/rng.hpp"
#include "immlab/toylm.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

namespace immlab {

using nlohmann::json;

namespace {

constexpr std::size_t kCalibrationChunk = 32;

std::string fmt(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

} // namespace

LayerImportance importance_from_gradients(const Checkpoint& weights, const Delta& grads,
                                          std::size_t n_layers) {
    LayerImportance out;
    out.per_layer.assign(n_layers, 0.0);
    for (const auto& [name, w] : weights.tensors) {
        auto it = grads.tensors.find(name);
        if (it == grads.tensors.end() || it->second.shape != w.shape()) {
            throw IncongruentError("gradient map does not match tensor '" + name + "'");
        }
        const auto& g = it->second.values;
        double sum = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!std::isfinite(g[i])) {
                throw NumericError("gradient of '" + name + "' is not finite");
            }
            sum += std::abs(g[i] * static_cast<double>(w[i]));
        }
        const LayerKey key = parse_layer_key(name);
        if (key.layer) {
            if (*key.layer >= n_layers) {
                throw DataError("tensor '" + name + "' is outside the " + std::to_string(n_layers) +
                                " configured layers");
            }
            out.per_layer[*key.layer] += sum;
        } else {
            out.nonlayer[key.module_kind] += sum;
        }
    }
    if (grads.tensors.size() != weights.tensors.size()) {
        throw IncongruentError("gradient map has tensors the model lacks");
    }
    return out;
}

LayerImportance layer_importance(const Checkpoint& model, std::vector<CalibrationPair> calibration) {
    if (calibration.empty()) {
        throw DataError("layer importance needs a nonempty calibration set");
    }
    std::sort(calibration.begin(), calibration.end());

    std::string canonical;
    std::vector<lm::Sequence> seqs;
    seqs.reserve(calibration.size());
    for (const auto& c : calibration) {
        seqs.push_back(tasks::tokenize_pair(c.prompt, c.completion));
        canonical += c.prompt;
        canonical.push_back('\x1f');
        canonical += c.completion;
        canonical.push_back('\x1e');
    }
    const std::size_t targets = lm::count_targets(seqs);
    const auto params = lm::params_from_checkpoint<float>(model);
    auto grads = lm::Params<double>::zeros(params.cfg);
    const double scale = 1.0 / static_cast<double>(targets);
    for (std::size_t i = 0; i < seqs.size(); i += kCalibrationChunk) {
        const std::size_t n = std::min(kCalibrationChunk, seqs.size() - i);
        lm::loss_and_grads(params, std::span<const lm::Sequence>(seqs.data() + i, n), scale, &grads);
    }
    LayerImportance out = importance_from_gradients(model, lm::grads_to_delta(grads), params.cfg.n_layers);
    out.calibration_set_id = hex64(fnv1a64(canonical));
    out.token_count = targets;
    return out;
}

LayerChange layer_change_norms(const Checkpoint& a, const Checkpoint& b) {
    assert_congruent(a, b);
    LayerChange out;
    out.per_layer.assign(std::max(layer_count(a), layer_count(b)), 0.0);
    for (const auto& [name, ta] : a.tensors) {
        const Tensor& tb = b.tensors.at(name);
        double sq = 0.0;
        for (std::size_t i = 0; i < ta.numel(); ++i) {
            const double diff = static_cast<double>(ta[i]) - static_cast<double>(tb[i]);
            sq += diff * diff;
        }
        const double norm = static_cast<double>(static_cast<float>(std::sqrt(sq)));
        const LayerKey key = parse_layer_key(name);
        if (key.layer) {
            out.per_layer[*key.layer] += norm;
        } else {
            out.nonlayer[key.module_kind] += norm;
        }
    }
    return out;
}

LayerChange layer_weight_change(const Checkpoint& a, const Checkpoint& b) {
    LayerChange out = layer_change_norms(a, b);
    const double total = std::accumulate(out.per_layer.begin(), out.per_layer.end(), 0.0);
    if (!(total > 0.0)) {
        throw DataError("no transformer layer changed; change percentages are undefined");
    }
    out.percent_per_layer.reserve(out.per_layer.size());
    for (double v : out.per_layer) {
        out.percent_per_layer.push_back(100.0 * v / total);
    }
    return out;
}

void emit_analysis_report(const std::optional<LayerImportance>& importance, const LayerChange& change,
                          const std::filesystem::path& csv_path) {
    const std::size_t n = change.per_layer.size();
    if (importance && importance->per_layer.size() != n) {
        throw DataError("importance and weight-change vectors have different lengths");
    }
    if (!change.percent_per_layer.empty() && change.percent_per_layer.size() != n) {
        throw DataError("percent vector has the wrong length");
    }

    std::string csv = importance ? "layer_index,importance,weight_change,change_percent\n"
                                 : "layer_index,weight_change,change_percent\n";
    for (std::size_t i = 0; i < n; ++i) {
        csv += std::to_string(i);
        if (importance) {
            csv += "," + fmt(importance->per_layer[i]);
        }
        csv += "," + fmt(change.per_layer[i]) + ",";
        if (!change.percent_per_layer.empty()) {
            csv += fmt(change.percent_per_layer[i]);
        }
        csv += "\n";
    }
    std::vector<std::string> kinds;
    for (const auto& [k, _] : change.nonlayer) {
        kinds.push_back(k);
    }
    if (importance) {
        for (const auto& [k, _] : importance->nonlayer) {
            if (!change.nonlayer.contains(k)) {
                kinds.push_back(k);
            }
        }
    }
    std::sort(kinds.begin(), kinds.end());
    for (const auto& k : kinds) {
        csv += "NONLAYER:" + k;
        if (importance) {
            auto it = importance->nonlayer.find(k);
            csv += "," + (it == importance->nonlayer.end() ? std::string() : fmt(it->second));
        }
        auto it = change.nonlayer.find(k);
        csv += "," + (it == change.nonlayer.end() ? std::string() : fmt(it->second)) + ",\n";
    }

    json j;
    j["weight_change"] = change.per_layer;
    j["change_percent"] = change.percent_per_layer;
    j["nonlayer_weight_change"] = change.nonlayer;
    if (importance) {
        j["importance"] = importance->per_layer;
        j["nonlayer_importance"] = importance->nonlayer;
        j["calibration_set_id"] = importance->calibration_set_id;
        j["token_count"] = importance->token_count;
    } else {
        j["importance"] = nullptr;
    }

    auto write = [](const std::filesystem::path& p, const std::string& text) {
        std::ofstream out(p, std::ios::binary | std::ios::trunc);
        out << text;
        out.flush();
        if (!out) {
            throw IoError("cannot write '" + p.string() + "'");
        }
    };
    write(csv_path, csv);
    auto json_path = csv_path;
    json_path.replace_extension(".json");
    write(json_path, j.dump(2) + "\n");
}

AnalysisReport load_analysis_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open analysis report '" + json_path.string() + "'");
    }
    AnalysisReport r;
    try {
        const json j = json::parse(in);
        r.change.per_layer = j.at("weight_change").get<std::vector<double>>();
        r.change.percent_per_layer = j.at("change_percent").get<std::vector<double>>();
        r.change.nonlayer = j.at("nonlayer_weight_change").get<std::map<std::string, double>>();
        if (!j.at("importance").is_null()) {
            LayerImportance imp;
            imp.per_layer = j.at("importance").get<std::vector<double>>();
            imp.nonlayer = j.at("nonlayer_importance").get<std::map<std::string, double>>();
            imp.calibration_set_id = j.at("calibration_set_id").get<std::string>();
            imp.token_count = j.at("token_count").get<std::size_t>();
            r.importance = std::move(imp);
        }
    } catch (const json::exception& e) {
        throw FormatError("malformed analysis report '" + json_path.string() + "': " + e.what());
    }
    return r;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < idx.size();) {
        std::size_t j = i;
        while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) {
            ++j;
        }
        const double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) {
            ranks[idx[k]] = r;
        }
        i = j + 1;
    }
    return ranks;
}

} // namespace

double spearman_correlation(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw DataError("rank correlation needs two equal-length vectors of size >= 2");
    }
    const auto rx = average_ranks(x);
    const auto ry = average_ranks(y);
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
    const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < rx.size(); ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        return 0.0;
    }
    return sxy / std::sqrt(sxx * syy);
}

} // namespace immlab
