#include "immlab/analysis.hpp"
#include "immlab/checkpoint.hpp"
#include "immlab/errors.hpp"
#include "immlab/merge.hpp"
#include "immlab/selfimprove.hpp"
#include "immlab/tasks.hpp"
#include "immlab/toylm.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>

namespace py = pybind11;
using namespace immlab;

namespace {

using F32Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

py::array_t<float> to_numpy(const Tensor& t) {
    py::array_t<float> a(t.shape());
    std::copy(t.values().begin(), t.values().end(), a.mutable_data());
    return a;
}

Tensor from_numpy(const F32Array& a) {
    std::vector<std::size_t> shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

Checkpoint make_checkpoint(const std::map<std::string, F32Array>& tensors,
                           const std::map<std::string, std::string>& metadata) {
    Checkpoint c;
    for (const auto& [name, a] : tensors) {
        c.tensors.emplace(name, from_numpy(a));
    }
    c.metadata = metadata;
    return c;
}

py::dict tensors_dict(const Checkpoint& c) {
    py::dict d;
    for (const auto& [name, t] : c.tensors) {
        d[py::str(name)] = to_numpy(t);
    }
    return d;
}

py::dict change_dict(const LayerChange& c) {
    py::dict d;
    d["per_layer"] = c.per_layer;
    d["nonlayer"] = c.nonlayer;
    d["percent_per_layer"] = c.percent_per_layer;
    return d;
}

py::dict importance_dict(const LayerImportance& imp) {
    py::dict d;
    d["per_layer"] = imp.per_layer;
    d["nonlayer"] = imp.nonlayer;
    d["calibration_set_id"] = imp.calibration_set_id;
    d["token_count"] = imp.token_count;
    return d;
}

Delta delta_from(const Checkpoint& sft, const Checkpoint& prev) { return compute_delta(sft, prev, 0); }

} // namespace

PYBIND11_MODULE(_immlab, m) {
    m.doc() = "Checkpoint merging, layer analysis and the toy self-improvement lab";

    static py::exception<Error> error(m, "ImmlabError");
    static py::exception<DataError> data_error(m, "DataError", error.ptr());
    static py::exception<ConfigError> config_error(m, "ConfigError", error.ptr());
    static py::exception<IoError> io_error(m, "IoError", error.ptr());
    static py::exception<AbortError> abort_error(m, "AbortError", error.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) {
                std::rethrow_exception(p);
            }
        } catch (const DataError& e) {
            py::set_error(data_error, e.what());
        } catch (const ConfigError& e) {
            py::set_error(config_error, e.what());
        } catch (const IoError& e) {
            py::set_error(io_error, e.what());
        } catch (const AbortError& e) {
            py::set_error(abort_error, e.what());
        } catch (const Error& e) {
            py::set_error(error, e.what());
        }
    });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def(py::init(&make_checkpoint), py::arg("tensors"),
             py::arg("metadata") = std::map<std::string, std::string>{})
        .def_property_readonly("tensors", &tensors_dict)
        .def_readwrite("metadata", &Checkpoint::metadata)
        .def("names", [](const Checkpoint& c) {
            std::vector<std::string> out;
            for (const auto& [k, _] : c.tensors) {
                out.push_back(k);
            }
            return out;
        })
        .def("parameter_count", &Checkpoint::parameter_count)
        .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); })
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
        .def("to_bytes", [](const Checkpoint& c) { return py::bytes(serialize_checkpoint(c)); })
        .def_static("from_bytes", [](const py::bytes& b) { return parse_checkpoint(std::string(b)); })
        .def("__eq__", [](const Checkpoint& a, const Checkpoint& b) { return a == b; })
        .def("__len__", [](const Checkpoint& c) { return c.tensors.size(); });

    m.def("load_checkpoint", [](const std::filesystem::path& p) { return load_checkpoint(p); });
    m.def("save_checkpoint", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); });

    // ---- merging
    m.def("dare", [](py::array_t<double, py::array::c_style | py::array::forcecast> values, double p,
                     std::uint64_t seed) {
        std::vector<double> v(values.data(), values.data() + values.size());
        dare_tensor(v, p, seed);
        py::array_t<double> out(std::vector<py::ssize_t>(values.shape(), values.shape() + values.ndim()));
        std::copy(v.begin(), v.end(), out.mutable_data());
        return out;
    }, py::arg("values"), py::arg("p"), py::arg("seed"),
          "Drop-and-rescale one delta tensor with its own stream seed.");
    m.def("merge", [](const Checkpoint& base, const Checkpoint& sft, std::optional<Checkpoint> prev, double alpha,
                      double drop_rate, const std::string& mode, std::uint64_t seed, std::size_t iteration,
                      std::optional<std::vector<double>> importance) {
        MergeSpec spec;
        spec.alpha = alpha;
        spec.drop_rate_p = drop_rate;
        spec.mode = parse_merge_mode(mode);
        spec.master_seed = seed;
        spec.importance = std::move(importance);
        return merge_iteration(base, prev ? *prev : base, sft, spec, iteration);
    }, py::arg("base"), py::arg("sft"), py::arg("prev") = py::none(), py::arg("alpha") = 0.5,
          py::arg("drop_rate") = 0.5, py::arg("mode") = "imm", py::arg("seed") = 0, py::arg("iteration") = 0,
          py::arg("importance") = py::none());
    m.def("linear_interpolate", &linear_interpolate, py::arg("a"), py::arg("b"), py::arg("alpha"));
    m.def("imm_merge", [](const Checkpoint& base, const Checkpoint& prev, const Checkpoint& sft, double alpha,
                          double p, std::uint64_t seed) {
        return imm_merge(base, prev, dare_transform(delta_from(sft, prev), p, seed), alpha);
    }, py::arg("base"), py::arg("prev"), py::arg("sft"), py::arg("alpha"), py::arg("p"), py::arg("seed"));
    m.def("iimm_layer_scales", [](std::vector<double> imp) { return iimm_layer_scales(imp); });

    // ---- analysis
    m.def("layer_weight_change", [](const Checkpoint& a, const Checkpoint& b) {
        return change_dict(layer_weight_change(a, b));
    });
    m.def("layer_importance", [](const Checkpoint& model, const std::vector<std::pair<std::string, std::string>>& pairs) {
        std::vector<CalibrationPair> cal;
        for (const auto& [p, c] : pairs) {
            cal.push_back({p, c});
        }
        return importance_dict(layer_importance(model, cal));
    }, py::arg("model"), py::arg("calibration"));
    m.def("spearman", [](std::vector<double> x, std::vector<double> y) { return spearman_correlation(x, y); });

    // ---- tasks
    m.def("make_example", [](const std::string& kind, std::uint64_t a, std::uint64_t b) {
        const auto e = tasks::make_example(tasks::parse_task_kind(kind), a, b);
        py::dict d;
        d["prompt"] = e.prompt;
        d["rationale"] = e.rationale;
        d["final_answer"] = e.final_answer;
        d["kind"] = std::string(tasks::to_string(e.kind));
        return d;
    });
    m.def("tokenize", [](const std::string& s) { return tasks::tokenize(s); });
    m.def("detokenize", [](const std::vector<tasks::TokenId>& ids) { return tasks::detokenize(ids); });
    m.def("extract_final_answer", [](const std::string& s) { return tasks::extract_final_answer(s); });
    m.def("verify", [](const std::string& gold, const std::string& completion) { return tasks::verify(gold, completion); });

    // ---- toy model
    m.def("init_model", [](std::uint64_t seed, std::size_t n_layers, std::size_t d_model, std::size_t n_heads,
                           std::size_t d_ff, std::size_t max_seq_len) {
        lm::ModelConfig cfg;
        cfg.n_layers = n_layers;
        cfg.d_model = d_model;
        cfg.n_heads = n_heads;
        cfg.d_ff = d_ff;
        cfg.max_seq_len = max_seq_len;
        cfg.validate();
        return lm::init_params(cfg, seed);
    }, py::arg("seed") = 0, py::arg("n_layers") = 8, py::arg("d_model") = 64, py::arg("n_heads") = 4,
          py::arg("d_ff") = 256, py::arg("max_seq_len") = 128);
    m.def("forward", [](const Checkpoint& model, const std::vector<tasks::TokenId>& tokens) {
        return to_numpy(lm::forward(model, tokens));
    });
    m.def("complete", [](const Checkpoint& model, const std::string& prompt, double temperature,
                         std::size_t max_new_tokens, std::uint64_t seed) {
        const auto ids = tasks::tokenize_prompt(prompt);
        return tasks::detokenize(lm::sample_completion(model, ids, {temperature, max_new_tokens, seed}));
    }, py::arg("model"), py::arg("prompt"), py::arg("temperature") = 0.0, py::arg("max_new_tokens") = 96,
          py::arg("seed") = 0);

    // ---- lab
    m.def("pass_at_k", [](long long M, long long c, long long k) { return lab::pass_at_k(M, c, k); });
    m.def("default_lab_config", [] { return lab::LabConfig{}.to_json(); });
    m.def("evaluate", [](const Checkpoint& model, const std::string& config_json) {
        const auto cfg = lab::LabConfig::from_json(config_json);
        return lab::to_json(lab::evaluate_model(model, cfg));
    });
    m.def("run_lab", [](const std::string& config_json, const std::filesystem::path& out_dir) {
        const auto cfg = lab::LabConfig::from_json(config_json);
        py::gil_scoped_release release;
        return lab::run_lab(cfg, out_dir).manifest_path;
    }, py::arg("config_json"), py::arg("out_dir"));
}
