#include "immlab/errors.hpp"
#include "immlab/rng.hpp"
#include "immlab/selfimprove.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace immlab::lab {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(LoopMode m) {
    switch (m) {
    case LoopMode::Vanilla:
        return "VANILLA";
    case LoopMode::Mixture:
        return "MIXTURE";
    case LoopMode::Accumulate:
        return "ACCUMULATE";
    case LoopMode::Imm:
        return "IMM";
    case LoopMode::Iimm:
        return "IIMM";
    }
    return "?";
}

LoopMode parse_loop_mode(std::string_view s) {
    std::string up(s);
    std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
    for (LoopMode m : {LoopMode::Vanilla, LoopMode::Mixture, LoopMode::Accumulate, LoopMode::Imm,
                       LoopMode::Iimm}) {
        if (up == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown loop mode '" + std::string(s) + "'");
}

bool is_merging(LoopMode m) { return m == LoopMode::Imm || m == LoopMode::Iimm; }

void LabConfig::validate() const {
    model.validate();
    pretrain.validate();
    train.validate();
    if (iterations > 1000) {
        throw ConfigError("iterations is unreasonably large");
    }
    if (samples_per_question == 0) {
        throw ConfigError("samples_per_question must be positive");
    }
    if (temperatures.empty()) {
        throw ConfigError("temperatures must be nonempty");
    }
    for (double t : temperatures) {
        if (!(t >= 0.0)) {
            throw ConfigError("temperatures must be nonnegative");
        }
    }
    if (questions_per_iteration == 0) {
        throw ConfigError("questions_per_iteration must be positive");
    }
    if (!(mixture_fraction >= 0.0 && mixture_fraction <= 1.0)) {
        throw ConfigError("mixture_fraction must lie in [0, 1]");
    }
    if (per_question_cap == 0) {
        throw ConfigError("per_question_cap must be positive");
    }
    if (eval_sets.empty()) {
        throw ConfigError("eval_sets must name at least one task kind");
    }
    for (const auto& [kind, n] : eval_sets) {
        if (n == 0) {
            throw ConfigError("eval set for " + std::string(tasks::to_string(kind)) + " is empty");
        }
    }
    if (eval_samples == 0) {
        throw ConfigError("eval_samples must be positive");
    }
    if (pass_k_values.empty()) {
        throw ConfigError("pass_k_values must be nonempty");
    }
    for (std::size_t k : pass_k_values) {
        if (k == 0 || k > eval_samples) {
            throw ConfigError("pass@k value " + std::to_string(k) + " must lie in [1, eval_samples = " +
                              std::to_string(eval_samples) + "]");
        }
    }
    if (calibration_size == 0) {
        throw ConfigError("calibration_size must be positive");
    }
    if (max_new_tokens == 0) {
        throw ConfigError("max_new_tokens must be positive");
    }
    if (corpus.total == 0) {
        throw ConfigError("corpus.total must be positive");
    }
    (void)corpus.counts();
    MergeSpec m = merge;
    m.mode = loop_mode == LoopMode::Iimm ? MergeMode::Iimm : MergeMode::Imm;
    if (m.mode != MergeMode::Iimm) {
        m.importance.reset();
    }
    if (m.mode == MergeMode::Iimm && !m.importance) {
        // Importance is measured on the fly; validate the rest with a placeholder.
        m.importance = std::vector<double>(model.n_layers, 1.0);
    }
    m.validate(model.n_layers);
}

namespace {

ordered_json train_to_json(const lm::TrainConfig& t) {
    return {{"learning_rate", t.learning_rate}, {"beta1", t.beta1},
            {"beta2", t.beta2},                 {"epsilon", t.epsilon},
            {"weight_decay", t.weight_decay},   {"epochs", t.epochs},
            {"batch_size", t.batch_size},       {"warmup_fraction", t.warmup_fraction},
            {"seed", t.seed}};
}

lm::TrainConfig train_from_json(const json& j, lm::TrainConfig t, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be an object");
    }
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "learning_rate") {
            t.learning_rate = it->get<double>();
        } else if (k == "beta1") {
            t.beta1 = it->get<double>();
        } else if (k == "beta2") {
            t.beta2 = it->get<double>();
        } else if (k == "epsilon") {
            t.epsilon = it->get<double>();
        } else if (k == "weight_decay") {
            t.weight_decay = it->get<double>();
        } else if (k == "epochs") {
            t.epochs = it->get<std::size_t>();
        } else if (k == "batch_size") {
            t.batch_size = it->get<std::size_t>();
        } else if (k == "warmup_fraction") {
            t.warmup_fraction = it->get<double>();
        } else if (k == "seed") {
            t.seed = it->get<std::uint64_t>();
        } else {
            throw ConfigError("unknown key '" + k + "' in " + where);
        }
    }
    return t;
}

} // namespace

std::string LabConfig::to_json() const {
    ordered_json j;
    j["model"] = ordered_json::parse(model.to_json());
    j["pretrain"] = train_to_json(pretrain);
    j["train"] = train_to_json(train);
    ordered_json mix;
    for (std::size_t i = 0; i < tasks::kAllKinds.size(); ++i) {
        mix[std::string(tasks::to_string(tasks::kAllKinds[i]))] = corpus.mixture[i];
    }
    j["corpus"] = {{"total", corpus.total}, {"mixture", mix}};
    ordered_json m = {{"alpha", merge.alpha}, {"drop_rate_p", merge.drop_rate_p},
                      {"master_seed", merge.master_seed}};
    m["importance"] = merge.importance ? ordered_json(*merge.importance) : ordered_json(nullptr);
    j["merge"] = m;
    j["iterations"] = iterations;
    j["samples_per_question"] = samples_per_question;
    j["temperatures"] = temperatures;
    j["questions_per_iteration"] = questions_per_iteration;
    j["loop_mode"] = std::string(to_string(loop_mode));
    j["mixture_fraction"] = mixture_fraction;
    j["per_question_cap"] = per_question_cap;
    j["teacher_checkpoint"] = teacher_checkpoint ? ordered_json(*teacher_checkpoint) : ordered_json(nullptr);
    j["base_checkpoint"] = base_checkpoint ? ordered_json(*base_checkpoint) : ordered_json(nullptr);
    ordered_json ev = ordered_json::object();
    for (tasks::TaskKind k : tasks::kAllKinds) {
        if (auto it = eval_sets.find(k); it != eval_sets.end()) {
            ev[std::string(tasks::to_string(k))] = it->second;
        }
    }
    j["eval_sets"] = ev;
    j["eval_samples"] = eval_samples;
    j["pass_k_values"] = pass_k_values;
    j["calibration_size"] = calibration_size;
    j["max_new_tokens"] = max_new_tokens;
    j["seed"] = seed;
    return j.dump(2);
}

LabConfig LabConfig::from_json(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        // e.byte carries the parse location.
        throw ConfigError("lab config is not valid JSON (byte " + std::to_string(e.byte) + "): " + e.what());
    }
    if (!j.is_object()) {
        throw ConfigError("lab config must be a JSON object");
    }
    LabConfig c;
    try {
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string& k = it.key();
            const json& v = *it;
            if (k == "model") {
                c.model = lm::ModelConfig::from_json(v.dump());
            } else if (k == "pretrain") {
                c.pretrain = train_from_json(v, c.pretrain, "pretrain");
            } else if (k == "train") {
                c.train = train_from_json(v, c.train, "train");
            } else if (k == "corpus") {
                for (auto ct = v.begin(); ct != v.end(); ++ct) {
                    if (ct.key() == "total") {
                        c.corpus.total = ct->get<std::size_t>();
                    } else if (ct.key() == "mixture") {
                        std::array<double, 4> mix{};
                        for (auto mt = ct->begin(); mt != ct->end(); ++mt) {
                            const auto kind = tasks::parse_task_kind(mt.key());
                            const auto pos = std::find(tasks::kAllKinds.begin(), tasks::kAllKinds.end(), kind);
                            mix[static_cast<std::size_t>(pos - tasks::kAllKinds.begin())] = mt->get<double>();
                        }
                        c.corpus.mixture = mix;
                    } else {
                        throw ConfigError("unknown key '" + ct.key() + "' in corpus");
                    }
                }
            } else if (k == "merge") {
                json m = v;
                if (m.contains("mode")) {
                    throw ConfigError("merge.mode is implied by loop_mode; remove it");
                }
                c.merge = MergeSpec::from_json(m.dump());
            } else if (k == "iterations") {
                c.iterations = v.get<std::size_t>();
            } else if (k == "samples_per_question") {
                c.samples_per_question = v.get<std::size_t>();
            } else if (k == "temperatures") {
                c.temperatures = v.get<std::vector<double>>();
            } else if (k == "questions_per_iteration") {
                c.questions_per_iteration = v.get<std::size_t>();
            } else if (k == "loop_mode") {
                c.loop_mode = parse_loop_mode(v.get<std::string>());
            } else if (k == "mixture_fraction") {
                c.mixture_fraction = v.get<double>();
            } else if (k == "per_question_cap") {
                c.per_question_cap = v.get<std::size_t>();
            } else if (k == "teacher_checkpoint") {
                c.teacher_checkpoint = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
            } else if (k == "base_checkpoint") {
                c.base_checkpoint = v.is_null() ? std::nullopt : std::optional(v.get<std::string>());
            } else if (k == "eval_sets") {
                c.eval_sets.clear();
                for (auto et = v.begin(); et != v.end(); ++et) {
                    c.eval_sets[tasks::parse_task_kind(et.key())] = et->get<std::size_t>();
                }
            } else if (k == "eval_samples") {
                c.eval_samples = v.get<std::size_t>();
            } else if (k == "pass_k_values") {
                c.pass_k_values = v.get<std::vector<std::size_t>>();
            } else if (k == "calibration_size") {
                c.calibration_size = v.get<std::size_t>();
            } else if (k == "max_new_tokens") {
                c.max_new_tokens = v.get<std::size_t>();
            } else if (k == "seed") {
                c.seed = v.get<std::uint64_t>();
            } else {
                throw ConfigError("unknown lab config key '" + k + "'");
            }
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("lab config has a value of the wrong type: ") + e.what());
    }
    c.validate();
    return c;
}

LabConfig LabConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open config '" + path.string() + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

std::string LabConfig::hash() const {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(to_json())));
    return buf;
}

} // namespace immlab::lab
