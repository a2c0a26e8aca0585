#include "immlab/errors.hpp"
#include "immlab/rng.hpp"
#include "immlab/selfimprove.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <memory>
#include <numeric>

namespace immlab::lab {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string kind_name(tasks::TaskKind k) { return std::string(tasks::to_string(k)); }

std::string num(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
}

void write_text(const fs::path& p, const std::string& text) {
    const fs::path tmp = p.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << text;
        out.flush();
        if (!out) {
            throw IoError("cannot write '" + p.string() + "'");
        }
    }
    std::error_code ec;
    fs::rename(tmp, p, ec);
    if (ec) {
        throw IoError("cannot move '" + tmp.string() + "' into place: " + ec.message());
    }
}

std::vector<tasks::ReasoningExample> draw_questions(tasks::TaskKind kind, std::size_t n, std::uint64_t seed) {
    SeededStream s(seed);
    std::vector<tasks::ReasoningExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(tasks::gen_example(kind, s));
    }
    return out;
}

// Percentages only when some block moved; identical models give empty percentages.
LayerChange change_between(const Checkpoint& a, const Checkpoint& b) {
    LayerChange c = layer_change_norms(a, b);
    const double total = std::accumulate(c.per_layer.begin(), c.per_layer.end(), 0.0);
    if (total > 0.0) {
        for (double v : c.per_layer) {
            c.percent_per_layer.push_back(100.0 * v / total);
        }
    }
    return c;
}

std::vector<lm::Sequence> tokenize_dataset(const Dataset& d) {
    std::vector<lm::Sequence> out;
    out.reserve(d.size());
    for (const auto& e : d) {
        out.push_back(tasks::tokenize_pair(e.prompt, e.rationale));
    }
    return out;
}

void require_sound(const Checkpoint& merged, const Checkpoint& base) {
    assert_congruent(merged, base);
    for (const auto& [name, t] : merged.tensors) {
        if (!t.all_finite()) {
            throw NumericError("merged tensor '" + name + "' is not finite");
        }
    }
}

ordered_json eval_to_json(const EvalReport& r) {
    ordered_json kinds = ordered_json::object();
    for (const auto& k : r.kinds) {
        ordered_json pk = ordered_json::object();
        for (const auto& [kk, v] : k.pass_at_k) {
            pk[std::to_string(kk)] = v;
        }
        kinds[kind_name(k.kind)] = {{"domain", tasks::is_in_domain(k.kind) ? "ID" : "OOD"},
                                    {"questions", k.correct_counts.size()},
                                    {"correct_counts", k.correct_counts},
                                    {"pass_at_k", pk}};
    }
    return {{"samples_per_question", r.samples_per_question},
            {"seed", r.seed},
            {"kinds", kinds},
            {"wall_clock_seconds", r.wall_clock_seconds}};
}

ordered_json change_to_json(const LayerChange& c) {
    return {{"per_layer", c.per_layer}, {"nonlayer", c.nonlayer}, {"percent_per_layer", c.percent_per_layer}};
}

ordered_json record_to_json(const IterationRecord& r) {
    ordered_json j;
    j["t"] = r.t;
    j["synthesized_count"] = r.synthesized_count;
    j["filtered_count"] = r.filtered_count;
    j["training_set_size"] = r.training_set_size;
    j["sft_skipped"] = r.sft_skipped;
    j["dataset"] = r.dataset_path;
    j["training_set"] = r.training_set_path;
    j["sft_checkpoint"] = r.sft_checkpoint;
    j["merged_checkpoint"] = r.merged_checkpoint ? ordered_json(*r.merged_checkpoint) : ordered_json(nullptr);
    j["dare_seed"] = r.dare_seed ? ordered_json(*r.dare_seed) : ordered_json(nullptr);
    j["analysis_csv"] = r.analysis_csv;
    j["importance"] = {{"per_layer", r.importance.per_layer},
                       {"nonlayer", r.importance.nonlayer},
                       {"calibration_set_id", r.importance.calibration_set_id},
                       {"token_count", r.importance.token_count}};
    j["change_from_base"] = change_to_json(r.change_from_base);
    j["sft_change"] = change_to_json(r.sft_change);
    j["sft_eval"] = eval_to_json(r.sft_eval);
    j["merge_eval"] = r.merge_eval ? eval_to_json(*r.merge_eval) : ordered_json(nullptr);
    j["wall_clock_seconds"] = r.wall_clock_seconds;
    return j;
}

void strip_key(nlohmann::json& j, const std::string& key) {
    if (j.is_object()) {
        j.erase(key);
        for (auto& [k, v] : j.items()) {
            strip_key(v, key);
        }
    } else if (j.is_array()) {
        for (auto& v : j) {
            strip_key(v, key);
        }
    }
}

} // namespace

// ---- evaluation -------------------------------------------------------------------

const KindEval& EvalReport::at(tasks::TaskKind k) const {
    for (const auto& e : kinds) {
        if (e.kind == k) {
            return e;
        }
    }
    throw DataError("evaluation has no " + kind_name(k) + " results");
}

double EvalReport::in_domain_pass1() const {
    for (const auto& e : kinds) {
        if (tasks::is_in_domain(e.kind)) {
            return e.pass_at_k.at(1);
        }
    }
    throw DataError("evaluation has no in-domain results");
}

double EvalReport::out_of_domain_mean_pass1() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& e : kinds) {
        if (!tasks::is_in_domain(e.kind)) {
            sum += e.pass_at_k.at(1);
            ++n;
        }
    }
    if (n == 0) {
        throw DataError("evaluation has no out-of-domain results");
    }
    return sum / static_cast<double>(n);
}

std::vector<tasks::ReasoningExample> eval_questions(const LabConfig& lcfg, tasks::TaskKind kind) {
    const auto it = lcfg.eval_sets.find(kind);
    if (it == lcfg.eval_sets.end()) {
        return {};
    }
    return draw_questions(kind, it->second, derive_tensor_seed(lcfg.seed, "eval." + kind_name(kind)));
}

Generator model_generator(const Checkpoint& model) {
    auto params = std::make_shared<const lm::Params<float>>(lm::params_from_checkpoint<float>(model));
    return [params](const std::vector<lm::SampleRequest>& reqs) {
        const auto toks = lm::sample_batch(*params, reqs);
        std::vector<std::string> out;
        out.reserve(toks.size());
        for (const auto& t : toks) {
            out.push_back(tasks::detokenize(t));
        }
        return out;
    };
}

EvalReport evaluate_model(const Checkpoint& model, const LabConfig& lcfg) {
    const auto t0 = Clock::now();
    const std::size_t M = lcfg.eval_samples;
    for (std::size_t k : lcfg.pass_k_values) {
        if (k == 0 || k > M) {
            throw ConfigError("pass@k value " + std::to_string(k) + " exceeds eval_samples");
        }
    }
    if (lcfg.eval_sets.empty()) {
        throw ConfigError("no evaluation sets configured");
    }
    EvalReport report;
    report.samples_per_question = M;
    report.seed = lcfg.seed;

    std::vector<std::vector<tasks::ReasoningExample>> questions;
    std::vector<lm::SampleRequest> reqs;
    for (const auto& [kind, n] : lcfg.eval_sets) {
        questions.push_back(eval_questions(lcfg, kind));
        if (questions.back().empty()) {
            throw ConfigError("eval set for " + kind_name(kind) + " is empty");
        }
        const std::uint64_t kseed = derive_tensor_seed(lcfg.seed, "eval.samples." + kind_name(kind));
        for (std::size_t i = 0; i < questions.back().size(); ++i) {
            const auto prompt = tasks::tokenize_prompt(questions.back()[i].prompt);
            const std::uint64_t qseed = derive_tensor_seed(kseed, "question." + std::to_string(i));
            for (std::size_t j = 0; j < M; ++j) {
                reqs.push_back({prompt, lcfg.temperatures[j % lcfg.temperatures.size()], lcfg.max_new_tokens,
                                derive_tensor_seed(qseed, "sample." + std::to_string(j))});
            }
        }
    }
    const auto completions = model_generator(model)(reqs);

    std::size_t r = 0;
    std::size_t qi = 0;
    for (const auto& [kind, n] : lcfg.eval_sets) {
        KindEval ke;
        ke.kind = kind;
        for (const auto& q : questions[qi]) {
            std::size_t c = 0;
            for (std::size_t j = 0; j < M; ++j) {
                c += tasks::verify(q.final_answer, completions[r++]) ? 1 : 0;
            }
            ke.correct_counts.push_back(c);
        }
        for (std::size_t k : lcfg.pass_k_values) {
            double sum = 0.0;
            for (std::size_t c : ke.correct_counts) {
                sum += pass_at_k(M, c, k);
            }
            ke.pass_at_k[k] = sum / static_cast<double>(ke.correct_counts.size());
        }
        report.kinds.push_back(std::move(ke));
        ++qi;
    }
    report.wall_clock_seconds = seconds_since(t0);
    return report;
}

std::string to_json(const EvalReport& r) { return eval_to_json(r).dump(2); }

// ---- synthesis ----------------------------------------------------------------------

SynthesisResult synthesize_dataset(const Generator& generator,
                                   const std::vector<tasks::ReasoningExample>& questions, std::size_t k_gen,
                                   const std::vector<double>& temperatures, std::size_t per_question_cap,
                                   std::uint64_t seed, std::size_t max_new_tokens) {
    if (k_gen == 0) {
        throw ConfigError("samples_per_question must be at least 1");
    }
    if (temperatures.empty()) {
        throw ConfigError("temperatures must be nonempty");
    }
    std::vector<lm::SampleRequest> reqs;
    reqs.reserve(questions.size() * k_gen);
    for (std::size_t i = 0; i < questions.size(); ++i) {
        const auto prompt = tasks::tokenize_prompt(questions[i].prompt);
        const std::uint64_t qseed = derive_tensor_seed(seed, "question." + std::to_string(i));
        for (std::size_t j = 0; j < k_gen; ++j) {
            reqs.push_back({prompt, temperatures[j % temperatures.size()], max_new_tokens,
                            derive_tensor_seed(qseed, "sample." + std::to_string(j))});
        }
    }
    const auto completions = generator(reqs);
    if (completions.size() != reqs.size()) {
        throw DataError("generator returned the wrong number of completions");
    }
    SynthesisResult out;
    out.synthesized = reqs.size();
    for (std::size_t i = 0; i < questions.size(); ++i) {
        std::size_t kept = 0;
        for (std::size_t j = 0; j < k_gen && kept < per_question_cap; ++j) {
            const std::string& c = completions[i * k_gen + j];
            if (tasks::verify(questions[i].final_answer, c)) {
                out.kept.push_back({questions[i].prompt, c, questions[i].final_answer, questions[i].kind});
                ++kept;
            }
        }
    }
    return out;
}

// ---- training-set policy ----------------------------------------------------------

Dataset assemble_training_set(const std::vector<Dataset>& history, LoopMode mode, double beta,
                              std::uint64_t seed) {
    if (history.empty()) {
        throw DataError("training-set assembly needs at least one iteration of data");
    }
    if (!(beta >= 0.0 && beta <= 1.0)) {
        throw ConfigError("mixture fraction must lie in [0, 1]");
    }
    switch (mode) {
    case LoopMode::Vanilla:
    case LoopMode::Imm:
    case LoopMode::Iimm:
        return history.back();
    case LoopMode::Accumulate: {
        Dataset out;
        for (const auto& d : history) {
            out.insert(out.end(), d.begin(), d.end());
        }
        return out;
    }
    case LoopMode::Mixture: {
        Dataset out = history.back();
        if (history.size() < 2) {
            return out;
        }
        const Dataset& prev = history[history.size() - 2];
        const auto n = static_cast<std::size_t>(std::floor(beta * static_cast<double>(prev.size())));
        std::vector<std::size_t> idx(prev.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        SeededStream s(seed);
        tasks::shuffle(idx, s);
        for (std::size_t i = 0; i < n; ++i) {
            out.push_back(prev[idx[i]]);
        }
        return out;
    }
    }
    throw ConfigError("unhandled loop mode");
}

// ---- the loop -----------------------------------------------------------------------

std::vector<CalibrationPair> calibration_slice(const LabConfig& lcfg) {
    const auto qs = draw_questions(tasks::TaskKind::Add, lcfg.calibration_size,
                                   derive_tensor_seed(lcfg.seed, "calibration"));
    std::vector<CalibrationPair> out;
    out.reserve(qs.size());
    for (const auto& q : qs) {
        out.push_back({q.prompt, q.rationale});
    }
    return out;
}

Checkpoint pretrain_base(const LabConfig& lcfg) {
    SeededStream cs(derive_tensor_seed(lcfg.seed, "corpus"));
    const auto corpus = tasks::build_pretrain_corpus(lcfg.corpus, cs);
    const auto data = tokenize_dataset(corpus);
    auto params = lm::params_from_checkpoint<float>(lm::init_params(lcfg.model, derive_tensor_seed(lcfg.seed, "init")));
    lm::TrainConfig tc = lcfg.pretrain;
    tc.seed = derive_tensor_seed(lcfg.seed, "pretrain." + std::to_string(lcfg.pretrain.seed));
    const auto report = lm::train_sft(params, data, tc);
    const std::size_t tail = std::min<std::size_t>(50, report.step_losses.size());
    double loss = 0.0;
    for (std::size_t i = report.step_losses.size() - tail; i < report.step_losses.size(); ++i) {
        loss += report.step_losses[i] / static_cast<double>(tail);
    }
    return lm::to_checkpoint(params, {{"lab.role", "base"},
                                      {"lab.pretrain_steps", std::to_string(report.steps)},
                                      {"lab.pretrain_final_loss", num(loss)}});
}

IterationRecord run_iteration(LabState& state, const LabConfig& lcfg, std::size_t t, const fs::path& out_dir) {
    const auto t0 = Clock::now();
    IterationRecord rec;
    rec.t = t;
    const std::string rel = "iter_" + std::to_string(t);
    const fs::path dir = out_dir / rel;
    fs::create_directories(dir);

    const Generator gen = lcfg.teacher_checkpoint ? model_generator(load_checkpoint(*lcfg.teacher_checkpoint))
                                                  : model_generator(state.current);
    const auto questions = draw_questions(tasks::TaskKind::Add, lcfg.questions_per_iteration,
                                          derive_tensor_seed(lcfg.seed, "questions." + std::to_string(t)));
    SynthesisResult synth = synthesize_dataset(gen, questions, lcfg.samples_per_question, lcfg.temperatures,
                                               lcfg.per_question_cap,
                                               derive_tensor_seed(lcfg.seed, "synthesis." + std::to_string(t)),
                                               lcfg.max_new_tokens);
    rec.synthesized_count = synth.synthesized;
    rec.filtered_count = synth.kept.size();
    if (synth.kept.empty() && t == 0) {
        throw AbortError("no sampled solution passed verification at iteration 0 (" +
                         std::to_string(synth.synthesized) +
                         " samples); the base model is too weak to self-improve");
    }
    rec.dataset_path = rel + "/dataset.jsonl";
    tasks::save_jsonl(synth.kept, out_dir / rec.dataset_path);
    state.history.push_back(std::move(synth.kept));

    const Dataset train_set = assemble_training_set(state.history, lcfg.loop_mode, lcfg.mixture_fraction,
                                                    derive_tensor_seed(lcfg.seed, "mixture." + std::to_string(t)));
    rec.training_set_size = train_set.size();
    rec.training_set_path = rel + "/training_set.jsonl";
    tasks::save_jsonl(train_set, out_dir / rec.training_set_path);

    rec.importance = layer_importance(state.current, calibration_slice(lcfg));

    const std::map<std::string, std::string> tags = {{"lab.role", "sft"}, {"lab.iteration", std::to_string(t)}};
    Checkpoint sft;
    if (state.history.back().empty()) {
        rec.sft_skipped = true;
        sft = state.current;
        for (const auto& [k, v] : tags) {
            sft.metadata[k] = v;
        }
    } else {
        auto params = lm::params_from_checkpoint<float>(state.current);
        lm::TrainConfig tc = lcfg.train;
        tc.seed = derive_tensor_seed(lcfg.seed, "sft." + std::to_string(t) + "." + std::to_string(lcfg.train.seed));
        lm::train_sft(params, tokenize_dataset(train_set), tc);
        sft = lm::to_checkpoint(params, tags);
    }
    rec.sft_checkpoint = rel + "/sft.safetensors";
    save_checkpoint(sft, out_dir / rec.sft_checkpoint);
    rec.sft_eval = evaluate_model(sft, lcfg);

    Checkpoint next = sft;
    if (is_merging(lcfg.loop_mode) && !rec.sft_skipped) {
        MergeSpec spec = lcfg.merge;
        spec.mode = lcfg.loop_mode == LoopMode::Iimm ? MergeMode::Iimm : MergeMode::Imm;
        spec.master_seed = derive_tensor_seed(lcfg.merge.master_seed, "iteration." + std::to_string(t));
        if (spec.mode == MergeMode::Iimm) {
            if (!spec.importance) {
                spec.importance = rec.importance.per_layer;
            }
        } else {
            spec.importance.reset();
        }
        Checkpoint merged = merge_iteration(state.base, state.current, sft, spec, t);
        require_sound(merged, state.base);
        rec.dare_seed = spec.master_seed;
        rec.merged_checkpoint = rel + "/merged.safetensors";
        save_checkpoint(merged, out_dir / *rec.merged_checkpoint);
        rec.merge_eval = evaluate_model(merged, lcfg);
        next = std::move(merged);
    }

    rec.change_from_base = change_between(state.base, next);
    rec.sft_change = change_between(state.current, sft);
    rec.analysis_csv = rel + "/analysis.csv";
    emit_analysis_report(rec.importance, rec.change_from_base, out_dir / rec.analysis_csv);
    emit_analysis_report(rec.importance, rec.sft_change, dir / "sft_analysis.csv");

    state.current = std::move(next);
    rec.wall_clock_seconds = seconds_since(t0);
    return rec;
}

LabResult run_lab(const LabConfig& lcfg, const fs::path& out_dir) {
    lcfg.validate();
    const auto t0 = Clock::now();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) {
        throw IoError("cannot create output directory '" + out_dir.string() + "'");
    }

    LabState state;
    state.base = lcfg.base_checkpoint ? load_checkpoint(*lcfg.base_checkpoint) : pretrain_base(lcfg);
    if (lm::ModelConfig::from_checkpoint(state.base) != lcfg.model) {
        throw ConfigError("base checkpoint architecture differs from the configured model");
    }
    save_checkpoint(state.base, out_dir / "base.safetensors");
    state.current = state.base;

    LabResult result;
    result.base_eval = evaluate_model(state.base, lcfg);
    for (std::size_t t = 0; t < lcfg.iterations; ++t) {
        result.records.push_back(run_iteration(state, lcfg, t, out_dir));
    }

    ordered_json table = ordered_json::array();
    std::string csv = "iteration,stage,task_kind,k,pass_at_k\n";
    auto add_rows = [&](long long it, const char* stage, const EvalReport& r) {
        for (const auto& k : r.kinds) {
            for (const auto& [kk, v] : k.pass_at_k) {
                table.push_back({{"iteration", it}, {"stage", stage}, {"task_kind", kind_name(k.kind)},
                                 {"domain", tasks::is_in_domain(k.kind) ? "ID" : "OOD"}, {"k", kk},
                                 {"pass_at_k", v}});
                csv += std::to_string(it) + "," + stage + "," + kind_name(k.kind) + "," + std::to_string(kk) +
                       "," + num(v) + "\n";
            }
        }
    };
    add_rows(-1, "Base", result.base_eval);
    std::string change_csv = "iteration,layer_index,weight_change,change_percent\n";
    for (const auto& r : result.records) {
        add_rows(static_cast<long long>(r.t), "SFT", r.sft_eval);
        if (r.merge_eval) {
            add_rows(static_cast<long long>(r.t), "Merge", *r.merge_eval);
        }
        for (std::size_t n = 0; n < r.change_from_base.per_layer.size(); ++n) {
            change_csv += std::to_string(r.t) + "," + std::to_string(n) + "," +
                          num(r.change_from_base.per_layer[n]) + "," +
                          (r.change_from_base.percent_per_layer.empty()
                               ? std::string()
                               : num(r.change_from_base.percent_per_layer[n])) +
                          "\n";
        }
    }
    write_text(out_dir / "pass_at_k.csv", csv);
    write_text(out_dir / "change_percent.csv", change_csv);

    ordered_json m;
    m["config_hash"] = lcfg.hash();
    m["config"] = ordered_json::parse(lcfg.to_json());
    m["seeds"] = {{"run", lcfg.seed}, {"merge_master", lcfg.merge.master_seed}};
    m["loop_mode"] = std::string(to_string(lcfg.loop_mode));
    ordered_json base = {{"checkpoint", "base.safetensors"}, {"eval", eval_to_json(result.base_eval)}};
    for (const char* key : {"lab.pretrain_steps", "lab.pretrain_final_loss"}) {
        if (auto it = state.base.metadata.find(key); it != state.base.metadata.end()) {
            base[std::string(key).substr(4)] = it->second;
        }
    }
    m["base"] = base;
    ordered_json recs = ordered_json::array();
    for (const auto& r : result.records) {
        recs.push_back(record_to_json(r));
    }
    m["iterations"] = recs;
    m["pass_at_k_table"] = table;
    m["files"] = {{"pass_at_k_csv", "pass_at_k.csv"}, {"change_percent_csv", "change_percent.csv"}};
    m["wall_clock_seconds"] = seconds_since(t0);
    result.manifest_path = out_dir / "manifest.json";
    write_text(result.manifest_path, m.dump(2) + "\n");
    return result;
}

std::string strip_wall_clock(std::string_view manifest_json) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(manifest_json);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest is not valid JSON: ") + e.what());
    }
    strip_key(j, "wall_clock_seconds");
    return j.dump();
}

} // namespace immlab::lab
