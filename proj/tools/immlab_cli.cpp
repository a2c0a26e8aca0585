// immlab: merge, analyze, train, generate, eval and lab subcommands.
// Machine-readable JSON goes to stdout, diagnostics to stderr.
// Exit codes: 0 ok, 2 data/incongruence, 3 usage/config, 4 I/O, 5 aborted run.

#include "immlab/analysis.hpp"
#include "immlab/checkpoint.hpp"
#include "immlab/errors.hpp"
#include "immlab/merge.hpp"
#include "immlab/selfimprove.hpp"
#include "immlab/tasks.hpp"
#include "immlab/toylm.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

using namespace immlab;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

constexpr int kUsageExit = 3;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "'");
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

ordered_json change_json(const LayerChange& c) {
    return {{"per_layer", c.per_layer}, {"nonlayer", c.nonlayer}, {"percent_per_layer", c.percent_per_layer}};
}

// Importance vector from an analysis report JSON or a bare JSON array.
std::vector<double> read_importance(const std::string& path) {
    const std::string text = read_file(path);
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.is_array()) {
            return j.get<std::vector<double>>();
        }
        if (j.is_object() && j.contains("importance") && j["importance"].is_array()) {
            return j["importance"].get<std::vector<double>>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("importance file '" + path + "' is not valid: " + e.what());
    }
    throw ConfigError("importance file '" + path + "' holds neither an array nor an analysis report");
}

lab::LabConfig load_lab_config(const std::string& path) {
    return path.empty() ? lab::LabConfig{} : lab::LabConfig::load(path);
}

void print(const ordered_json& j) { std::cout << j.dump(2) << "\n"; }

// ---- merge ----------------------------------------------------------------------

struct MergeArgs {
    std::string base, sft, prev, out, mode = "imm", importance_file, config;
    std::optional<double> alpha, drop_rate;
    std::optional<std::uint64_t> seed;
    std::size_t iteration = 0;
};

int run_merge(const MergeArgs& a) {
    MergeSpec spec = a.config.empty() ? MergeSpec{} : MergeSpec::from_json(read_file(a.config));
    if (a.alpha) {
        spec.alpha = *a.alpha;
    }
    if (a.drop_rate) {
        spec.drop_rate_p = *a.drop_rate;
    }
    if (a.seed) {
        spec.master_seed = *a.seed;
    }
    spec.mode = parse_merge_mode(a.mode);
    if (spec.mode == MergeMode::Iimm) {
        if (!a.importance_file.empty()) {
            spec.importance = read_importance(a.importance_file);
        } else if (!spec.importance) {
            throw ConfigError("--mode iimm needs --importance-file");
        }
    }
    spec.validate();

    const Checkpoint base = load_checkpoint(a.base);
    const Checkpoint sft = load_checkpoint(a.sft);
    const Checkpoint prev = a.prev.empty() ? base : load_checkpoint(a.prev);
    Checkpoint merged = merge_iteration(base, prev, sft, spec, a.iteration);
    // The written file keeps the base model's metadata; provenance goes to stdout.
    merged.metadata = base.metadata;
    save_checkpoint(merged, a.out);

    ordered_json j = {{"out", a.out},
                      {"mode", std::string(to_string(spec.mode))},
                      {"alpha", spec.alpha},
                      {"drop_rate", spec.drop_rate_p},
                      {"seed", spec.master_seed},
                      {"iteration", a.iteration}};
    j["change_from_prev"] = change_json(layer_change_norms(prev, merged));
    j["change_from_base"] = change_json(layer_change_norms(base, merged));
    print(j);
    std::cerr << "merged checkpoint written to " << a.out << "\n";
    return 0;
}

// ---- analyze --------------------------------------------------------------------

struct AnalyzeArgs {
    std::string model, against, calibration, out;
};

int run_analyze(const AnalyzeArgs& a) {
    const Checkpoint model = load_checkpoint(a.model);
    const Checkpoint against = load_checkpoint(a.against);
    std::optional<LayerImportance> importance;
    if (!a.calibration.empty()) {
        std::vector<CalibrationPair> pairs;
        for (const auto& e : tasks::load_jsonl(a.calibration)) {
            pairs.push_back({e.prompt, e.rationale});
        }
        importance = layer_importance(model, pairs);
    }
    LayerChange change = layer_change_norms(against, model);
    std::optional<std::string> percent_error;
    try {
        change = layer_weight_change(against, model);
    } catch (const DataError& e) {
        percent_error = e.what();
    }
    emit_analysis_report(importance, change, a.out);
    fs::path json_path = a.out;
    json_path.replace_extension(".json");

    ordered_json j = {{"csv", a.out}, {"json", json_path.string()}, {"weight_change", change_json(change)}};
    if (importance) {
        j["importance"] = importance->per_layer;
        j["calibration_set_id"] = importance->calibration_set_id;
    }
    print(j);
    if (percent_error) {
        std::cerr << "error: " << *percent_error << "\n";
        return 2;
    }
    return 0;
}

// ---- train ----------------------------------------------------------------------

struct TrainArgs {
    std::string config, model, data, out;
    bool pretrain = false;
    std::optional<double> lr, weight_decay, warmup;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<std::uint64_t> seed;
};

int run_train(const TrainArgs& a) {
    lab::LabConfig lcfg = load_lab_config(a.config);
    lm::TrainConfig& tc = a.pretrain ? lcfg.pretrain : lcfg.train;
    if (a.lr) {
        tc.learning_rate = *a.lr;
    }
    if (a.weight_decay) {
        tc.weight_decay = *a.weight_decay;
    }
    if (a.warmup) {
        tc.warmup_fraction = *a.warmup;
    }
    if (a.epochs) {
        tc.epochs = *a.epochs;
    }
    if (a.batch_size) {
        tc.batch_size = *a.batch_size;
    }
    if (a.seed) {
        lcfg.seed = *a.seed;
        tc.seed = *a.seed;
    }
    lcfg.validate();

    Checkpoint out;
    ordered_json j;
    if (a.pretrain) {
        if (!a.data.empty() || !a.model.empty()) {
            throw ConfigError("--pretrain builds its own corpus and model; drop --data/--model");
        }
        out = lab::pretrain_base(lcfg);
        j["corpus_size"] = lcfg.corpus.total;
        j["steps"] = out.metadata.at("lab.pretrain_steps");
        j["final_loss"] = out.metadata.at("lab.pretrain_final_loss");
    } else {
        if (a.data.empty()) {
            throw ConfigError("train needs --data (or --pretrain)");
        }
        const Checkpoint init =
            a.model.empty() ? lm::init_params(lcfg.model, derive_tensor_seed(lcfg.seed, "init")) : load_checkpoint(a.model);
        auto params = lm::params_from_checkpoint<float>(init);
        std::vector<lm::Sequence> data;
        for (const auto& e : tasks::load_jsonl(a.data)) {
            data.push_back(tasks::tokenize_pair(e.prompt, e.rationale));
        }
        const auto report = lm::train_sft(params, data, tc);
        out = lm::to_checkpoint(params);
        j["examples"] = data.size();
        j["steps"] = report.steps;
        j["final_loss"] = report.step_losses.empty() ? ordered_json(nullptr) : ordered_json(report.step_losses.back());
    }
    save_checkpoint(out, a.out);
    j["out"] = a.out;
    print(j);
    return 0;
}

// ---- generate -------------------------------------------------------------------

struct GenerateArgs {
    std::string config, model, out, kind = "ADD";
    std::optional<std::size_t> questions, k_gen, cap;
    std::optional<std::uint64_t> seed;
    std::vector<double> temperatures;
};

int run_generate(const GenerateArgs& a) {
    lab::LabConfig lcfg = load_lab_config(a.config);
    if (a.questions) {
        lcfg.questions_per_iteration = *a.questions;
    }
    if (a.k_gen) {
        lcfg.samples_per_question = *a.k_gen;
    }
    if (a.cap) {
        lcfg.per_question_cap = *a.cap;
    }
    if (a.seed) {
        lcfg.seed = *a.seed;
    }
    if (!a.temperatures.empty()) {
        lcfg.temperatures = a.temperatures;
    }
    lcfg.validate();
    const auto kind = tasks::parse_task_kind(a.kind);
    const Checkpoint model = load_checkpoint(a.model);

    SeededStream qs(derive_tensor_seed(lcfg.seed, "questions"));
    std::vector<tasks::ReasoningExample> questions;
    for (std::size_t i = 0; i < lcfg.questions_per_iteration; ++i) {
        questions.push_back(tasks::gen_example(kind, qs));
    }
    const auto result = lab::synthesize_dataset(lab::model_generator(model), questions, lcfg.samples_per_question,
                                                lcfg.temperatures, lcfg.per_question_cap,
                                                derive_tensor_seed(lcfg.seed, "synthesis"), lcfg.max_new_tokens);
    tasks::save_jsonl(result.kept, a.out);
    print({{"out", a.out},
           {"questions", questions.size()},
           {"synthesized", result.synthesized},
           {"filtered", result.kept.size()},
           {"seed", lcfg.seed}});
    return 0;
}

// ---- eval -----------------------------------------------------------------------

struct EvalArgs {
    std::string config, model, out;
    std::optional<std::size_t> samples;
    std::optional<std::uint64_t> seed;
};

int run_eval(const EvalArgs& a) {
    lab::LabConfig lcfg = load_lab_config(a.config);
    if (a.samples) {
        lcfg.eval_samples = *a.samples;
    }
    if (a.seed) {
        lcfg.seed = *a.seed;
    }
    lcfg.validate();
    const auto report = lab::evaluate_model(load_checkpoint(a.model), lcfg);
    const std::string text = lab::to_json(report);
    if (!a.out.empty()) {
        std::ofstream out(a.out, std::ios::binary | std::ios::trunc);
        out << text << "\n";
        if (!out) {
            throw IoError("cannot write '" + a.out + "'");
        }
    }
    std::cout << text << "\n";
    return 0;
}

// ---- lab ------------------------------------------------------------------------

struct LabArgs {
    std::string config, out_dir, mode, base_checkpoint, teacher;
    std::optional<std::size_t> iterations;
    std::optional<std::uint64_t> seed;
};

int run_lab_cmd(const LabArgs& a) {
    lab::LabConfig lcfg = load_lab_config(a.config);
    if (!a.mode.empty()) {
        lcfg.loop_mode = lab::parse_loop_mode(a.mode);
    }
    if (a.iterations) {
        lcfg.iterations = *a.iterations;
    }
    if (a.seed) {
        lcfg.seed = *a.seed;
    }
    if (!a.base_checkpoint.empty()) {
        lcfg.base_checkpoint = a.base_checkpoint;
    }
    if (!a.teacher.empty()) {
        lcfg.teacher_checkpoint = a.teacher;
    }
    lcfg.validate();
    std::cerr << "running " << lab::to_string(lcfg.loop_mode) << " for " << lcfg.iterations
              << " iteration(s) into " << a.out_dir << "\n";
    const auto result = lab::run_lab(lcfg, a.out_dir);
    ordered_json iters = ordered_json::array();
    for (const auto& r : result.records) {
        iters.push_back({{"t", r.t},
                         {"synthesized", r.synthesized_count},
                         {"filtered", r.filtered_count},
                         {"training_set", r.training_set_size},
                         {"id_pass1", r.final_eval().in_domain_pass1()},
                         {"ood_mean_pass1", r.final_eval().out_of_domain_mean_pass1()}});
    }
    ordered_json j = {{"manifest", result.manifest_path.string()}, {"config_hash", lcfg.hash()}};
    if (lcfg.eval_sets.contains(tasks::TaskKind::Add)) {
        j["base_id_pass1"] = result.base_eval.in_domain_pass1();
    }
    j["iterations"] = iters;
    print(j);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Checkpoint merging, layer analysis and a toy self-improvement lab"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "immlab 0.1.0");

    MergeArgs ma;
    auto* merge = app.add_subcommand("merge", "Merge a fine-tuned checkpoint back toward the base");
    merge->add_option("--base", ma.base, "Base checkpoint")->required();
    merge->add_option("--sft", ma.sft, "Fine-tuned checkpoint")->required();
    merge->add_option("--prev", ma.prev, "Model that was fine-tuned (default: --base)");
    merge->add_option("--out", ma.out, "Output checkpoint")->required();
    merge->add_option("--alpha", ma.alpha, "Weight of the base model in [0, 1]");
    merge->add_option("--drop-rate", ma.drop_rate, "DARE drop rate in [0, 1)");
    merge->add_option("--mode", ma.mode, "imm, iimm or linear")->capture_default_str();
    merge->add_option("--seed", ma.seed, "DARE master seed");
    merge->add_option("--importance-file", ma.importance_file, "Analysis JSON or array of per-layer importance");
    merge->add_option("--iteration", ma.iteration, "Iteration index recorded with the delta");
    merge->add_option("--config", ma.config, "Merge spec JSON; flags override its keys");

    AnalyzeArgs aa;
    auto* analyze = app.add_subcommand("analyze", "Layer importance and weight-change report");
    analyze->add_option("--model", aa.model, "Checkpoint to analyze")->required();
    analyze->add_option("--against", aa.against, "Reference checkpoint for weight change")->required();
    analyze->add_option("--calibration", aa.calibration, "JSONL calibration examples (enables importance)");
    analyze->add_option("--out", aa.out, "CSV path; a .json twin is written next to it")->required();

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "Fine-tune (or pretrain) the toy model");
    train->add_option("--config", ta.config, "Lab config JSON supplying model/train settings");
    train->add_option("--model", ta.model, "Initial checkpoint (default: fresh init)");
    train->add_option("--data", ta.data, "JSONL training examples");
    train->add_flag("--pretrain", ta.pretrain, "Train a base model on the built-in corpus");
    train->add_option("--out", ta.out, "Output checkpoint")->required();
    train->add_option("--lr", ta.lr, "Learning rate");
    train->add_option("--epochs", ta.epochs, "Epochs");
    train->add_option("--batch-size", ta.batch_size, "Sequences per step");
    train->add_option("--weight-decay", ta.weight_decay, "Decoupled weight decay");
    train->add_option("--warmup", ta.warmup, "Warmup fraction of total steps");
    train->add_option("--seed", ta.seed, "Seed for init and shuffling");

    GenerateArgs ga;
    auto* generate = app.add_subcommand("generate", "Sample and filter rationales for fresh questions");
    generate->add_option("--config", ga.config, "Lab config JSON");
    generate->add_option("--model", ga.model, "Generator checkpoint")->required();
    generate->add_option("--out", ga.out, "Output JSONL of verified samples")->required();
    generate->add_option("--kind", ga.kind, "Task kind (ADD, SUB, LONG_ADD, MUL1)")->capture_default_str();
    generate->add_option("--questions", ga.questions, "Number of questions");
    generate->add_option("--k-gen", ga.k_gen, "Samples per question");
    generate->add_option("--cap", ga.cap, "Verified samples kept per question");
    generate->add_option("--temperatures", ga.temperatures, "Temperatures cycled per sample");
    generate->add_option("--seed", ga.seed, "Seed for questions and sampling");

    EvalArgs ea;
    auto* eval = app.add_subcommand("eval", "pass@k on every configured task kind");
    eval->add_option("--config", ea.config, "Lab config JSON");
    eval->add_option("--model", ea.model, "Checkpoint to evaluate")->required();
    eval->add_option("--out", ea.out, "Also write the report here");
    eval->add_option("--samples", ea.samples, "Samples per question (M)");
    eval->add_option("--seed", ea.seed, "Seed for eval questions and sampling");

    LabArgs la;
    auto* labc = app.add_subcommand("lab", "Run the self-improvement loop");
    labc->add_option("--config", la.config, "Lab config JSON");
    labc->add_option("--out-dir", la.out_dir, "Output directory")->required();
    labc->add_option("--mode", la.mode, "VANILLA, MIXTURE, ACCUMULATE, IMM or IIMM");
    labc->add_option("--iterations", la.iterations, "Number of iterations");
    labc->add_option("--seed", la.seed, "Run seed");
    labc->add_option("--base-checkpoint", la.base_checkpoint, "Reuse a trained base model");
    labc->add_option("--teacher", la.teacher, "Generator checkpoint for distillation");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kUsageExit;
    }

    try {
        if (*merge) {
            return run_merge(ma);
        }
        if (*analyze) {
            return run_analyze(aa);
        }
        if (*train) {
            return run_train(ta);
        }
        if (*generate) {
            return run_generate(ga);
        }
        if (*eval) {
            return run_eval(ea);
        }
        if (*labc) {
            return run_lab_cmd(la);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.exit_code();
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return kUsageExit;
}
