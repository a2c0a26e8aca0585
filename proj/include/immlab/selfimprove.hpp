#pragma once

// Synthesize -> filter -> fine-tune -> (merge) -> evaluate loop on the toy model.

#include "immlab/analysis.hpp"
#include "immlab/checkpoint.hpp"
#include "immlab/merge.hpp"
#include "immlab/tasks.hpp"
#include "immlab/toylm.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace immlab::lab {

enum class LoopMode { Vanilla, Mixture, Accumulate, Imm, Iimm };

std::string_view to_string(LoopMode m);
LoopMode parse_loop_mode(std::string_view s);
bool is_merging(LoopMode m);

struct LabConfig {
    lm::ModelConfig model;
    // Base-model training on the pretraining corpus.
    lm::TrainConfig pretrain{.learning_rate = 2e-3, .epochs = 4};
    // Fine-tuning inside each iteration.
    lm::TrainConfig train;
    tasks::CorpusSpec corpus;
    // alpha, drop_rate_p, master_seed, importance; the mode follows loop_mode.
    MergeSpec merge;

    std::size_t iterations = 3;
    std::size_t samples_per_question = 4;
    std::vector<double> temperatures = {0.2, 0.4, 0.6};
    std::size_t questions_per_iteration = 2000;
    LoopMode loop_mode = LoopMode::Imm;
    double mixture_fraction = 0.25;
    std::size_t per_question_cap = 2;
    std::optional<std::string> teacher_checkpoint;
    // Skips pretraining when set.
    std::optional<std::string> base_checkpoint;
    std::map<tasks::TaskKind, std::size_t> eval_sets = {{tasks::TaskKind::Add, 100},
                                                        {tasks::TaskKind::Sub, 100},
                                                        {tasks::TaskKind::LongAdd, 100},
                                                        {tasks::TaskKind::Mul1, 100}};
    std::size_t eval_samples = 8;
    std::vector<std::size_t> pass_k_values = {1, 2, 4, 8};
    std::size_t calibration_size = 128;
    std::size_t max_new_tokens = 96;
    std::uint64_t seed = 0;

    void validate() const;
    std::string to_json() const; // canonical, pretty-printed
    static LabConfig from_json(std::string_view text);
    static LabConfig load(const std::filesystem::path& path);
    // Hex FNV-1a of the canonical JSON.
    std::string hash() const;
};

// ---- pass@k ---------------------------------------------------------------------

// 1 - C(M - c, k) / C(M, k) in product form; exactly 1 when c > M - k.
double pass_at_k(std::size_t M, std::size_t c, std::size_t k);
// Signed overload that reports negative inputs as ConfigError.
double pass_at_k(long long M, long long c, long long k);

// ---- evaluation -----------------------------------------------------------------

struct KindEval {
    tasks::TaskKind kind = tasks::TaskKind::Add;
    std::vector<std::size_t> correct_counts; // c per question
    std::map<std::size_t, double> pass_at_k; // k -> mean over questions
};

struct EvalReport {
    std::size_t samples_per_question = 0; // M
    std::vector<KindEval> kinds;
    std::uint64_t seed = 0;
    double wall_clock_seconds = 0.0;

    const KindEval& at(tasks::TaskKind k) const;
    double in_domain_pass1() const;
    double out_of_domain_mean_pass1() const;
};

// Eval questions depend only on the config seed, so every model in a run is
// scored on the same questions with the same sampling streams.
std::vector<tasks::ReasoningExample> eval_questions(const LabConfig& lcfg, tasks::TaskKind kind);

EvalReport evaluate_model(const Checkpoint& model, const LabConfig& lcfg);

std::string to_json(const EvalReport& r);

// ---- synthesis ------------------------------------------------------------------

struct SynthesisResult {
    std::vector<tasks::ReasoningExample> kept; // rationale holds the sampled completion
    std::size_t synthesized = 0;
};

// Anything that maps sampling requests to completions; the toy model in the lab.
using Generator = std::function<std::vector<std::string>(const std::vector<lm::SampleRequest>&)>;

Generator model_generator(const Checkpoint& model);

// k_gen completions per question, temperature cycling, seeds derived from
// (seed, question index, sample index). Keeps verified completions up to cap
// per question, in generation order.
SynthesisResult synthesize_dataset(const Generator& generator,
                                   const std::vector<tasks::ReasoningExample>& questions,
                                   std::size_t k_gen, const std::vector<double>& temperatures,
                                   std::size_t per_question_cap, std::uint64_t seed,
                                   std::size_t max_new_tokens = 96);

// ---- training-set policy --------------------------------------------------------

using Dataset = std::vector<tasks::ReasoningExample>;

Dataset assemble_training_set(const std::vector<Dataset>& history, LoopMode mode, double beta,
                              std::uint64_t seed);

// ---- the loop -------------------------------------------------------------------

struct IterationRecord {
    std::size_t t = 0;
    std::size_t synthesized_count = 0;
    std::size_t filtered_count = 0;
    std::size_t training_set_size = 0;
    bool sft_skipped = false;
    std::string dataset_path;
    std::string training_set_path;
    std::string sft_checkpoint;
    std::optional<std::string> merged_checkpoint;
    std::optional<std::uint64_t> dare_seed;
    EvalReport sft_eval;
    std::optional<EvalReport> merge_eval;
    LayerImportance importance;  // of the model that entered the iteration
    LayerChange change_from_base; // base -> model leaving the iteration
    LayerChange sft_change;       // model entering -> fine-tuned model
    std::string analysis_csv;
    double wall_clock_seconds = 0.0;

    const EvalReport& final_eval() const { return merge_eval ? *merge_eval : sft_eval; }
};

struct LabState {
    Checkpoint base;
    Checkpoint current; // model that enters the next iteration
    std::vector<Dataset> history;
};

// Paths in the record are relative to out_dir.
IterationRecord run_iteration(LabState& state, const LabConfig& lcfg, std::size_t t,
                              const std::filesystem::path& out_dir);

struct LabResult {
    EvalReport base_eval;
    std::vector<IterationRecord> records;
    std::filesystem::path manifest_path;
};

// Base model (trained or loaded), T iterations, then manifest.json,
// pass_at_k.csv and change_percent.csv in out_dir.
LabResult run_lab(const LabConfig& lcfg, const std::filesystem::path& out_dir);

// Trains the base model from scratch on the pretraining corpus.
Checkpoint pretrain_base(const LabConfig& lcfg);

// ID calibration slice: gold ADD rationales drawn from the config seed.
std::vector<CalibrationPair> calibration_slice(const LabConfig& lcfg);

// Manifest with every "wall_clock_seconds" member removed, for comparisons.
std::string strip_wall_clock(std::string_view manifest_json);

} // namespace immlab::lab
