#pragma once

#include "immlab/checkpoint.hpp"
#include "immlab/merge.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace immlab {

// Per-layer sum of |dL/dW * W| over every parameter of the layer.
struct LayerImportance {
    std::vector<double> per_layer;
    std::map<std::string, double> nonlayer; // module_kind -> score
    std::string calibration_set_id;
    std::size_t token_count = 0;
};

// Per-layer sum over module tensors of the Frobenius norm of the weight drift.
struct LayerChange {
    std::vector<double> per_layer;
    std::map<std::string, double> nonlayer;
    std::vector<double> percent_per_layer; // sums to 100 over the blocks
};

struct CalibrationPair {
    std::string prompt;
    std::string completion;

    friend auto operator<=>(const CalibrationPair&, const CalibrationPair&) = default;
};

// Groups |g * w| by layer. `grads` must be congruent with `weights`.
LayerImportance importance_from_gradients(const Checkpoint& weights, const Delta& grads,
                                          std::size_t n_layers);

// Gradient of the mean completion-token cross-entropy over the whole
// calibration set (one virtual batch, no update), then importance_from_gradients.
// The set is sorted canonically first, so the result does not depend on the
// order in which pairs are supplied.
LayerImportance layer_importance(const Checkpoint& model, std::vector<CalibrationPair> calibration);

// Drift grouped by layer, without percentages. Never throws for a = b.
LayerChange layer_change_norms(const Checkpoint& a, const Checkpoint& b);

// As layer_change_norms plus percent_per_layer; DataError when no block changed.
LayerChange layer_weight_change(const Checkpoint& a, const Checkpoint& b);

// Writes a CSV (layer_index, importance, weight_change, change_percent) at
// `csv_path`, one row per block followed by NONLAYER:<module> rows, and a JSON
// twin next to it with the .json extension. Without importance the
// importance column is omitted. Empty percentages leave the column blank.
void emit_analysis_report(const std::optional<LayerImportance>& importance, const LayerChange& change,
                          const std::filesystem::path& csv_path);

struct AnalysisReport {
    std::optional<LayerImportance> importance;
    LayerChange change;
};

AnalysisReport load_analysis_report(const std::filesystem::path& json_path);

// Spearman rank correlation with average ranks for ties.
double spearman_correlation(std::span<const double> x, std::span<const double> y);

} // namespace immlab
