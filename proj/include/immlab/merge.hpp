#pragma once

#include "immlab/checkpoint.hpp"

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace immlab {

enum class MergeMode { Imm, Iimm, Linear };

std::string_view to_string(MergeMode m);
MergeMode parse_merge_mode(std::string_view s);

struct MergeSpec {
    double alpha = 0.5;
    double drop_rate_p = 0.5;
    MergeMode mode = MergeMode::Imm;
    std::uint64_t master_seed = 0;
    std::optional<std::vector<double>> importance;

    // Range checks; `n_layers` (if given) is checked against the importance length.
    void validate(std::optional<std::size_t> n_layers = std::nullopt) const;

    // JSON document with keys alpha, drop_rate_p, mode, master_seed, importance.
    std::string to_json() const;
    static MergeSpec from_json(std::string_view text);

    friend bool operator==(const MergeSpec&, const MergeSpec&) = default;
};

// Parameter differences are kept in binary64: the difference of two binary32
// values is exact there, so prev + delta reproduces the fine-tuned weights
// bit for bit.
struct DeltaTensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    friend bool operator==(const DeltaTensor&, const DeltaTensor&) = default;
};

struct Delta {
    std::map<std::string, DeltaTensor> tensors;
    std::size_t iteration_t = 0;
    // Set by dare_transform.
    std::optional<double> drop_rate;
    std::optional<std::uint64_t> dare_seed;
};

// delta = theta_sft - theta_prev, elementwise. theta_prev is the model that
// was fine-tuned at iteration t (the base at t = 0, the previous merge after).
Delta compute_delta(const Checkpoint& theta_sft, const Checkpoint& theta_prev, std::size_t t);

// Drop-and-rescale of one tensor: draws one uniform per element (row-major)
// from a stream seeded with `tensor_seed`; u < p zeroes the element, otherwise
// it is divided by (1 - p).
void dare_tensor(std::span<double> values, double p, std::uint64_t tensor_seed);

// Applies dare_tensor to every tensor with seed derive_tensor_seed(master_seed, name).
Delta dare_transform(const Delta& d, double p, std::uint64_t master_seed);

// theta_m = alpha * theta_base + (1 - alpha) * (theta_prev + delta_hat)
Checkpoint imm_merge(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                     const Delta& delta_hat, double alpha);

// Per-layer delta scale N * I_n / sum(I). Exactly 1 everywhere when all
// importance values are equal.
std::vector<double> iimm_layer_scales(std::span<const double> importance);

// As imm_merge, with transformer-block tensors of layer n using
// theta_prev + scale_n * delta_hat. Tensors outside the blocks use scale 1.
Checkpoint iimm_merge(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                      const Delta& delta_hat, double alpha, std::span<const double> importance);

// alpha * a + (1 - alpha) * b
Checkpoint linear_interpolate(const Checkpoint& a, const Checkpoint& b, double alpha);

// Full pipeline for one iteration: delta, DARE, then the merge selected by
// spec.mode. For Linear mode the result is linear_interpolate(base, sft, alpha).
Checkpoint merge_iteration(const Checkpoint& theta_base, const Checkpoint& theta_prev,
                           const Checkpoint& theta_sft, const MergeSpec& spec, std::size_t t);

} // namespace immlab
