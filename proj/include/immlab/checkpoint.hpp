#pragma once

#include "immlab/tensor.hpp"

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

namespace immlab {

inline constexpr std::string_view kFormatVersion = "1";

// One model's parameters. std::map keeps names unique and iterates in
// ascending byte-lexicographic order, which is also the on-disk order.
struct Checkpoint {
    std::map<std::string, Tensor> tensors;
    std::map<std::string, std::string> metadata;

    const Tensor& at(const std::string& name) const;
    Tensor& at(const std::string& name);
    bool contains(const std::string& name) const { return tensors.contains(name); }
    std::size_t parameter_count() const;

    friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

// Container layout (little-endian):
//   u64 header_len | header_len bytes of JSON | packed f32 data
// JSON maps each tensor name to {"dtype":"F32","shape":[...],"data_offsets":[b,e]}
// with offsets relative to the data section, plus an optional "__metadata__"
// object of string values. The header is space-padded to a multiple of 8.
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// In-memory variants of the same format.
std::string serialize_checkpoint(const Checkpoint& c);
Checkpoint parse_checkpoint(std::string_view bytes);

// (n, "attn.wq") for "layers.n.attn.wq"; layer = nullopt for anything outside
// the transformer blocks (embed.weight, head.weight, norm_f.g, ...).
struct LayerKey {
    std::optional<std::size_t> layer;
    std::string module_kind;

    bool is_layer() const noexcept { return layer.has_value(); }
    friend bool operator==(const LayerKey&, const LayerKey&) = default;
};

LayerKey parse_layer_key(std::string_view name);

// Number of transformer blocks: n_layers from the "model_config" metadata
// when present, else 1 + the largest parsed layer index (0 if none). Throws
// DataError if a tensor's layer index is out of range of the configured count.
std::size_t layer_count(const Checkpoint& c);

// Identical name sets and per-name shapes, else IncongruentError describing
// the symmetric difference or the first shape offender.
void assert_congruent(const Checkpoint& a, const Checkpoint& b);

} // namespace immlab
