// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorabridge/tensor.h"

namespace lorabridge {

// The six LoRA-targeted modules, named after the JAX (Tunix) module leaves.
enum class ModuleKind : std::uint8_t { QEinsum, KVEinsum, AttnVecEinsum, GateProj, UpProj, DownProj };

inline constexpr std::array<ModuleKind, 6> kAllModuleKinds = {
    ModuleKind::QEinsum, ModuleKind::KVEinsum, ModuleKind::AttnVecEinsum,
    ModuleKind::GateProj, ModuleKind::UpProj,  ModuleKind::DownProj,
};

enum class DeltaRule : std::uint8_t {
    TransposeAB,              // q_einsum: (A · B_flat)^T
    SplitKVThenTransposeAB,   // kv_einsum: B split on its K/V axis, one delta each
    FlattenAThenTransposeAB,  // attn_vec_einsum: (A_flat · B)^T
    TransposeABMlp,           // gate/up/down: (A · B)^T
};

enum class Direction : std::uint8_t { HFToTunix, TunixToHF };

// Which checkpoint namespace a name belongs to. The HF side excludes the
// vision tower; the JAX port has none, so the Tunix side does not filter it.
enum class NameSide : std::uint8_t { Tunix, HF };

inline constexpr std::string_view kDefaultKeyTemplate = "model.layers.{layer}.{block}.{module}.weight";

// Model dimensions. `head_dims` and `num_kv_heads` describe a layer-kind
// schedule: layer i uses entry i % size(), so a single entry is uniform and
// e.g. five sliding layers followed by one global layer is a 6-entry list.
struct ArchDescriptor {
    std::int64_t hidden_size = 0;
    std::int64_t num_heads = 0;
    std::vector<std::int64_t> num_kv_heads;
    std::vector<std::int64_t> head_dims;
    std::int64_t num_layers = 0;
    std::int64_t intermediate_size = 0;
    // Placeholders: {layer}, {module} (HF leaf, e.g. q_proj) and {block}
    // ("self_attn" or "mlp").
    std::string key_template = std::string(kDefaultKeyTemplate);

    std::int64_t head_dim(std::int64_t layer) const;
    std::int64_t kv_heads(std::int64_t layer) const;

    // Throws Error when a size is non-positive or heads do not group evenly.
    void validate() const;
};

ArchDescriptor parse_arch(std::string_view json_text);
ArchDescriptor load_arch(const std::filesystem::path& path);

struct HfTarget {
    std::string key;
    Shape shape;  // HF (out, in) layout

    bool operator==(const HfTarget&) const = default;
};

struct ModuleLayout {
    ModuleKind kind = ModuleKind::QEinsum;
    std::int64_t layer = 0;
    Shape lora_a_shape;
    Shape lora_b_shape;
    std::vector<HfTarget> hf_targets;  // two for kv_einsum, one otherwise
    DeltaRule delta_rule = DeltaRule::TransposeAB;
};

ModuleLayout layout_for(const ArchDescriptor& arch, std::int64_t rank, std::int64_t layer, ModuleKind kind);

// All layouts, layer-major, kinds in kAllModuleKinds order.
std::vector<ModuleLayout> layouts_for(const ArchDescriptor& arch, std::int64_t rank);

std::string_view tunix_leaf(ModuleKind kind);
std::vector<std::string_view> hf_leaves(ModuleKind kind);
std::string_view hf_block(ModuleKind kind);
std::optional<ModuleKind> kind_from_tunix_leaf(std::string_view leaf);

std::string render_hf_key(const ArchDescriptor& arch, std::int64_t layer, std::string_view hf_leaf);

// Renames the module leaf of a dotted name; layer indices and other path
// components are preserved. Throws Error for names without a known module.
std::vector<std::string> map_name(std::string_view name, Direction direction);

bool lora_target_filter(std::string_view name, NameSide side = NameSide::Tunix);

// Last all-digit component of a dotted path, if any.
std::optional<std::int64_t> layer_index(std::string_view dotted_path);

}  // namespace lorabridge
