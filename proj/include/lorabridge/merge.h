// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lorabridge/layout.h"
#include "lorabridge/safetensors.h"
#include "lorabridge/tensor.h"

namespace lorabridge {

inline constexpr const char* kVersionMetadataKey = "lorabridge_version";

struct LoraPair {
    std::string module_name;  // JAX namespace, e.g. "layers.3.kv_einsum"
    std::int64_t layer = 0;
    ModuleKind kind = ModuleKind::QEinsum;
    Tensor a;
    Tensor b;

    std::int64_t rank() const;
};

struct MergeConfig {
    double alpha = 0.0;
    std::int64_t rank = 0;
    // Unset keeps each tensor's base dtype.
    std::optional<DType> output_dtype;
    // Precision of the delta contraction and the base + scale * delta sum.
    // Only the final cast to the output dtype rounds to storage precision.
    DType accumulate = DType::F64;

    double scale() const { return alpha / static_cast<double>(rank); }
    void validate() const;
};

struct Delta {
    std::string hf_key;
    Tensor tensor;  // HF (out, in) layout, in the accumulate dtype
};

// Unscaled LoRA delta(s) for one module, transposed into HF layout.
// kv_einsum yields two deltas (k_proj, v_proj); every other kind yields one.
std::vector<Delta> compute_delta(const LoraPair& pair, const ArchDescriptor& arch, DType accumulate = DType::F64);

// W_merged = W_base + (alpha / rank) * delta for every targeted key, rounded
// once to the output dtype. Untargeted tensors are copied through unchanged.
SafetensorsFile merge(const SafetensorsFile& base, const std::vector<LoraPair>& pairs, const MergeConfig& cfg,
                      const ArchDescriptor& arch);

// Pairs "<module_path>.lora_a" / "<module_path>.lora_b" entries, ordered by
// module path.
std::vector<LoraPair> load_lora_factors(const SafetensorsFile& file, const ArchDescriptor& arch);

}  // namespace lorabridge
