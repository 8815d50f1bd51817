// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/merge.h"

#include <cmath>
#include <cstring>
#include <map>

#include <fmt/format.h>

#include "lorabridge/error.h"

namespace lorabridge {

std::int64_t LoraPair::rank() const {
    return a.rank() == 0 ? 0 : a.shape().back();
}

void MergeConfig::validate() const {
    if (!(alpha > 0.0) || !std::isfinite(alpha)) throw Error(fmt::format("alpha must be positive, got {}", alpha));
    if (rank <= 0) throw Error(fmt::format("rank must be positive, got {}", rank));
    if (!std::isfinite(scale())) throw Error("alpha / rank is not finite");
    if (output_dtype && !is_storage_dtype(*output_dtype)) {
        throw Error(fmt::format("unsupported output dtype {}", dtype_name(*output_dtype)));
    }
    if (accumulate != DType::F32 && accumulate != DType::F64) {
        throw Error(fmt::format("accumulate dtype must be F32 or F64, got {}", dtype_name(accumulate)));
    }
}

namespace {

void check_shape(const LoraPair& pair, std::string_view factor, const Shape& got, const Shape& want) {
    if (got != want) {
        throw Error(fmt::format("{}: lora_{} has shape {}, expected {}", pair.module_name, factor,
                                shape_to_string(got), shape_to_string(want)));
    }
}

}  // namespace

std::vector<Delta> compute_delta(const LoraPair& pair, const ArchDescriptor& arch, DType accumulate) {
    if (pair.a.rank() == 0 || pair.b.rank() == 0) {
        throw Error(fmt::format("{}: LoRA factors must not be scalars", pair.module_name));
    }
    const auto r = pair.rank();
    const auto layout = layout_for(arch, r, pair.layer, pair.kind);
    check_shape(pair, "a", pair.a.shape(), layout.lora_a_shape);
    check_shape(pair, "b", pair.b.shape(), layout.lora_b_shape);

    const Tensor a = convert(pair.a, accumulate);
    const Tensor b = convert(pair.b, accumulate);
    const auto flat_cols = [](const Tensor& t) { return t.numel() / t.shape()[0]; };

    std::vector<Delta> out;
    switch (layout.delta_rule) {
    case DeltaRule::TransposeAB: {
        auto b_flat = reshape(b, {r, flat_cols(b)});
        out.push_back({layout.hf_targets[0].key, transpose2d(matmul(a, b_flat))});
        break;
    }
    case DeltaRule::SplitKVThenTransposeAB: {
        for (std::int64_t part = 0; part < 2; ++part) {
            auto half = slice_axis(b, 1, part);
            auto half_flat = reshape(half, {r, flat_cols(half)});
            out.push_back({layout.hf_targets[static_cast<std::size_t>(part)].key,
                           transpose2d(matmul(a, half_flat))});
        }
        break;
    }
    case DeltaRule::FlattenAThenTransposeAB: {
        auto a_flat = reshape(a, {a.numel() / r, r});
        out.push_back({layout.hf_targets[0].key, transpose2d(matmul(a_flat, b))});
        break;
    }
    case DeltaRule::TransposeABMlp:
        out.push_back({layout.hf_targets[0].key, transpose2d(matmul(a, b))});
        break;
    }

    for (std::size_t i = 0; i < out.size(); ++i) {
        if (out[i].tensor.shape() != layout.hf_targets[i].shape) {
            throw Error(fmt::format("{}: delta shape {} does not match HF shape {}", pair.module_name,
                                    shape_to_string(out[i].tensor.shape()),
                                    shape_to_string(layout.hf_targets[i].shape)));
        }
    }
    return out;
}

namespace {

template <typename T>
std::vector<bool> add_scaled(std::span<T> acc, std::span<const T> delta, T scale) {
    std::vector<bool> changed(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) {
        const T step = scale * delta[i];
        // A zero step leaves the stored bits alone (keeps -0.0 and NaN payloads).
        if (step != T(0)) {
            acc[i] += step;
            changed[i] = true;
        }
    }
    return changed;
}

Tensor apply_delta(const Tensor& base, const Tensor& delta, const MergeConfig& cfg, DType out_dtype) {
    Tensor acc = convert(base, cfg.accumulate);
    std::vector<bool> changed;
    if (cfg.accumulate == DType::F64) {
        changed = add_scaled<double>(acc.f64(), delta.f64(), cfg.scale());
    } else {
        changed = add_scaled<float>(acc.f32(), delta.f32(), static_cast<float>(cfg.scale()));
    }
    Tensor out = convert(acc, out_dtype);
    if (out_dtype == base.dtype()) {
        const std::size_t width = dtype_size(out_dtype);
        auto dst = out.bytes();
        auto src = base.bytes();
        for (std::size_t i = 0; i < changed.size(); ++i) {
            if (!changed[i]) std::memcpy(dst.data() + i * width, src.data() + i * width, width);
        }
    }
    return out;
}

}  // namespace

SafetensorsFile merge(const SafetensorsFile& base, const std::vector<LoraPair>& pairs, const MergeConfig& cfg,
                      const ArchDescriptor& arch) {
    cfg.validate();
    arch.validate();

    std::map<std::string, std::string> owner;  // hf key -> module name
    std::map<std::string, Tensor> deltas;
    for (const auto& pair : pairs) {
        if (pair.rank() != cfg.rank) {
            throw Error(fmt::format("{}: factor rank {} does not match configured rank {}", pair.module_name,
                                    pair.rank(), cfg.rank));
        }
        for (auto& d : compute_delta(pair, arch, cfg.accumulate)) {
            if (auto it = owner.find(d.hf_key); it != owner.end()) {
                throw Error(fmt::format("duplicate pair: '{}' and '{}' both target '{}'", it->second,
                                        pair.module_name, d.hf_key));
            }
            if (!base.contains(d.hf_key)) {
                throw Error(fmt::format("missing target key '{}' in base checkpoint", d.hf_key));
            }
            const auto& entry = base.entry(d.hf_key);
            if (entry.shape != d.tensor.shape()) {
                throw Error(fmt::format("shape mismatch for '{}': base {} vs delta {}", d.hf_key,
                                        shape_to_string(entry.shape), shape_to_string(d.tensor.shape())));
            }
            owner.emplace(d.hf_key, pair.module_name);
            deltas.emplace(std::move(d.hf_key), std::move(d.tensor));
        }
    }

    SafetensorsBuilder builder;
    auto metadata = base.metadata();
    metadata[kVersionMetadataKey] = LORABRIDGE_VERSION;
    builder.set_metadata(std::move(metadata));

    for (const auto& [name, entry] : base.entries()) {
        const DType out_dtype = cfg.output_dtype.value_or(entry.dtype);
        auto it = deltas.find(name);
        if (it != deltas.end()) {
            builder.add(name, apply_delta(base.tensor(name), it->second, cfg, out_dtype));
        } else if (out_dtype == entry.dtype) {
            builder.add(name, entry.dtype, entry.shape, base.payload(name));
        } else {
            builder.add(name, convert(base.tensor(name), out_dtype));
        }
    }
    return std::move(builder).build();
}

std::vector<LoraPair> load_lora_factors(const SafetensorsFile& file, const ArchDescriptor& arch) {
    struct Slots {
        const TensorEntry* a = nullptr;
        const TensorEntry* b = nullptr;
    };
    std::map<std::string, Slots> modules;
    for (const auto& [name, entry] : file.entries()) {
        std::string_view view = name;
        bool is_a = view.ends_with(".lora_a");
        bool is_b = view.ends_with(".lora_b");
        if (!is_a && !is_b) {
            throw Error(fmt::format("unexpected tensor '{}': LoRA keys must end in .lora_a or .lora_b", name));
        }
        auto& slots = modules[std::string(view.substr(0, view.size() - 7))];
        (is_a ? slots.a : slots.b) = &entry;
    }

    std::vector<LoraPair> pairs;
    for (const auto& [path, slots] : modules) {
        if (!slots.a || !slots.b) {
            throw Error(fmt::format("orphan factor: '{}' has lora_{} but no lora_{}", path, slots.a ? "a" : "b",
                                    slots.a ? "b" : "a"));
        }
        const auto dot = path.rfind('.');
        const std::string_view leaf = dot == std::string::npos ? std::string_view(path)
                                                               : std::string_view(path).substr(dot + 1);
        auto kind = kind_from_tunix_leaf(leaf);
        if (!kind || !lora_target_filter(path, NameSide::Tunix)) {
            throw Error(fmt::format("unknown module kind for '{}'", path));
        }
        auto layer = layer_index(path);
        if (!layer) throw Error(fmt::format("no layer index in module path '{}'", path));
        if (*layer >= arch.num_layers) {
            throw Error(fmt::format("'{}': layer {} out of range for {} layers", path, *layer, arch.num_layers));
        }
        if (slots.a->shape.empty() || slots.b->shape.empty() || slots.a->shape.back() != slots.b->shape.front()) {
            throw Error(fmt::format("rank mismatch in '{}': lora_a {} vs lora_b {}", path,
                                    shape_to_string(slots.a->shape), shape_to_string(slots.b->shape)));
        }
        pairs.push_back({path, *layer, *kind, file.tensor(slots.a->name), file.tensor(slots.b->name)});
    }
    return pairs;
}

}  // namespace lorabridge
