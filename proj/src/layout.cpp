// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/layout.h"

#include <algorithm>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "lorabridge/error.h"

namespace lorabridge {

std::int64_t ArchDescriptor::head_dim(std::int64_t layer) const {
    if (head_dims.empty()) throw Error("architecture has no head_dims");
    return head_dims[static_cast<std::size_t>(layer) % head_dims.size()];
}

std::int64_t ArchDescriptor::kv_heads(std::int64_t layer) const {
    if (num_kv_heads.empty()) throw Error("architecture has no num_kv_heads");
    return num_kv_heads[static_cast<std::size_t>(layer) % num_kv_heads.size()];
}

void ArchDescriptor::validate() const {
    auto positive = [](std::string_view field, std::int64_t v) {
        if (v <= 0) throw Error(fmt::format("architecture: {} must be positive, got {}", field, v));
    };
    positive("hidden_size", hidden_size);
    positive("num_heads", num_heads);
    positive("num_layers", num_layers);
    positive("intermediate_size", intermediate_size);
    if (head_dims.empty()) throw Error("architecture: head_dims must not be empty");
    if (num_kv_heads.empty()) throw Error("architecture: num_kv_heads must not be empty");
    for (auto d : head_dims) positive("head_dims entry", d);
    for (auto kv : num_kv_heads) {
        positive("num_kv_heads entry", kv);
        if (num_heads % kv != 0) {
            throw Error(fmt::format("architecture: num_heads {} is not a multiple of num_kv_heads {}", num_heads, kv));
        }
    }
    if (key_template.find("{layer}") == std::string::npos || key_template.find("{module}") == std::string::npos) {
        throw Error("architecture: key_template needs {layer} and {module} placeholders");
    }
}

namespace {

std::vector<std::int64_t> int_or_list(const nlohmann::json& j, std::string_view field) {
    std::vector<std::int64_t> out;
    if (j.is_number_integer()) {
        out.push_back(j.get<std::int64_t>());
    } else if (j.is_array()) {
        for (const auto& v : j) {
            if (!v.is_number_integer()) throw Error(fmt::format("architecture: {} must hold integers", field));
            out.push_back(v.get<std::int64_t>());
        }
    } else {
        throw Error(fmt::format("architecture: {} must be an integer or a list of integers", field));
    }
    return out;
}

std::int64_t require_int(const nlohmann::json& j, const char* field) {
    auto it = j.find(field);
    if (it == j.end()) throw Error(fmt::format("architecture: missing key '{}'", field));
    if (!it->is_number_integer()) throw Error(fmt::format("architecture: '{}' must be an integer", field));
    return it->get<std::int64_t>();
}

}  // namespace

ArchDescriptor parse_arch(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(fmt::format("architecture config is not valid JSON: {}", e.what()));
    }
    if (!j.is_object()) throw Error("architecture config must be a JSON object");

    static const std::set<std::string> known = {"hidden_size", "num_heads",         "num_kv_heads", "head_dims",
                                                "num_layers",  "intermediate_size", "key_template"};
    for (const auto& [key, value] : j.items()) {
        if (!known.contains(key)) throw Error(fmt::format("architecture: unknown key '{}'", key));
    }

    ArchDescriptor arch;
    arch.hidden_size = require_int(j, "hidden_size");
    arch.num_heads = require_int(j, "num_heads");
    arch.num_layers = require_int(j, "num_layers");
    arch.intermediate_size = require_int(j, "intermediate_size");
    if (!j.contains("num_kv_heads")) throw Error("architecture: missing key 'num_kv_heads'");
    if (!j.contains("head_dims")) throw Error("architecture: missing key 'head_dims'");
    arch.num_kv_heads = int_or_list(j["num_kv_heads"], "num_kv_heads");
    arch.head_dims = int_or_list(j["head_dims"], "head_dims");
    if (auto it = j.find("key_template"); it != j.end()) {
        if (!it->is_string()) throw Error("architecture: key_template must be a string");
        arch.key_template = it->get<std::string>();
    }
    arch.validate();
    return arch;
}

ArchDescriptor load_arch(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(fmt::format("cannot open architecture config '{}'", path.string()));
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_arch(ss.str());
}

std::string_view tunix_leaf(ModuleKind kind) {
    switch (kind) {
    case ModuleKind::QEinsum: return "q_einsum";
    case ModuleKind::KVEinsum: return "kv_einsum";
    case ModuleKind::AttnVecEinsum: return "attn_vec_einsum";
    case ModuleKind::GateProj: return "gate_proj";
    case ModuleKind::UpProj: return "up_proj";
    case ModuleKind::DownProj: return "down_proj";
    }
    return "";
}

std::vector<std::string_view> hf_leaves(ModuleKind kind) {
    switch (kind) {
    case ModuleKind::QEinsum: return {"q_proj"};
    case ModuleKind::KVEinsum: return {"k_proj", "v_proj"};
    case ModuleKind::AttnVecEinsum: return {"o_proj"};
    case ModuleKind::GateProj: return {"gate_proj"};
    case ModuleKind::UpProj: return {"up_proj"};
    case ModuleKind::DownProj: return {"down_proj"};
    }
    return {};
}

std::string_view hf_block(ModuleKind kind) {
    switch (kind) {
    case ModuleKind::QEinsum:
    case ModuleKind::KVEinsum:
    case ModuleKind::AttnVecEinsum: return "self_attn";
    default: return "mlp";
    }
}

std::optional<ModuleKind> kind_from_tunix_leaf(std::string_view leaf) {
    for (auto kind : kAllModuleKinds) {
        if (tunix_leaf(kind) == leaf) return kind;
    }
    return std::nullopt;
}

namespace {

std::optional<ModuleKind> kind_from_hf_leaf(std::string_view leaf) {
    for (auto kind : kAllModuleKinds) {
        for (auto name : hf_leaves(kind)) {
            if (name == leaf) return kind;
        }
    }
    return std::nullopt;
}

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
}

std::vector<std::string> split_dotted(std::string_view name) {
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        auto dot = name.find('.', start);
        parts.emplace_back(name.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
        if (dot == std::string_view::npos) break;
        start = dot + 1;
    }
    return parts;
}

std::string join_dotted(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += '.';
        out += parts[i];
    }
    return out;
}

}  // namespace

std::string render_hf_key(const ArchDescriptor& arch, std::int64_t layer, std::string_view hf_leaf) {
    auto kind = kind_from_hf_leaf(hf_leaf);
    if (!kind) throw Error(fmt::format("unrecognized module name '{}'", hf_leaf));
    std::string key = arch.key_template;
    replace_all(key, "{layer}", std::to_string(layer));
    replace_all(key, "{block}", hf_block(*kind));
    replace_all(key, "{module}", hf_leaf);
    return key;
}

ModuleLayout layout_for(const ArchDescriptor& arch, std::int64_t rank, std::int64_t layer, ModuleKind kind) {
    if (rank <= 0) throw Error(fmt::format("LoRA rank must be positive, got {}", rank));
    if (layer < 0 || layer >= arch.num_layers) {
        throw Error(fmt::format("layer {} out of range for a {}-layer architecture", layer, arch.num_layers));
    }
    const auto hidden = arch.hidden_size;
    const auto heads = arch.num_heads;
    const auto kv = arch.kv_heads(layer);
    const auto hd = arch.head_dim(layer);
    const auto inter = arch.intermediate_size;

    ModuleLayout l;
    l.kind = kind;
    l.layer = layer;
    auto target = [&](std::string_view leaf, Shape shape) {
        l.hf_targets.push_back({render_hf_key(arch, layer, leaf), std::move(shape)});
    };
    switch (kind) {
    case ModuleKind::QEinsum:
        l.lora_a_shape = {hidden, rank};
        l.lora_b_shape = {rank, heads, hd};
        l.delta_rule = DeltaRule::TransposeAB;
        target("q_proj", {heads * hd, hidden});
        break;
    case ModuleKind::KVEinsum:
        l.lora_a_shape = {hidden, rank};
        l.lora_b_shape = {rank, 2, kv, hd};
        l.delta_rule = DeltaRule::SplitKVThenTransposeAB;
        target("k_proj", {kv * hd, hidden});
        target("v_proj", {kv * hd, hidden});
        break;
    case ModuleKind::AttnVecEinsum:
        l.lora_a_shape = {heads, hd, rank};
        l.lora_b_shape = {rank, hidden};
        l.delta_rule = DeltaRule::FlattenAThenTransposeAB;
        target("o_proj", {hidden, heads * hd});
        break;
    case ModuleKind::GateProj:
    case ModuleKind::UpProj:
        l.lora_a_shape = {hidden, rank};
        l.lora_b_shape = {rank, inter};
        l.delta_rule = DeltaRule::TransposeABMlp;
        target(kind == ModuleKind::GateProj ? "gate_proj" : "up_proj", {inter, hidden});
        break;
    case ModuleKind::DownProj:
        l.lora_a_shape = {inter, rank};
        l.lora_b_shape = {rank, hidden};
        l.delta_rule = DeltaRule::TransposeABMlp;
        target("down_proj", {hidden, inter});
        break;
    }
    return l;
}

std::vector<ModuleLayout> layouts_for(const ArchDescriptor& arch, std::int64_t rank) {
    arch.validate();
    std::vector<ModuleLayout> out;
    out.reserve(static_cast<std::size_t>(arch.num_layers) * kAllModuleKinds.size());
    for (std::int64_t layer = 0; layer < arch.num_layers; ++layer) {
        for (auto kind : kAllModuleKinds) out.push_back(layout_for(arch, rank, layer, kind));
    }
    return out;
}

std::vector<std::string> map_name(std::string_view name, Direction direction) {
    auto parts = split_dotted(name);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (direction == Direction::HFToTunix) {
            if (auto kind = kind_from_hf_leaf(*it)) {
                *it = std::string(tunix_leaf(*kind));
                return {join_dotted(parts)};
            }
        } else if (auto kind = kind_from_tunix_leaf(*it)) {
            std::vector<std::string> out;
            for (auto leaf : hf_leaves(*kind)) {
                *it = std::string(leaf);
                out.push_back(join_dotted(parts));
            }
            return out;
        }
    }
    throw Error(fmt::format("unrecognized module name '{}'", name));
}

bool lora_target_filter(std::string_view name, NameSide side) {
    // Same patterns as the training recipes, applied with match-at-start
    // semantics.
    static const std::regex tunix(R"(^(?:.*q_einsum|.*kv_einsum|.*attn_vec_einsum|.*gate_proj|.*down_proj|.*up_proj))");
    static const std::regex hf(R"(^(?!.*vision).*(?:q_proj|k_proj|v_proj|o_proj|gate_proj|up_proj|down_proj))");
    const std::string s(name);
    return std::regex_search(s, side == NameSide::Tunix ? tunix : hf);
}

std::optional<std::int64_t> layer_index(std::string_view dotted_path) {
    auto parts = split_dotted(dotted_path);
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
        if (!it->empty() && it->size() < 10 && std::all_of(it->begin(), it->end(), [](char c) {
                return c >= '0' && c <= '9';
            })) {
            return std::stoll(*it);
        }
    }
    return std::nullopt;
}

}  // namespace lorabridge
