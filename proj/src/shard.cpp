// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/shard.h"

#include <charconv>
#include <set>

#include <fmt/format.h>
#include <json.hpp>

#include "lorabridge/error.h"

namespace lorabridge {

Mesh::Mesh(std::vector<MeshAxis> axes) : axes_(std::move(axes)) {
    std::set<std::string> names;
    for (const auto& axis : axes_) {
        if (axis.name.empty()) throw Error("mesh axis name must not be empty");
        if (axis.size <= 0) throw Error(fmt::format("mesh axis '{}' has non-positive size {}", axis.name, axis.size));
        if (!names.insert(axis.name).second) throw Error(fmt::format("duplicate mesh axis '{}'", axis.name));
    }
}

Mesh Mesh::parse_fsdp_tp(std::string_view text) {
    const auto x = text.find('x');
    auto parse = [&](std::string_view part) {
        std::int64_t v = 0;
        auto [ptr, ec] = std::from_chars(part.data(), part.data() + part.size(), v);
        if (ec != std::errc() || ptr != part.data() + part.size() || part.empty()) {
            throw Error(fmt::format("mesh must look like <fsdp>x<tp>, got '{}'", text));
        }
        return v;
    };
    if (x == std::string_view::npos) throw Error(fmt::format("mesh must look like <fsdp>x<tp>, got '{}'", text));
    return Mesh({{"fsdp", parse(text.substr(0, x))}, {"tp", parse(text.substr(x + 1))}});
}

std::optional<std::int64_t> Mesh::size_of(std::string_view axis) const {
    for (const auto& a : axes_) {
        if (a.name == axis) return a.size;
    }
    return std::nullopt;
}

std::int64_t Mesh::device_count() const {
    std::int64_t n = 1;
    for (const auto& a : axes_) n *= a.size;
    return n;
}

std::vector<ParamNode> repair_rank(std::vector<ParamNode> params) {
    for (auto& p : params) {
        if (p.spec.size() != p.shape.size()) p.spec.assign(p.shape.size(), std::nullopt);
    }
    return params;
}

std::vector<ParamNode> repair_divisibility(std::vector<ParamNode> params, const Mesh& mesh) {
    for (auto& p : params) {
        if (p.spec.size() != p.shape.size()) {
            throw Error(fmt::format("'{}': spec has {} entries for a rank-{} tensor; run the rank repair first",
                                    p.path, p.spec.size(), p.shape.size()));
        }
        for (std::size_t d = 0; d < p.spec.size(); ++d) {
            if (!p.spec[d]) continue;
            auto size = mesh.size_of(*p.spec[d]);
            if (!size) throw Error(fmt::format("'{}': spec references unknown mesh axis '{}'", p.path, *p.spec[d]));
            if (p.shape[d] % *size != 0) p.spec[d] = std::nullopt;
        }
    }
    return params;
}

std::vector<ParamNode> repair_tree(std::vector<ParamNode> params, const Mesh& mesh) {
    return repair_divisibility(repair_rank(std::move(params)), mesh);
}

std::vector<SpecDefect> find_defects(const std::vector<ParamNode>& params, const Mesh& mesh) {
    std::vector<SpecDefect> out;
    for (const auto& p : params) {
        if (p.spec.size() != p.shape.size()) {
            out.push_back({p.path, fmt::format("spec rank {} != tensor rank {}", p.spec.size(), p.shape.size())});
            continue;
        }
        std::set<std::string> used;
        for (std::size_t d = 0; d < p.spec.size(); ++d) {
            if (!p.spec[d]) continue;
            const auto& axis = *p.spec[d];
            auto size = mesh.size_of(axis);
            if (!size) {
                out.push_back({p.path, fmt::format("dim {} uses unknown axis '{}'", d, axis)});
            } else if (p.shape[d] % *size != 0) {
                out.push_back({p.path, fmt::format("dim {} of size {} not divisible by {}={}", d, p.shape[d], axis,
                                                   *size)});
            }
            if (!used.insert(axis).second) out.push_back({p.path, fmt::format("axis '{}' used twice", axis)});
        }
    }
    return out;
}

std::string MeshViolation::describe() const {
    return fmt::format("layer {}: {} {}={} is not divisible by tp={}", layer, projection, dimension, size, tp);
}

std::vector<MeshViolation> validate_mesh(const Mesh& mesh, const ArchDescriptor& arch) {
    auto tp = mesh.size_of("tp");
    if (!tp) throw Error("mesh has no 'tp' axis");
    arch.validate();

    // Layers repeat with the period of the layer-kind schedule; checking one
    // period covers every distinct projection shape.
    const auto period = static_cast<std::int64_t>(std::max(arch.head_dims.size(), arch.num_kv_heads.size()));
    std::set<std::tuple<std::int64_t, std::int64_t>> seen;
    std::vector<MeshViolation> out;
    for (std::int64_t layer = 0; layer < std::min(period, arch.num_layers); ++layer) {
        const auto kv = arch.kv_heads(layer);
        const auto hd = arch.head_dim(layer);
        if (!seen.emplace(kv, hd).second) continue;
        auto check = [&](std::string projection, std::string dimension, std::int64_t size) {
            if (size % *tp != 0) out.push_back({layer, std::move(projection), std::move(dimension), size, *tp});
        };
        check("q_einsum", "num_heads", arch.num_heads);
        check("q_einsum", "num_heads*head_dim", arch.num_heads * hd);
        check("kv_einsum", "num_kv_heads", kv);
        check("kv_einsum", "2*num_kv_heads", 2 * kv);
        check("kv_einsum", "num_kv_heads*head_dim", kv * hd);
        check("attn_vec_einsum", "num_heads", arch.num_heads);
    }
    return out;
}

double projection_param_count(const ArchDescriptor& arch) {
    arch.validate();
    double total = 0.0;
    for (std::int64_t layer = 0; layer < arch.num_layers; ++layer) {
        for (auto kind : kAllModuleKinds) {
            for (const auto& t : layout_for(arch, 1, layer, kind).hf_targets) {
                total += static_cast<double>(element_count(t.shape));
            }
        }
    }
    return total;
}

double memory_per_chip(double param_count, const Mesh& mesh, double bytes_per_param) {
    if (param_count < 0 || bytes_per_param < 0) throw Error("parameter count and bytes per parameter must be >= 0");
    return param_count * bytes_per_param / static_cast<double>(mesh.device_count()) / 1e9;
}

double memory_per_chip(const ArchDescriptor& arch, const Mesh& mesh, double bytes_per_param) {
    return memory_per_chip(projection_param_count(arch), mesh, bytes_per_param);
}

ShardDocument parse_shard_document(std::string_view json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(fmt::format("shard document is not valid JSON: {}", e.what()));
    }
    try {
        ShardDocument doc;
        if (j.contains("mesh")) {
            std::vector<MeshAxis> axes;
            for (const auto& a : j.at("mesh").at("axes")) {
                axes.push_back({a.at("name").get<std::string>(), a.at("size").get<std::int64_t>()});
            }
            doc.mesh = Mesh(std::move(axes));
        }
        for (const auto& p : j.at("params")) {
            ParamNode node;
            node.path = p.at("path").get<std::string>();
            for (const auto& d : p.at("shape")) {
                if (!d.is_number_unsigned()) throw Error(fmt::format("'{}': shape entries must be >= 0", node.path));
                node.shape.push_back(d.get<std::int64_t>());
            }
            for (const auto& s : p.at("spec")) {
                if (s.is_null()) {
                    node.spec.emplace_back(std::nullopt);
                } else {
                    node.spec.emplace_back(s.get<std::string>());
                }
            }
            doc.params.push_back(std::move(node));
        }
        return doc;
    } catch (const nlohmann::json::exception& e) {
        throw Error(fmt::format("malformed shard document: {}", e.what()));
    }
}

std::string render_shard_document(const ShardDocument& doc) {
    nlohmann::ordered_json axes = nlohmann::ordered_json::array();
    for (const auto& a : doc.mesh.axes()) axes.push_back({{"name", a.name}, {"size", a.size}});
    nlohmann::ordered_json params = nlohmann::ordered_json::array();
    for (const auto& p : doc.params) {
        nlohmann::ordered_json spec = nlohmann::ordered_json::array();
        for (const auto& s : p.spec) spec.push_back(s ? nlohmann::ordered_json(*s) : nlohmann::ordered_json());
        params.push_back({{"path", p.path}, {"shape", p.shape}, {"spec", std::move(spec)}});
    }
    nlohmann::ordered_json out;
    out["mesh"] = {{"axes", std::move(axes)}};
    out["params"] = std::move(params);
    return out.dump(2) + "\n";
}

}  // namespace lorabridge
