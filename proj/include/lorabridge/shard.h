// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lorabridge/layout.h"
#include "lorabridge/tensor.h"

namespace lorabridge {

struct MeshAxis {
    std::string name;
    std::int64_t size = 1;

    bool operator==(const MeshAxis&) const = default;
};

class Mesh {
public:
    Mesh() = default;
    // Throws Error on duplicate names or non-positive sizes.
    explicit Mesh(std::vector<MeshAxis> axes);

    // "<fsdp>x<tp>", e.g. "1x4" -> axes (fsdp=1, tp=4).
    static Mesh parse_fsdp_tp(std::string_view text);

    const std::vector<MeshAxis>& axes() const { return axes_; }
    std::optional<std::int64_t> size_of(std::string_view axis) const;
    std::int64_t device_count() const;

    bool operator==(const Mesh&) const = default;

private:
    std::vector<MeshAxis> axes_;
};

// Per-dimension axis assignment; nullopt means replicated along that dimension.
using PartitionSpec = std::vector<std::optional<std::string>>;

struct ParamNode {
    std::string path;
    Shape shape;
    PartitionSpec spec;  // may have the wrong length; that is what repair_rank fixes

    bool operator==(const ParamNode&) const = default;
};

// Specs whose length differs from the tensor rank become fully replicated.
std::vector<ParamNode> repair_rank(std::vector<ParamNode> params);

// Dimensions whose size is not a multiple of the assigned axis size become
// replicated. Expects rank-matched specs; throws Error for unknown axes.
std::vector<ParamNode> repair_divisibility(std::vector<ParamNode> params, const Mesh& mesh);

std::vector<ParamNode> repair_tree(std::vector<ParamNode> params, const Mesh& mesh);

struct SpecDefect {
    std::string path;
    std::string problem;
};

// Finds rank mismatches, unknown or repeated axes and uneven shardings.
std::vector<SpecDefect> find_defects(const std::vector<ParamNode>& params, const Mesh& mesh);

struct MeshViolation {
    std::int64_t layer = 0;
    std::string projection;  // e.g. "kv_einsum"
    std::string dimension;   // e.g. "num_kv_heads"
    std::int64_t size = 0;
    std::int64_t tp = 1;

    std::string describe() const;
};

// Checks every tensor-parallel-sharded attention dimension of every layer kind
// against the mesh's "tp" axis. Violations are returned, not thrown.
std::vector<MeshViolation> validate_mesh(const Mesh& mesh, const ArchDescriptor& arch);

// Parameters of the LoRA-targeted projections (attention + MLP) over all layers.
double projection_param_count(const ArchDescriptor& arch);

// Weight memory per chip in GB (1e9 bytes) for an evenly sharded model.
double memory_per_chip(double param_count, const Mesh& mesh, double bytes_per_param);
double memory_per_chip(const ArchDescriptor& arch, const Mesh& mesh, double bytes_per_param);

// JSON document {mesh: {axes: [{name, size}]}, params: [{path, shape, spec}]}.
struct ShardDocument {
    Mesh mesh;
    std::vector<ParamNode> params;
};

ShardDocument parse_shard_document(std::string_view json_text);
std::string render_shard_document(const ShardDocument& doc);

}  // namespace lorabridge
