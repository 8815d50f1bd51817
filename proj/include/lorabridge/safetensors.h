// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lorabridge/dtype.h"
#include "lorabridge/tensor.h"

namespace lorabridge {

struct TensorEntry {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    // [begin, end) byte range into the data region.
    std::uint64_t begin = 0;
    std::uint64_t end = 0;

    std::uint64_t byte_size() const { return end - begin; }
    bool operator==(const TensorEntry&) const = default;
};

struct TensorInfo {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::uint64_t byte_size = 0;

    bool operator==(const TensorInfo&) const = default;
};

// Immutable backing bytes of a data region (heap buffer or read-only mapping).
class ByteRegion {
public:
    virtual ~ByteRegion() = default;
    virtual std::span<const std::byte> bytes() const = 0;
};

// A parsed safetensors container: optional string metadata, named entries and
// the raw data region they index. Copies share the data region.
class SafetensorsFile {
public:
    using Metadata = std::map<std::string, std::string>;
    using Entries = std::map<std::string, TensorEntry>;

    SafetensorsFile() = default;

    // Validates every entry against the region; throws Error on violations.
    SafetensorsFile(Metadata metadata, Entries entries, std::shared_ptr<const ByteRegion> region);

    const Metadata& metadata() const { return metadata_; }
    Metadata& metadata() { return metadata_; }
    const Entries& entries() const { return entries_; }
    std::span<const std::byte> data() const;

    bool contains(const std::string& name) const { return entries_.contains(name); }
    const TensorEntry& entry(const std::string& name) const;
    std::span<const std::byte> payload(const std::string& name) const;
    // Copies the payload out into an owning tensor.
    Tensor tensor(const std::string& name) const;

private:
    Metadata metadata_;
    Entries entries_;
    std::shared_ptr<const ByteRegion> region_;
};

// Assembles a new file with the canonical layout: entries ordered by name,
// packed contiguously from offset 0 with no padding.
class SafetensorsBuilder {
public:
    void set_metadata(std::string key, std::string value);
    void set_metadata(SafetensorsFile::Metadata metadata);

    // Throws Error on duplicate names, non-storage dtypes or size mismatches.
    void add(std::string name, DType dtype, Shape shape, std::span<const std::byte> payload);
    void add(std::string name, const Tensor& tensor);

    SafetensorsFile build() &&;

private:
    struct Pending {
        DType dtype;
        Shape shape;
        std::vector<std::byte> payload;
    };
    SafetensorsFile::Metadata metadata_;
    std::map<std::string, Pending> tensors_;
};

SafetensorsFile read_file(const std::filesystem::path& path);
SafetensorsFile parse_buffer(std::vector<std::byte> buffer);

// Canonical serialization: deterministic header, entries in name order,
// offsets reassigned contiguously regardless of the in-memory layout.
void serialize(const SafetensorsFile& file, std::ostream& os);
std::vector<std::byte> serialize(const SafetensorsFile& file);
void write_file(const SafetensorsFile& file, const std::filesystem::path& path);

std::vector<TensorInfo> list_tensors(const SafetensorsFile& file);

}  // namespace lorabridge
