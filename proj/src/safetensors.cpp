// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/safetensors.h"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/stat.h>
#include <unistd.h>

#include <fmt/format.h>
#include <json.hpp>

#include "lorabridge/error.h"

namespace lorabridge {

namespace {

constexpr const char* kMetadataKey = "__metadata__";

class OwnedRegion final : public ByteRegion {
public:
    explicit OwnedRegion(std::vector<std::byte> buffer) : buffer_(std::move(buffer)) {}
    std::span<const std::byte> bytes() const override { return buffer_; }

private:
    std::vector<std::byte> buffer_;
};

class MappedRegion final : public ByteRegion {
public:
    MappedRegion(void* base, std::size_t length) : base_(base), length_(length) {}
    ~MappedRegion() override { munmap(base_, length_); }
    MappedRegion(const MappedRegion&) = delete;
    MappedRegion& operator=(const MappedRegion&) = delete;

    std::span<const std::byte> bytes() const override { return {static_cast<const std::byte*>(base_), length_}; }

private:
    void* base_;
    std::size_t length_;
};

// Tail of another region, keeping the parent alive.
class SubRegion final : public ByteRegion {
public:
    SubRegion(std::shared_ptr<const ByteRegion> parent, std::size_t offset)
        : parent_(std::move(parent)), offset_(offset) {}
    std::span<const std::byte> bytes() const override { return parent_->bytes().subspan(offset_); }

private:
    std::shared_ptr<const ByteRegion> parent_;
    std::size_t offset_;
};

class FileDescriptor {
public:
    explicit FileDescriptor(int fd) : fd_(fd) {}
    ~FileDescriptor() {
        if (fd_ >= 0) ::close(fd_);
    }
    FileDescriptor(const FileDescriptor&) = delete;
    FileDescriptor& operator=(const FileDescriptor&) = delete;
    int get() const { return fd_; }

private:
    int fd_;
};

std::uint64_t read_u64_le(std::span<const std::byte> bytes) {
    std::uint64_t v = 0;
    std::memcpy(&v, bytes.data(), sizeof(v));
    return v;
}

std::uint64_t expected_bytes(DType dtype, const Shape& shape) {
    return static_cast<std::uint64_t>(element_count(shape)) * dtype_size(dtype);
}

TensorEntry parse_entry(const std::string& name, const nlohmann::json& j) {
    if (!j.is_object()) throw Error(fmt::format("header entry '{}' is not an object", name));
    const auto dtype_it = j.find("dtype");
    const auto shape_it = j.find("shape");
    const auto offsets_it = j.find("data_offsets");
    if (dtype_it == j.end() || shape_it == j.end() || offsets_it == j.end()) {
        throw Error(fmt::format("header entry '{}' needs dtype, shape and data_offsets", name));
    }
    if (!dtype_it->is_string()) throw Error(fmt::format("header entry '{}': dtype is not a string", name));

    TensorEntry entry;
    entry.name = name;
    entry.dtype = parse_storage_dtype(dtype_it->get<std::string>());

    if (!shape_it->is_array()) throw Error(fmt::format("header entry '{}': shape is not an array", name));
    for (const auto& d : *shape_it) {
        if (!d.is_number_unsigned()) {
            throw Error(fmt::format("header entry '{}': shape must hold non-negative integers", name));
        }
        entry.shape.push_back(d.get<std::int64_t>());
    }

    if (!offsets_it->is_array() || offsets_it->size() != 2 || !(*offsets_it)[0].is_number_unsigned() ||
        !(*offsets_it)[1].is_number_unsigned()) {
        throw Error(fmt::format("header entry '{}': data_offsets must be two non-negative integers", name));
    }
    entry.begin = (*offsets_it)[0].get<std::uint64_t>();
    entry.end = (*offsets_it)[1].get<std::uint64_t>();
    return entry;
}

void validate_entries(const SafetensorsFile::Entries& entries, std::uint64_t region_size) {
    std::vector<const TensorEntry*> by_begin;
    std::uint64_t max_end = 0;
    for (const auto& [name, e] : entries) {
        if (name != e.name) throw Error(fmt::format("entry key '{}' does not match entry name '{}'", name, e.name));
        if (!is_storage_dtype(e.dtype)) {
            throw Error(fmt::format("tensor '{}': unsupported dtype {}", name, dtype_name(e.dtype)));
        }
        if (e.begin > e.end || e.end > region_size) {
            throw Error(fmt::format("tensor '{}': out-of-bounds offsets [{}, {}) for a data region of {} bytes", name,
                                    e.begin, e.end, region_size));
        }
        if (e.byte_size() != expected_bytes(e.dtype, e.shape)) {
            throw Error(fmt::format("tensor '{}': {} bytes of data for {} {}", name, e.byte_size(),
                                    dtype_name(e.dtype), shape_to_string(e.shape)));
        }
        max_end = std::max(max_end, e.end);
        if (e.byte_size() > 0) by_begin.push_back(&e);
    }
    std::sort(by_begin.begin(), by_begin.end(),
              [](const TensorEntry* a, const TensorEntry* b) { return a->begin < b->begin; });
    for (std::size_t i = 1; i < by_begin.size(); ++i) {
        if (by_begin[i]->begin < by_begin[i - 1]->end) {
            throw Error(fmt::format("overlapping data_offsets: '{}' and '{}'", by_begin[i - 1]->name,
                                    by_begin[i]->name));
        }
    }
    if (max_end != region_size) {
        throw Error(fmt::format("data region is {} bytes but entries cover {} bytes", region_size, max_end));
    }
}

SafetensorsFile parse_container(const std::shared_ptr<const ByteRegion>& source) {
    const auto whole = source->bytes();
    if (whole.size() < 8) throw Error("malformed header length: file is shorter than 8 bytes");
    const std::uint64_t header_len = read_u64_le(whole);
    if (header_len > whole.size() - 8) {
        throw Error(fmt::format("malformed header length: {} exceeds the {} bytes available", header_len,
                                whole.size() - 8));
    }
    const auto* header_begin = reinterpret_cast<const char*>(whole.data() + 8);

    std::set<std::string> seen;
    std::string duplicate;
    auto on_event = [&](int depth, nlohmann::json::parse_event_t event, nlohmann::json& parsed) {
        if (depth == 1 && event == nlohmann::json::parse_event_t::key) {
            auto key = parsed.get<std::string>();
            if (!seen.insert(key).second && duplicate.empty()) duplicate = std::move(key);
        }
        return true;
    };

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_begin, header_begin + header_len, on_event);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(fmt::format("header is not valid JSON: {}", e.what()));
    }
    if (!duplicate.empty()) throw Error(fmt::format("duplicate tensor name '{}'", duplicate));
    if (!header.is_object()) throw Error("header is not a JSON object");

    SafetensorsFile::Metadata metadata;
    SafetensorsFile::Entries entries;
    for (const auto& [key, value] : header.items()) {
        if (key == kMetadataKey) {
            if (!value.is_object()) throw Error("__metadata__ is not an object");
            for (const auto& [mk, mv] : value.items()) {
                if (!mv.is_string()) throw Error(fmt::format("__metadata__ value for '{}' is not a string", mk));
                metadata.emplace(mk, mv.get<std::string>());
            }
            continue;
        }
        entries.emplace(key, parse_entry(key, value));
    }
    return SafetensorsFile(std::move(metadata), std::move(entries), std::make_shared<SubRegion>(source, 8 + header_len));
}

std::string render_header(const SafetensorsFile& file) {
    nlohmann::json header = nlohmann::json::object();
    if (!file.metadata().empty()) {
        nlohmann::json meta = nlohmann::json::object();
        for (const auto& [k, v] : file.metadata()) meta[k] = v;
        header[kMetadataKey] = std::move(meta);
    }
    std::uint64_t offset = 0;
    for (const auto& [name, e] : file.entries()) {
        nlohmann::json shape = nlohmann::json::array();
        for (auto d : e.shape) shape.push_back(d);
        header[name] = {{"dtype", std::string(dtype_name(e.dtype))},
                        {"shape", std::move(shape)},
                        {"data_offsets", {offset, offset + e.byte_size()}}};
        offset += e.byte_size();
    }
    return header.dump();
}

}  // namespace

SafetensorsFile::SafetensorsFile(Metadata metadata, Entries entries, std::shared_ptr<const ByteRegion> region)
    : metadata_(std::move(metadata)), entries_(std::move(entries)), region_(std::move(region)) {
    validate_entries(entries_, data().size());
}

std::span<const std::byte> SafetensorsFile::data() const {
    if (!region_) return {};
    return region_->bytes();
}

const TensorEntry& SafetensorsFile::entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw Error(fmt::format("no tensor named '{}'", name));
    return it->second;
}

std::span<const std::byte> SafetensorsFile::payload(const std::string& name) const {
    const auto& e = entry(name);
    return data().subspan(e.begin, e.byte_size());
}

Tensor SafetensorsFile::tensor(const std::string& name) const {
    const auto& e = entry(name);
    return Tensor::from_bytes(e.dtype, e.shape, payload(name));
}

void SafetensorsBuilder::set_metadata(std::string key, std::string value) {
    metadata_[std::move(key)] = std::move(value);
}

void SafetensorsBuilder::set_metadata(SafetensorsFile::Metadata metadata) {
    metadata_ = std::move(metadata);
}

void SafetensorsBuilder::add(std::string name, DType dtype, Shape shape, std::span<const std::byte> payload) {
    if (name == kMetadataKey) throw Error("tensor name '__metadata__' is reserved");
    if (!is_storage_dtype(dtype)) {
        throw Error(fmt::format("tensor '{}': unsupported dtype {}", name, dtype_name(dtype)));
    }
    if (payload.size() != expected_bytes(dtype, shape)) {
        throw Error(fmt::format("tensor '{}': {} bytes of data for {} {}", name, payload.size(), dtype_name(dtype),
                                shape_to_string(shape)));
    }
    if (tensors_.contains(name)) throw Error(fmt::format("duplicate tensor name '{}'", name));
    tensors_.emplace(std::move(name),
                     Pending{dtype, std::move(shape), std::vector<std::byte>(payload.begin(), payload.end())});
}

void SafetensorsBuilder::add(std::string name, const Tensor& tensor) {
    add(std::move(name), tensor.dtype(), tensor.shape(), tensor.bytes());
}

SafetensorsFile SafetensorsBuilder::build() && {
    std::size_t total = 0;
    for (const auto& [name, p] : tensors_) total += p.payload.size();

    std::vector<std::byte> data;
    data.reserve(total);
    SafetensorsFile::Entries entries;
    for (auto& [name, p] : tensors_) {
        TensorEntry e{name, p.dtype, std::move(p.shape), data.size(), data.size() + p.payload.size()};
        data.insert(data.end(), p.payload.begin(), p.payload.end());
        entries.emplace(name, std::move(e));
    }
    tensors_.clear();
    return SafetensorsFile(std::move(metadata_), std::move(entries),
                           std::make_shared<OwnedRegion>(std::move(data)));
}

SafetensorsFile parse_buffer(std::vector<std::byte> buffer) {
    return parse_container(std::make_shared<OwnedRegion>(std::move(buffer)));
}

SafetensorsFile read_file(const std::filesystem::path& path) {
    FileDescriptor fd(::open(path.c_str(), O_RDONLY | O_CLOEXEC));
    if (fd.get() < 0) throw Error(fmt::format("cannot open '{}': {}", path.string(), std::strerror(errno)));
    struct stat st {};
    if (::fstat(fd.get(), &st) != 0) {
        throw Error(fmt::format("cannot stat '{}': {}", path.string(), std::strerror(errno)));
    }
    if (!S_ISREG(st.st_mode)) throw Error(fmt::format("'{}' is not a regular file", path.string()));
    const auto size = static_cast<std::size_t>(st.st_size);
    if (size < 8) throw Error("malformed header length: file is shorter than 8 bytes");

    void* base = ::mmap(nullptr, size, PROT_READ, MAP_PRIVATE, fd.get(), 0);
    if (base == MAP_FAILED) {
        throw Error(fmt::format("cannot map '{}': {}", path.string(), std::strerror(errno)));
    }
    return parse_container(std::make_shared<MappedRegion>(base, size));
}

void serialize(const SafetensorsFile& file, std::ostream& os) {
    const std::string header = render_header(file);
    const std::uint64_t len = header.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, e] : file.entries()) {
        auto bytes = file.payload(name);
        os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
}

std::vector<std::byte> serialize(const SafetensorsFile& file) {
    std::ostringstream os(std::ios::binary);
    serialize(file, os);
    const std::string s = std::move(os).str();
    std::vector<std::byte> out(s.size());
    if (!s.empty()) std::memcpy(out.data(), s.data(), s.size());
    return out;
}

void write_file(const SafetensorsFile& file, const std::filesystem::path& path) {
    validate_entries(file.entries(), file.data().size());
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error(fmt::format("cannot write '{}'", path.string()));
        serialize(file, os);
        os.flush();
        if (!os) throw Error(fmt::format("write to '{}' failed", path.string()));
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error(fmt::format("cannot write '{}'", path.string()));
    }
}

std::vector<TensorInfo> list_tensors(const SafetensorsFile& file) {
    std::vector<TensorInfo> out;
    out.reserve(file.entries().size());
    for (const auto& [name, e] : file.entries()) out.push_back({name, e.dtype, e.shape, e.byte_size()});
    return out;
}

}  // namespace lorabridge
