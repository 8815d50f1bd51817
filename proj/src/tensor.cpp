// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/tensor.h"

#include <cstring>
#include <numeric>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "lorabridge/error.h"

namespace lorabridge {

std::int64_t element_count(const Shape& shape) {
    std::int64_t n = 1;
    for (auto d : shape) {
        if (d < 0) throw Error(fmt::format("negative dimension in shape {}", shape_to_string(shape)));
        n *= d;
    }
    return n;
}

std::string shape_to_string(const Shape& shape) {
    return fmt::format("({})", fmt::join(shape, ", "));
}

Tensor::Tensor(DType dtype, Shape shape)
    : dtype_(dtype), shape_(std::move(shape)),
      data_(static_cast<std::size_t>(element_count(shape_)) * dtype_size(dtype_)) {}

Tensor Tensor::from_bytes(DType dtype, Shape shape, std::span<const std::byte> bytes) {
    Tensor t(dtype, std::move(shape));
    if (bytes.size() != t.nbytes()) {
        throw Error(fmt::format("payload of {} bytes does not match {} {} ({} bytes)", bytes.size(),
                                dtype_name(dtype), shape_to_string(t.shape()), t.nbytes()));
    }
    if (!bytes.empty()) std::memcpy(t.data_.data(), bytes.data(), bytes.size());
    return t;
}

Tensor Tensor::from_f32(Shape shape, std::span<const float> values) {
    return from_bytes(DType::F32, std::move(shape), std::as_bytes(values));
}

Tensor Tensor::from_f64(Shape shape, std::span<const double> values) {
    return from_bytes(DType::F64, std::move(shape), std::as_bytes(values));
}

namespace {

template <typename T>
std::span<T> typed_view(std::span<std::byte> raw) {
    return {reinterpret_cast<T*>(raw.data()), raw.size() / sizeof(T)};
}

template <typename T>
std::span<const T> typed_view(std::span<const std::byte> raw) {
    return {reinterpret_cast<const T*>(raw.data()), raw.size() / sizeof(T)};
}

void require_dtype(const Tensor& t, DType expected) {
    if (t.dtype() != expected) {
        throw Error(fmt::format("expected {} tensor, got {}", dtype_name(expected), dtype_name(t.dtype())));
    }
}

void require_16bit(const Tensor& t) {
    if (dtype_size(t.dtype()) != 2) {
        throw Error(fmt::format("expected a 16-bit tensor, got {}", dtype_name(t.dtype())));
    }
}

}  // namespace

std::span<const float> Tensor::f32() const {
    require_dtype(*this, DType::F32);
    return typed_view<float>(bytes());
}

std::span<float> Tensor::f32() {
    require_dtype(*this, DType::F32);
    return typed_view<float>(bytes());
}

std::span<const double> Tensor::f64() const {
    require_dtype(*this, DType::F64);
    return typed_view<double>(bytes());
}

std::span<double> Tensor::f64() {
    require_dtype(*this, DType::F64);
    return typed_view<double>(bytes());
}

std::span<const std::uint16_t> Tensor::u16() const {
    require_16bit(*this);
    return typed_view<std::uint16_t>(bytes());
}

std::span<std::uint16_t> Tensor::u16() {
    require_16bit(*this);
    return typed_view<std::uint16_t>(bytes());
}

namespace {

// Every conversion goes through f64, which holds all four types exactly; the
// only rounding is the final narrowing step.
double load_element(const Tensor& t, std::size_t i) {
    switch (t.dtype()) {
    case DType::F32: return t.f32()[i];
    case DType::F64: return t.f64()[i];
    case DType::BF16: return bf16_to_f32(t.u16()[i]);
    case DType::F16: return f16_to_f32(t.u16()[i]);
    }
    return 0.0;
}

}  // namespace

Tensor convert(const Tensor& t, DType target) {
    if (t.dtype() == target) return t;
    Tensor out(target, t.shape());
    const auto n = static_cast<std::size_t>(t.numel());

    // Narrowing from f64 to a 16-bit type must not pass through f32 (that
    // would round twice), so those paths are handled separately.
    if (t.dtype() == DType::F64 && (target == DType::BF16 || target == DType::F16)) {
        auto src = t.f64();
        auto dst = out.u16();
        for (std::size_t i = 0; i < n; ++i) {
            dst[i] = target == DType::BF16 ? f64_to_bf16(src[i]) : f64_to_f16(src[i]);
        }
        return out;
    }

    switch (target) {
    case DType::F32: {
        auto dst = out.f32();
        for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(load_element(t, i));
        break;
    }
    case DType::F64: {
        auto dst = out.f64();
        for (std::size_t i = 0; i < n; ++i) dst[i] = load_element(t, i);
        break;
    }
    case DType::BF16: {
        auto dst = out.u16();
        for (std::size_t i = 0; i < n; ++i) dst[i] = f32_to_bf16(static_cast<float>(load_element(t, i)));
        break;
    }
    case DType::F16: {
        auto dst = out.u16();
        for (std::size_t i = 0; i < n; ++i) dst[i] = f32_to_f16(static_cast<float>(load_element(t, i)));
        break;
    }
    }
    return out;
}

namespace {

template <typename T>
void matmul_kernel(std::span<const T> a, std::span<const T> b, std::span<T> c, std::int64_t m, std::int64_t k,
                   std::int64_t n) {
    for (std::int64_t i = 0; i < m; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::int64_t p = 0; p < k; ++p) {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw Error(fmt::format("matmul needs rank-2 operands, got {} and {}", shape_to_string(a.shape()),
                                shape_to_string(b.shape())));
    }
    if (a.dtype() != b.dtype() || (a.dtype() != DType::F32 && a.dtype() != DType::F64)) {
        throw Error(fmt::format("matmul needs two F32 or two F64 operands, got {} and {}", dtype_name(a.dtype()),
                                dtype_name(b.dtype())));
    }
    const auto m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw Error(fmt::format("matmul shape mismatch: {} x {}", shape_to_string(a.shape()),
                                shape_to_string(b.shape())));
    }
    Tensor c(a.dtype(), {m, n});
    if (a.dtype() == DType::F32) {
        matmul_kernel<float>(a.f32(), b.f32(), c.f32(), m, k, n);
    } else {
        matmul_kernel<double>(a.f64(), b.f64(), c.f64(), m, k, n);
    }
    return c;
}

Tensor transpose2d(const Tensor& t) {
    if (t.rank() != 2) {
        throw Error(fmt::format("transpose2d needs a rank-2 tensor, got {}", shape_to_string(t.shape())));
    }
    const auto rows = t.shape()[0], cols = t.shape()[1];
    const std::size_t width = dtype_size(t.dtype());
    Tensor out(t.dtype(), {cols, rows});
    auto src = t.bytes();
    auto dst = out.bytes();
    for (std::int64_t i = 0; i < rows; ++i) {
        for (std::int64_t j = 0; j < cols; ++j) {
            std::memcpy(dst.data() + static_cast<std::size_t>(j * rows + i) * width,
                        src.data() + static_cast<std::size_t>(i * cols + j) * width, width);
        }
    }
    return out;
}

Tensor reshape(const Tensor& t, Shape new_shape) {
    if (element_count(new_shape) != t.numel()) {
        throw Error(fmt::format("cannot reshape {} into {}: element count mismatch", shape_to_string(t.shape()),
                                shape_to_string(new_shape)));
    }
    return Tensor::from_bytes(t.dtype(), std::move(new_shape), t.bytes());
}

Tensor slice_axis(const Tensor& t, std::size_t axis, std::int64_t index) {
    if (axis >= t.rank()) {
        throw Error(fmt::format("axis {} out of range for {}", axis, shape_to_string(t.shape())));
    }
    const auto& shape = t.shape();
    if (index < 0 || index >= shape[axis]) {
        throw Error(fmt::format("index {} out of range for axis {} of size {}", index, axis, shape[axis]));
    }
    Shape out_shape;
    out_shape.reserve(shape.size() - 1);
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (d != axis) out_shape.push_back(shape[d]);
    }

    // View as (outer, axis, inner) and copy the `index` plane.
    std::int64_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];

    const std::size_t width = dtype_size(t.dtype());
    const std::size_t chunk = static_cast<std::size_t>(inner) * width;
    Tensor out(t.dtype(), std::move(out_shape));
    auto src = t.bytes();
    auto dst = out.bytes();
    for (std::int64_t o = 0; o < outer; ++o) {
        const auto src_off = static_cast<std::size_t>((o * shape[axis] + index) * inner) * width;
        if (chunk != 0) std::memcpy(dst.data() + static_cast<std::size_t>(o) * chunk, src.data() + src_off, chunk);
    }
    return out;
}

}  // namespace lorabridge
