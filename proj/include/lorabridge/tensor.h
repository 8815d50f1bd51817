// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lorabridge/dtype.h"

namespace lorabridge {

using Shape = std::vector<std::int64_t>;

std::int64_t element_count(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major tensor owning its element buffer (last axis contiguous).
class Tensor {
public:
    Tensor() = default;
    // Zero-initialized tensor.
    Tensor(DType dtype, Shape shape);

    static Tensor from_bytes(DType dtype, Shape shape, std::span<const std::byte> bytes);
    static Tensor from_f32(Shape shape, std::span<const float> values);
    static Tensor from_f64(Shape shape, std::span<const double> values);

    DType dtype() const { return dtype_; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::int64_t numel() const { return element_count(shape_); }
    std::size_t nbytes() const { return data_.size(); }

    std::span<const std::byte> bytes() const { return data_; }
    std::span<std::byte> bytes() { return data_; }

    // Typed views; throw Error when the dtype does not match.
    std::span<const float> f32() const;
    std::span<float> f32();
    std::span<const double> f64() const;
    std::span<double> f64();
    // Raw 16-bit patterns of an F16 or BF16 tensor.
    std::span<const std::uint16_t> u16() const;
    std::span<std::uint16_t> u16();

    bool operator==(const Tensor& other) const = default;

private:
    DType dtype_ = DType::F32;
    Shape shape_;
    std::vector<std::byte> data_;
};

// Exact widening and round-to-nearest-even narrowing between any two dtypes.
Tensor convert(const Tensor& t, DType target);

// (m,k) x (k,n) -> (m,n). Both operands F32 (f32 accumulate) or both F64
// (f64 accumulate). The contraction index runs innermost in ascending order,
// so the result is bit-reproducible.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose2d(const Tensor& t);

// Replaces the shape; the buffer is unchanged.
Tensor reshape(const Tensor& t, Shape new_shape);

// Fixes `axis` at `index` and drops that axis.
Tensor slice_axis(const Tensor& t, std::size_t axis, std::int64_t index);

}  // namespace lorabridge
