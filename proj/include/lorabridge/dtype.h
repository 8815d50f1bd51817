// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

namespace lorabridge {

// Element types. F32/F16/BF16 are the storage types a checkpoint may carry;
// F64 is an in-memory compute type only and is never serialized.
enum class DType : std::uint8_t { F32, F16, BF16, F64 };

std::size_t dtype_size(DType dtype);
std::string_view dtype_name(DType dtype);

// Parses the safetensors spelling ("F32", "F16", "BF16"). Throws Error for
// anything else, including "F64".
DType parse_storage_dtype(std::string_view name);

bool is_storage_dtype(DType dtype);

// Scalar conversions. Narrowing uses round-to-nearest-even; widening is exact.
// NaN inputs produce a quiet NaN with the sign preserved.
std::uint16_t f32_to_bf16(float value);
float bf16_to_f32(std::uint16_t bits);
std::uint16_t f32_to_f16(float value);
float f16_to_f32(std::uint16_t bits);

// Single-rounding narrowing from f64 (no intermediate f32 rounding).
std::uint16_t f64_to_bf16(double value);
std::uint16_t f64_to_f16(double value);

}  // namespace lorabridge
