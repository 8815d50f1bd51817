// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/dtype.h"

#include <bit>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

#include "lorabridge/error.h"

namespace lorabridge {

static_assert(std::endian::native == std::endian::little,
              "safetensors payloads are little-endian; big-endian hosts are not supported");

std::size_t dtype_size(DType dtype) {
    switch (dtype) {
    case DType::F32: return 4;
    case DType::F16: return 2;
    case DType::BF16: return 2;
    case DType::F64: return 8;
    }
    return 0;
}

std::string_view dtype_name(DType dtype) {
    switch (dtype) {
    case DType::F32: return "F32";
    case DType::F16: return "F16";
    case DType::BF16: return "BF16";
    case DType::F64: return "F64";
    }
    return "?";
}

DType parse_storage_dtype(std::string_view name) {
    if (name == "F32") return DType::F32;
    if (name == "F16") return DType::F16;
    if (name == "BF16") return DType::BF16;
    throw Error(fmt::format("unsupported dtype '{}'", name));
}

bool is_storage_dtype(DType dtype) {
    return dtype != DType::F64;
}

std::uint16_t f32_to_bf16(float value) {
    const auto bits = std::bit_cast<std::uint32_t>(value);
    if ((bits & 0x7fffffffu) > 0x7f800000u) {
        return static_cast<std::uint16_t>(((bits >> 16) & 0x8000u) | 0x7fc0u);
    }
    // Adding 0x7fff plus the lsb of the kept half rounds ties to even; an
    // overflow out of the largest finite value carries into infinity.
    const std::uint32_t lsb = (bits >> 16) & 1u;
    return static_cast<std::uint16_t>((bits + 0x7fffu + lsb) >> 16);
}

float bf16_to_f32(std::uint16_t bits) {
    return std::bit_cast<float>(static_cast<std::uint32_t>(bits) << 16);
}

std::uint16_t f32_to_f16(float value) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(value);
    const auto sign = static_cast<std::uint16_t>((bits >> 16) & 0x8000u);
    bits &= 0x7fffffffu;

    if (bits > 0x7f800000u) return sign | 0x7e00u;
    // >= 65520 rounds to infinity (65504 is the largest finite half).
    if (bits >= 0x477ff000u) return sign | 0x7c00u;

    if (bits < 0x38800000u) {
        // Result is subnormal or zero: let the FPU do the rounding by adding
        // a magic constant whose ulp equals the half subnormal step.
        constexpr std::uint32_t magic_bits = (127u - 15u + 23u - 10u + 1u) << 23;
        const float magic = std::bit_cast<float>(magic_bits);
        const float sum = std::bit_cast<float>(bits) + magic;
        return sign | static_cast<std::uint16_t>(std::bit_cast<std::uint32_t>(sum) - magic_bits);
    }

    const std::uint32_t mant_odd = (bits >> 13) & 1u;
    bits += (static_cast<std::uint32_t>(15 - 127) << 23) + 0xfffu + mant_odd;
    return sign | static_cast<std::uint16_t>(bits >> 13);
}

float f16_to_f32(std::uint16_t h) {
    const std::uint32_t sign = static_cast<std::uint32_t>(h & 0x8000u) << 16;
    const std::uint32_t exponent = (h >> 10) & 0x1fu;
    std::uint32_t mantissa = h & 0x3ffu;

    if (exponent == 0x1f) {
        return std::bit_cast<float>(sign | 0x7f800000u | (mantissa << 13));
    }
    if (exponent == 0) {
        if (mantissa == 0) return std::bit_cast<float>(sign);
        // Subnormal: renormalize.
        int shift = 0;
        while ((mantissa & 0x400u) == 0) {
            mantissa <<= 1;
            ++shift;
        }
        mantissa &= 0x3ffu;
        const std::uint32_t exp32 = static_cast<std::uint32_t>(127 - 15 + 1 - shift);
        return std::bit_cast<float>(sign | (exp32 << 23) | (mantissa << 13));
    }
    return std::bit_cast<float>(sign | ((exponent + 127 - 15) << 23) | (mantissa << 13));
}

namespace {

// Round-to-odd f64 -> f32. The result keeps a sticky bit for every discarded
// bit, so a second round-to-nearest-even step into a format at least two bits
// narrower gives the correctly rounded result.
float f64_to_f32_round_odd(double value) {
    const auto nearest = static_cast<float>(value);
    if (static_cast<double>(nearest) == value) return nearest;
    float truncated = nearest;
    if (std::fabs(static_cast<double>(nearest)) > std::fabs(value)) {
        truncated = std::nextafter(nearest, 0.0f);
    }
    return std::bit_cast<float>(std::bit_cast<std::uint32_t>(truncated) | 1u);
}

}  // namespace

std::uint16_t f64_to_bf16(double value) {
    if (std::isnan(value)) return f32_to_bf16(static_cast<float>(value));
    return f32_to_bf16(f64_to_f32_round_odd(value));
}

std::uint16_t f64_to_f16(double value) {
    if (std::isnan(value)) return f32_to_f16(static_cast<float>(value));
    return f32_to_f16(f64_to_f32_round_odd(value));
}

}  // namespace lorabridge
