// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "lorabridge/error.h"
#include "lorabridge/tensor.h"
#include "oracles.h"

using namespace lorabridge;

namespace {

Tensor random_f32(Shape shape, std::mt19937& rng) {
    std::uniform_real_distribution<float> d(-1.0f, 1.0f);
    std::vector<float> v(static_cast<std::size_t>(element_count(shape)));
    for (auto& x : v) x = d(rng);
    return Tensor::from_f32(std::move(shape), v);
}

}  // namespace

TEST(Tensor, ZeroInitialized) {
    Tensor t(DType::BF16, {2, 3});
    EXPECT_EQ(t.numel(), 6);
    EXPECT_EQ(t.nbytes(), 12u);
    for (auto b : t.bytes()) EXPECT_EQ(b, std::byte{0});
}

TEST(Tensor, FromBytesChecksLength) {
    std::vector<std::byte> raw(10);
    EXPECT_THROW(Tensor::from_bytes(DType::F32, {3}, raw), Error);
}

TEST(Tensor, TypedViewChecksDtype) {
    Tensor t(DType::BF16, {2});
    EXPECT_THROW(t.f32(), Error);
    EXPECT_NO_THROW(t.u16());
}

TEST(Convert, OneToBf16AndBack) {
    const float one = 1.0f;
    auto t = Tensor::from_f32({1}, std::span(&one, 1));
    auto b = convert(t, DType::BF16);
    EXPECT_EQ(b.u16()[0], 0x3f80);
    EXPECT_EQ(convert(b, DType::F32).f32()[0], 1.0f);
}

TEST(Convert, Bf16ThroughF32IsIdentityExhaustive) {
    Tensor t(DType::BF16, {65536});
    auto bits = t.u16();
    for (std::uint32_t i = 0; i < 65536; ++i) bits[i] = static_cast<std::uint16_t>(i);
    auto back = convert(convert(t, DType::F32), DType::BF16);
    for (std::uint32_t i = 0; i < 65536; ++i) {
        const bool nan = (i & 0x7f80) == 0x7f80 && (i & 0x7f);
        if (!nan) ASSERT_EQ(back.u16()[i], i);
    }
}

TEST(Convert, NarrowsFromF64WithOneRounding) {
    const double x = 1.0 + std::ldexp(1.0, -8) + std::ldexp(1.0, -40);
    auto t = Tensor::from_f64({1}, std::span(&x, 1));
    EXPECT_EQ(convert(t, DType::BF16).u16()[0], 0x3f81);
}

TEST(Matmul, SmallKnownProduct) {
    const float a[] = {1, 2, 3, 4}, b[] = {5, 6, 7, 8};
    auto c = matmul(Tensor::from_f32({2, 2}, a), Tensor::from_f32({2, 2}, b));
    ASSERT_EQ(c.shape(), (Shape{2, 2}));
    EXPECT_EQ(c.f32()[0], 19.0f);
    EXPECT_EQ(c.f32()[1], 22.0f);
    EXPECT_EQ(c.f32()[2], 43.0f);
    EXPECT_EQ(c.f32()[3], 50.0f);
}

TEST(Matmul, IdentityLeavesMatrix) {
    std::mt19937 rng(1);
    const float eye[] = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    auto x = random_f32({3, 5}, rng);
    EXPECT_EQ(matmul(Tensor::from_f32({3, 3}, eye), x), x);
}

TEST(Matmul, EmptyContractionIsZero) {
    auto c = matmul(Tensor(DType::F32, {3, 0}), Tensor(DType::F32, {0, 4}));
    ASSERT_EQ(c.shape(), (Shape{3, 4}));
    for (float v : c.f32()) EXPECT_EQ(v, 0.0f);
}

TEST(Matmul, MatchesNaiveLoopBitExact) {
    std::mt19937 rng(5);
    std::uniform_int_distribution<int> dim(1, 16);
    for (int trial = 0; trial < 200; ++trial) {
        const int m = dim(rng), k = dim(rng), n = dim(rng);
        auto a = random_f32({m, k}, rng);
        auto b = random_f32({k, n}, rng);
        auto c = matmul(a, b);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                float s = 0.0f;
                for (int p = 0; p < k; ++p) s += a.f32()[i * k + p] * b.f32()[p * n + j];
                ASSERT_EQ(c.f32()[i * n + j], s);
            }
    }
}

TEST(Matmul, F64MatchesOracle) {
    std::mt19937 rng(9);
    auto a32 = random_f32({4, 3}, rng), b32 = random_f32({3, 5}, rng);
    auto a = convert(a32, DType::F64), b = convert(b32, DType::F64);
    std::vector<double> av(a.f64().begin(), a.f64().end()), bv(b.f64().begin(), b.f64().end());
    auto want = oracle::matmul(av, bv, 4, 3, 5);
    auto c = matmul(a, b);
    for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(c.f64()[i], want[i]);
}

TEST(Matmul, Errors) {
    EXPECT_THROW(matmul(Tensor(DType::F32, {2, 3}), Tensor(DType::F32, {2, 3})), Error);
    EXPECT_THROW(matmul(Tensor(DType::F32, {2}), Tensor(DType::F32, {2, 3})), Error);
    EXPECT_THROW(matmul(Tensor(DType::BF16, {2, 2}), Tensor(DType::BF16, {2, 2})), Error);
    EXPECT_THROW(matmul(Tensor(DType::F32, {2, 2}), Tensor(DType::F64, {2, 2})), Error);
}

TEST(Transpose, SwapsIndices) {
    const float v[] = {1, 2, 3, 4, 5, 6};
    auto t = transpose2d(Tensor::from_f32({2, 3}, v));
    ASSERT_EQ(t.shape(), (Shape{3, 2}));
    const float want[] = {1, 4, 2, 5, 3, 6};
    for (int i = 0; i < 6; ++i) EXPECT_EQ(t.f32()[i], want[i]);
}

TEST(Transpose, SymmetricIsFixedPoint) {
    const float v[] = {1, 2, 2, 3};
    auto t = Tensor::from_f32({2, 2}, v);
    EXPECT_EQ(transpose2d(t), t);
}

TEST(Transpose, TwiceIsIdentity) {
    std::mt19937 rng(2);
    auto t = random_f32({5, 7}, rng);
    EXPECT_EQ(transpose2d(transpose2d(t)), t);
    auto b = convert(t, DType::BF16);
    EXPECT_EQ(transpose2d(transpose2d(b)), b);
    EXPECT_THROW(transpose2d(Tensor(DType::F32, {2, 2, 2})), Error);
}

TEST(Reshape, FlattensHeadAxes) {
    std::mt19937 rng(4);
    auto b = random_f32({2, 4, 3}, rng);
    auto flat = reshape(b, {2, 12});
    EXPECT_EQ(flat.shape(), (Shape{2, 12}));
    EXPECT_TRUE(std::equal(flat.bytes().begin(), flat.bytes().end(), b.bytes().begin()));
    EXPECT_EQ(reshape(reshape(random_f32({6}, rng), {2, 3}), {6}).shape(), (Shape{6}));
    EXPECT_THROW(reshape(b, {5, 5}), Error);
}

TEST(SliceAxis, SplitsKvFactor) {
    // B (r=2, 2, kv=2, hd=3); element value encodes its index.
    std::vector<float> v(24);
    for (int i = 0; i < 24; ++i) v[i] = static_cast<float>(i);
    auto b = Tensor::from_f32({2, 2, 2, 3}, v);
    auto k = slice_axis(b, 1, 0);
    auto vv = slice_axis(b, 1, 1);
    ASSERT_EQ(k.shape(), (Shape{2, 2, 3}));
    for (int r = 0; r < 2; ++r)
        for (int j = 0; j < 6; ++j) {
            EXPECT_EQ(k.f32()[r * 6 + j], static_cast<float>(r * 12 + j));
            EXPECT_EQ(vv.f32()[r * 6 + j], static_cast<float>(r * 12 + 6 + j));
        }
}

TEST(SliceAxis, RankOneToScalarAndErrors) {
    const float v[] = {7, 8, 9};
    auto s = slice_axis(Tensor::from_f32({3}, v), 0, 2);
    EXPECT_EQ(s.rank(), 0u);
    EXPECT_EQ(s.numel(), 1);
    EXPECT_EQ(s.f32()[0], 9.0f);
    EXPECT_THROW(slice_axis(Tensor::from_f32({3}, v), 1, 0), Error);
    EXPECT_THROW(slice_axis(Tensor::from_f32({3}, v), 0, 3), Error);
    EXPECT_THROW(slice_axis(Tensor::from_f32({3}, v), 0, -1), Error);
}
