// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <random>

#include "lorabridge/error.h"
#include "lorabridge/merge.h"
#include "toy.h"

using namespace lorabridge;

namespace {

ArchDescriptor small_arch() {
    return parse_arch(R"({"hidden_size":6,"num_heads":2,"num_kv_heads":1,"head_dims":3,"num_layers":2,"intermediate_size":5})");
}

MergeConfig config(double alpha, std::int64_t rank) {
    MergeConfig c;
    c.alpha = alpha;
    c.rank = rank;
    return c;
}

SafetensorsFile with_extra(const SafetensorsFile& f, const std::string& name, const Tensor& t) {
    SafetensorsBuilder b;
    b.set_metadata(f.metadata());
    for (const auto& [n, e] : f.entries()) b.add(n, e.dtype, e.shape, f.payload(n));
    b.add(name, t);
    return std::move(b).build();
}

std::string merge_error(const SafetensorsFile& base, const std::vector<LoraPair>& pairs, const MergeConfig& cfg,
                        const ArchDescriptor& arch) {
    try {
        merge(base, pairs, cfg, arch);
    } catch (const Error& e) {
        return e.what();
    }
    return "";
}

}  // namespace

TEST(Merge, MatchesIndexLoopOracleWithinOneUlp) {
    std::mt19937_64 rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
        const auto arch = toy::random_arch(rng);
        toy::ToyOptions opt;
        opt.rank = toy::pick(rng, 1, 4);
        const auto ck = toy::random_checkpoints(arch, opt, rng);
        const double alpha = static_cast<double>(toy::pick(rng, 1, 32));
        const auto merged = merge(ck.base, load_lora_factors(ck.lora, arch), config(alpha, opt.rank), arch);
        const auto expect = toy::oracle_merge(arch, ck.base, ck.lora, alpha / static_cast<double>(opt.rank), opt.rank);
        for (const auto& [key, values] : expect) {
            const auto& e = merged.entry(key);
            EXPECT_EQ(e.dtype, ck.base.entry(key).dtype);
            EXPECT_LE(toy::max_ulp_error(merged.payload(key), e.dtype, values), 1) << key << " trial " << trial;
        }
    }
}

TEST(Merge, ZeroFactorsReproduceBaseBitExactly) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto arch = toy::random_arch(rng);
        toy::ToyOptions opt;
        opt.rank = toy::pick(rng, 1, 4);
        opt.zero_factors = true;
        auto ck = toy::random_checkpoints(arch, opt, rng);
        const auto merged = merge(ck.base, load_lora_factors(ck.lora, arch), config(16, opt.rank), arch);
        for (const auto& [name, e] : ck.base.entries()) {
            auto a = ck.base.payload(name), b = merged.payload(name);
            EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end())) << name;
        }
    }
}

TEST(Merge, ZeroFactorsKeepNegativeZeroAndNanPayload) {
    const auto arch = small_arch();
    std::mt19937_64 rng(1);
    toy::ToyOptions opt;
    opt.zero_factors = true;
    opt.mixed_base_dtypes = false;
    auto ck = toy::random_checkpoints(arch, opt, rng);
    // Rebuild q_proj of layer 0 with special values.
    const auto key = render_hf_key(arch, 0, "q_proj");
    SafetensorsBuilder b;
    for (const auto& [n, e] : ck.base.entries()) {
        if (n != key) b.add(n, e.dtype, e.shape, ck.base.payload(n));
    }
    std::vector<float> vals(36, -0.0f);
    vals[1] = std::bit_cast<float>(0x7fc00123u);
    b.add(key, Tensor::from_f32({6, 6}, vals));
    auto base = std::move(b).build();
    auto merged = merge(base, load_lora_factors(ck.lora, arch), config(8, 2), arch);
    auto a = base.payload(key), m = merged.payload(key);
    EXPECT_TRUE(std::equal(a.begin(), a.end(), m.begin(), m.end()));
}

TEST(Merge, UntargetedTensorsCopiedAndVersionRecorded) {
    const auto arch = small_arch();
    std::mt19937_64 rng(3);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto merged = merge(ck.base, load_lora_factors(ck.lora, arch), config(16, 2), arch);
    for (const char* name : {"model.embed_tokens.weight", "model.norm.weight"}) {
        auto a = ck.base.payload(name), b = merged.payload(name);
        EXPECT_TRUE(std::equal(a.begin(), a.end(), b.begin(), b.end()));
    }
    EXPECT_EQ(merged.metadata().at("format"), "pt");
    EXPECT_EQ(merged.metadata().at(std::string(kVersionMetadataKey)), LORABRIDGE_VERSION);
    EXPECT_EQ(list_tensors(merged).size(), list_tensors(ck.base).size());
}

TEST(Merge, OutputDtypeConvertsEverything) {
    const auto arch = small_arch();
    std::mt19937_64 rng(4);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto cfg = config(16, 2);
    cfg.output_dtype = DType::BF16;
    auto merged = merge(ck.base, load_lora_factors(ck.lora, arch), cfg, arch);
    for (const auto& [n, e] : merged.entries()) EXPECT_EQ(e.dtype, DType::BF16) << n;
    const auto expect = toy::oracle_merge(arch, ck.base, ck.lora, 8.0, 2);
    for (const auto& [key, values] : expect) {
        EXPECT_LE(toy::max_ulp_error(merged.payload(key), DType::BF16, values), 1) << key;
    }
}

TEST(Merge, F32AccumulationIsAvailable) {
    const auto arch = small_arch();
    std::mt19937_64 rng(6);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto cfg = config(16, 2);
    cfg.accumulate = DType::F32;
    auto merged = merge(ck.base, load_lora_factors(ck.lora, arch), cfg, arch);
    EXPECT_EQ(list_tensors(merged), list_tensors(ck.base));
}

TEST(Merge, IsDeterministic) {
    const auto arch = small_arch();
    std::mt19937_64 rng(10);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto pairs = load_lora_factors(ck.lora, arch);
    EXPECT_EQ(serialize(merge(ck.base, pairs, config(16, 2), arch)),
              serialize(merge(ck.base, pairs, config(16, 2), arch)));
}

TEST(Merge, Errors) {
    const auto arch = small_arch();
    std::mt19937_64 rng(12);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto pairs = load_lora_factors(ck.lora, arch);

    EXPECT_NE(merge_error(ck.base, pairs, config(16, 3), arch).find("rank"), std::string::npos);
    EXPECT_THROW(merge(ck.base, pairs, config(0, 2), arch), Error);

    auto dup = pairs;
    dup.push_back(pairs.front());
    dup.back().module_name = "copy";
    EXPECT_NE(merge_error(ck.base, dup, config(16, 2), arch).find("duplicate pair"), std::string::npos);

    // Base without one target key.
    SafetensorsBuilder b;
    const auto missing = render_hf_key(arch, 1, "v_proj");
    for (const auto& [n, e] : ck.base.entries()) {
        if (n != missing) b.add(n, e.dtype, e.shape, ck.base.payload(n));
    }
    EXPECT_NE(merge_error(std::move(b).build(), pairs, config(16, 2), arch).find("missing target key"),
              std::string::npos);

    // Base target with the wrong shape.
    SafetensorsBuilder c;
    const auto wrong = render_hf_key(arch, 0, "up_proj");
    for (const auto& [n, e] : ck.base.entries()) {
        if (n != wrong) c.add(n, e.dtype, e.shape, ck.base.payload(n));
    }
    c.add(wrong, Tensor(DType::F32, {6, 5}));
    EXPECT_NE(merge_error(std::move(c).build(), pairs, config(16, 2), arch).find("shape mismatch"),
              std::string::npos);

    // Factor with the wrong shape for the architecture.
    auto bad = pairs;
    bad.front().b = Tensor(DType::F32, {2, 7});
    EXPECT_THROW(merge(ck.base, bad, config(16, 2), arch), Error);
}

TEST(LoadFactors, PairsAndValidates) {
    const auto arch = small_arch();
    std::mt19937_64 rng(13);
    auto ck = toy::random_checkpoints(arch, {}, rng);
    auto pairs = load_lora_factors(ck.lora, arch);
    ASSERT_EQ(pairs.size(), 12u);
    EXPECT_TRUE(std::is_sorted(pairs.begin(), pairs.end(),
                               [](const LoraPair& a, const LoraPair& b) { return a.module_name < b.module_name; }));
    for (const auto& p : pairs) EXPECT_EQ(p.rank(), 2);

    auto expect_error = [&](const SafetensorsFile& f, const std::string& needle) {
        try {
            load_lora_factors(f, arch);
            ADD_FAILURE() << "expected " << needle;
        } catch (const Error& e) {
            EXPECT_NE(std::string(e.what()).find(needle), std::string::npos) << e.what();
        }
    };
    expect_error(with_extra(ck.lora, "layers.0.attn.q_einsum.scale", Tensor(DType::F32, {1})), "unexpected tensor");
    expect_error(with_extra(ck.lora, "layers.1.attn.extra_einsum.lora_a", Tensor(DType::F32, {6, 2})),
                 "orphan factor");

    SafetensorsBuilder b;
    b.add("layers.0.attn.foo.lora_a", Tensor(DType::F32, {6, 2}));
    b.add("layers.0.attn.foo.lora_b", Tensor(DType::F32, {2, 6}));
    expect_error(std::move(b).build(), "unknown module kind");

    SafetensorsBuilder c;
    c.add("layers.9.mlp.up_proj.lora_a", Tensor(DType::F32, {6, 2}));
    c.add("layers.9.mlp.up_proj.lora_b", Tensor(DType::F32, {2, 5}));
    expect_error(std::move(c).build(), "out of range");

    SafetensorsBuilder d;
    d.add("layers.0.mlp.up_proj.lora_a", Tensor(DType::F32, {6, 2}));
    d.add("layers.0.mlp.up_proj.lora_b", Tensor(DType::F32, {3, 5}));
    expect_error(std::move(d).build(), "rank mismatch");

    SafetensorsBuilder e;
    e.add("mlp.up_proj.lora_a", Tensor(DType::F32, {6, 2}));
    e.add("mlp.up_proj.lora_b", Tensor(DType::F32, {2, 5}));
    expect_error(std::move(e).build(), "no layer index");
}

TEST(ComputeDelta, KvProducesKAndVFromTheirHalves) {
    const auto arch = small_arch();  // kv=1, hd=3, hidden=6
    // A = e_0 column selector: delta rows equal B rows for input 0.
    std::vector<float> a(6 * 1, 0.0f);
    a[0] = 1.0f;
    std::vector<float> b(1 * 2 * 1 * 3);
    for (int i = 0; i < 6; ++i) b[i] = static_cast<float>(i + 1);
    LoraPair p{"layers.0.attn.kv_einsum", 0, ModuleKind::KVEinsum, Tensor::from_f32({6, 1}, a),
               Tensor::from_f32({1, 2, 1, 3}, b)};
    auto d = compute_delta(p, arch);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d[0].hf_key, "model.layers.0.self_attn.k_proj.weight");
    EXPECT_EQ(d[0].tensor.shape(), (Shape{3, 6}));
    for (int row = 0; row < 3; ++row) {
        EXPECT_EQ(d[0].tensor.f64()[row * 6 + 0], row + 1.0);
        EXPECT_EQ(d[1].tensor.f64()[row * 6 + 0], row + 4.0);
        EXPECT_EQ(d[0].tensor.f64()[row * 6 + 1], 0.0);
    }
}
