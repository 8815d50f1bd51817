// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <random>
#include <sstream>

#include "lorabridge/cli.h"
#include "lorabridge/safetensors.h"
#include "lorabridge/shard.h"
#include "tempdir.h"
#include "toy.h"

using namespace lorabridge;

namespace {

struct Result {
    int code;
    std::string out;
    std::string err;
};

Result run_cli(std::vector<std::string> args, const std::string& stdin_text = "") {
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    const int code = cli::run(args, in, out, err);
    return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), {});
}

// Toy base and LoRA files for the toy_arch.json fixture.
void write_toy(const toy::TempDir& dir) {
    std::mt19937_64 rng(77);
    const auto arch = load_arch(toy::data_path("toy_arch.json"));
    toy::ToyOptions opt;
    opt.rank = 4;
    auto ck = toy::random_checkpoints(arch, opt, rng);
    write_file(ck.base, dir / "base.safetensors");
    write_file(ck.lora, dir / "lora.safetensors");
}

std::vector<std::string> merge_args(const toy::TempDir& dir, const std::string& out) {
    return {"merge", "--base", (dir / "base.safetensors").string(), "--lora", (dir / "lora.safetensors").string(),
            "--arch", toy::data_path("toy_arch.json").string(), "--alpha", "16", "--rank", "4",
            "--out", (dir / out).string()};
}

}  // namespace

TEST(Cli, NoArgumentsIsUsageError) {
    auto r = run_cli({});
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("Usage"), std::string::npos);
    EXPECT_TRUE(r.out.empty());
}

TEST(Cli, UnknownSubcommandOrFlagIsUsageError) {
    EXPECT_EQ(run_cli({"frobnicate"}).code, 2);
    EXPECT_EQ(run_cli({"lr", "--peak", "1", "--warmup", "1", "--total", "2", "--step", "0", "--bogus"}).code, 2);
    EXPECT_EQ(run_cli({"lr", "--peak", "1"}).code, 2);
    EXPECT_EQ(run_cli({"map-names", "--direction", "sideways", "x"}).code, 2);
    EXPECT_EQ(run_cli({"--help"}).code, 0);
}

TEST(Cli, MergeThenInspect) {
    toy::TempDir dir;
    write_toy(dir);
    auto r = run_cli(merge_args(dir, "merged.safetensors"));
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_TRUE(r.err.empty());
    auto i = run_cli({"inspect", (dir / "merged.safetensors").string()});
    ASSERT_EQ(i.code, 0) << i.err;
    EXPECT_NE(i.out.find("model.layers.1.self_attn.k_proj.weight"), std::string::npos);
    EXPECT_NE(i.out.find("lorabridge_version"), std::string::npos);
}

TEST(Cli, MergeIsByteDeterministicAndRefusesOverwrite) {
    toy::TempDir dir;
    write_toy(dir);
    ASSERT_EQ(run_cli(merge_args(dir, "a.safetensors")).code, 0);
    ASSERT_EQ(run_cli(merge_args(dir, "b.safetensors")).code, 0);
    EXPECT_EQ(slurp(dir / "a.safetensors"), slurp(dir / "b.safetensors"));

    auto again = run_cli(merge_args(dir, "a.safetensors"));
    EXPECT_EQ(again.code, 1);
    EXPECT_NE(again.err.find("--force"), std::string::npos);
    EXPECT_EQ(std::count(again.err.begin(), again.err.end(), '\n'), 1);
    auto forced = merge_args(dir, "a.safetensors");
    forced.push_back("--force");
    EXPECT_EQ(run_cli(forced).code, 0);
    EXPECT_EQ(slurp(dir / "a.safetensors"), slurp(dir / "b.safetensors"));

    auto bf16 = merge_args(dir, "c.safetensors");
    bf16.insert(bf16.end(), {"--dtype", "BF16"});
    ASSERT_EQ(run_cli(bf16).code, 0);
    const auto merged = read_file(dir / "c.safetensors");
    for (const auto& [n, e] : merged.entries()) EXPECT_EQ(e.dtype, DType::BF16);
}

TEST(Cli, MergeDataErrorsExitOne) {
    toy::TempDir dir;
    write_toy(dir);
    auto args = merge_args(dir, "out.safetensors");
    args[2] = (dir / "missing.safetensors").string();
    auto r = run_cli(args);
    EXPECT_EQ(r.code, 1);
    EXPECT_TRUE(r.out.empty());
    auto wrong_rank = merge_args(dir, "out.safetensors");
    wrong_rank[10] = "2";
    EXPECT_EQ(run_cli(wrong_rank).code, 1);
    EXPECT_FALSE(std::filesystem::exists(dir / "out.safetensors"));
}

TEST(Cli, InspectRejectsGarbage) {
    toy::TempDir dir;
    std::ofstream(dir / "junk.safetensors") << "not a safetensors file at all";
    auto r = run_cli({"inspect", (dir / "junk.safetensors").string()});
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST(Cli, ValidateMesh) {
    const auto arch = toy::data_path("gemma_style_arch.json").string();
    auto bad = run_cli({"validate-mesh", "--arch", arch, "--tp", "8"});
    EXPECT_EQ(bad.code, 1);
    EXPECT_NE(bad.out.find("kv_einsum num_kv_heads=4 is not divisible by tp=8"), std::string::npos);
    EXPECT_EQ(std::count(bad.err.begin(), bad.err.end(), '\n'), 1);
    auto ok = run_cli({"validate-mesh", "--arch", arch, "--tp", "4"});
    EXPECT_EQ(ok.code, 0) << ok.err;
    EXPECT_TRUE(ok.err.empty());
    EXPECT_EQ(run_cli({"validate-mesh", "--arch", arch, "--tp", "0"}).code, 2);
}

TEST(Cli, MapNames) {
    auto a = run_cli({"map-names", "--direction", "tunix-to-hf", "layers.0.kv_einsum"});
    EXPECT_EQ(a.code, 0);
    EXPECT_EQ(a.out, "layers.0.k_proj\nlayers.0.v_proj\n");
    auto b = run_cli({"map-names", "--direction", "hf-to-tunix"}, "layers.3.q_proj\nlayers.1.gate_proj\n");
    EXPECT_EQ(b.out, "layers.3.q_einsum\nlayers.1.gate_proj\n");
    EXPECT_EQ(run_cli({"map-names", "--direction", "hf-to-tunix", "embedder"}).code, 1);
}

TEST(Cli, RepairSpecs) {
    toy::TempDir dir;
    const auto out = (dir / "repaired.json").string();
    auto r = run_cli({"repair-specs", "--mesh", "1x8", "--in", toy::data_path("shard_tree.json").string(), "--out", out});
    ASSERT_EQ(r.code, 0) << r.err;
    auto doc = parse_shard_document(slurp(out));
    EXPECT_TRUE(find_defects(doc.params, doc.mesh).empty());
    EXPECT_EQ(doc.mesh.size_of("tp"), 8);
    EXPECT_EQ(run_cli({"repair-specs", "--mesh", "8", "--in", toy::data_path("shard_tree.json").string(), "--out", out})
                  .code,
              1);
}

TEST(Cli, PrepDataIsDeterministic) {
    toy::TempDir dir;
    const auto in = toy::data_path("sft_samples.jsonl").string();
    auto a = run_cli({"prep-data", "--in", in, "--out", (dir / "a.jsonl").string(), "--max-seq-len", "40"});
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, R"({"total":4,"kept":2,"dropped_too_long":1,"dropped_empty":1,"max_seq_len":40})"
                     "\n");
    auto b = run_cli({"prep-data", "--in", in, "--out", (dir / "b.jsonl").string(), "--max-seq-len", "40"});
    EXPECT_EQ(slurp(dir / "a.jsonl"), slurp(dir / "b.jsonl"));
    const auto text = slurp(dir / "a.jsonl");
    EXPECT_EQ(text.find("<think>"), std::string::npos);
    EXPECT_EQ(text.find("hardware engineer"), std::string::npos);
    EXPECT_NE(text.find("assign y = ~a;"), std::string::npos);
    EXPECT_NE(text.find("loss_mask"), std::string::npos);
    EXPECT_EQ(run_cli({"prep-data", "--in", in, "--out", (dir / "c.jsonl").string(), "--max-seq-len", "0"}).code, 1);
}

TEST(Cli, LrAndCost) {
    auto lr = run_cli({"lr", "--peak", "1e-4", "--warmup", "100", "--total", "1244", "--step", "100"});
    EXPECT_EQ(lr.code, 0);
    EXPECT_EQ(std::stod(lr.out), 1e-4);
    EXPECT_EQ(run_cli({"lr", "--peak", "1e-4", "--warmup", "100", "--total", "1244", "--step", "2000"}).code, 1);
    auto c = run_cli({"cost", "--train-hours", "5.39", "--train-rate", "22.12", "--throughput", "486", "--serve-rate",
                      "22.12", "--serve-hours", "1", "8", "24"});
    ASSERT_EQ(c.code, 0) << c.err;
    EXPECT_NE(c.out.find("$119.23"), std::string::npos);
    EXPECT_NE(c.out.find("$141.35"), std::string::npos);
    EXPECT_NE(c.out.find("$296.19"), std::string::npos);
    EXPECT_NE(c.out.find("$650.11"), std::string::npos);
}

TEST(Cli, BenchReport) {
    toy::TempDir dir;
    {
        std::ofstream f(dir / "runs.jsonl");
        const int qps[] = {4, 8, 16, 32, 64};
        const int per_sec[] = {700, 1300, 1390, 1404, 1405};
        for (int l = 0; l < 5; ++l) {
            // Ten requests of per_sec/10 tokens each, all finishing within 1 s.
            for (int i = 0; i < 10; ++i) {
                f << "{\"qps_target\": " << qps[l] << ", \"input_tokens\": 64, \"output_tokens\": " << per_sec[l] / 10
                  << ", \"ttft_ms\": " << 20 + i << ", \"e2e_ms\": " << (i == 9 ? 1000 : 500)
                  << ", \"start_ms\": 0}\n";
            }
        }
    }
    auto r = run_cli({"bench-report", "--in", (dir / "runs.jsonl").string(), "--rate", "21.52"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("peak output throughput: 1400.0 tok/s at QPS 32"), std::string::npos) << r.out;
    EXPECT_NE(r.out.find("saturates at QPS 32"), std::string::npos) << r.out;
    auto j = run_cli({"bench-report", "--in", (dir / "runs.jsonl").string(), "--rate", "21.52", "--json"});
    ASSERT_EQ(j.code, 0);
    EXPECT_NE(j.out.find("\"saturation_qps\": \"32\""), std::string::npos) << j.out;
    EXPECT_EQ(run_cli({"bench-report", "--in", (dir / "none.jsonl").string(), "--rate", "1"}).code, 1);
}
