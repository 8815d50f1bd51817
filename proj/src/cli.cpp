// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/cli.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "lorabridge/bench.h"
#include "lorabridge/error.h"
#include "lorabridge/layout.h"
#include "lorabridge/merge.h"
#include "lorabridge/safetensors.h"
#include "lorabridge/sft.h"
#include "lorabridge/shard.h"

namespace lorabridge::cli {

namespace fs = std::filesystem;

namespace {

std::string read_text(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(fmt::format("cannot open '{}'", path.string()));
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
    auto tmp = path;
    tmp += ".partial";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error(fmt::format("cannot write '{}'", path.string()));
        f << text;
        if (!f.flush()) throw Error(fmt::format("cannot write '{}'", path.string()));
    }
    fs::rename(tmp, path);
}

std::string format_qps(double qps) {
    return std::isinf(qps) ? std::string("inf") : fmt::format("{:g}", qps);
}

std::string format_opt(const std::optional<double>& v) {
    return v ? fmt::format("{:.2f}", *v) : std::string("-");
}

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

// ---- inspect ----

void cmd_inspect(const fs::path& file, std::ostream& out) {
    const auto st = read_file(file);
    if (!st.metadata().empty()) {
        out << "metadata:\n";
        for (const auto& [k, v] : st.metadata()) out << fmt::format("  {} = {}\n", k, v);
    }
    const auto infos = list_tensors(st);
    out << fmt::format("tensors: {}\n", infos.size());
    for (const auto& t : infos) {
        out << fmt::format("  {}  {}  {}  {} bytes\n", t.name, dtype_name(t.dtype), shape_to_string(t.shape),
                           t.byte_size);
    }
}

// ---- merge ----

struct MergeArgs {
    std::string base, lora, arch, out, dtype;
    double alpha = 0.0;
    std::int64_t rank = 0;
    bool force = false;
};

void cmd_merge(const MergeArgs& a, std::ostream& out) {
    if (fs::exists(a.out) && !a.force) {
        throw Error(fmt::format("'{}' already exists; pass --force to overwrite", a.out));
    }
    MergeConfig cfg;
    cfg.alpha = a.alpha;
    cfg.rank = a.rank;
    if (!a.dtype.empty()) cfg.output_dtype = parse_storage_dtype(a.dtype);
    cfg.validate();

    const auto arch = load_arch(a.arch);
    const auto base = read_file(a.base);
    const auto lora = read_file(a.lora);
    const auto pairs = load_lora_factors(lora, arch);
    const auto merged = merge(base, pairs, cfg, arch);
    write_file(merged, a.out);
    out << fmt::format("merged {} modules (scale {:g}) into {}\n", pairs.size(), cfg.scale(), a.out);
}

// ---- map-names ----

void cmd_map_names(const std::string& direction, std::vector<std::string> names, std::istream& in,
                   std::ostream& out) {
    const auto dir = direction == "hf-to-tunix" ? Direction::HFToTunix : Direction::TunixToHF;
    if (names.empty()) {
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (!line.empty()) names.push_back(line);
        }
    }
    for (const auto& name : names) {
        for (const auto& mapped : map_name(name, dir)) out << mapped << '\n';
    }
}

// ---- repair-specs ----

void cmd_repair_specs(const std::string& mesh_text, const fs::path& in_path, const fs::path& out_path,
                      std::ostream& out) {
    auto doc = parse_shard_document(read_text(in_path));
    doc.mesh = Mesh::parse_fsdp_tp(mesh_text);
    const auto before = find_defects(doc.params, doc.mesh);
    doc.params = repair_tree(std::move(doc.params), doc.mesh);
    const auto after = find_defects(doc.params, doc.mesh);
    if (!after.empty()) {
        throw Error(fmt::format("'{}': {} after repair", after.front().path, after.front().problem));
    }
    write_text(out_path, render_shard_document(doc) + "\n");
    out << fmt::format("repaired {} of {} params\n", before.size(), doc.params.size());
}

// ---- validate-mesh ----

int cmd_validate_mesh(const fs::path& arch_path, std::int64_t fsdp, std::int64_t tp, std::ostream& out,
                      std::ostream& err) {
    const auto arch = load_arch(arch_path);
    const Mesh mesh({{"fsdp", fsdp}, {"tp", tp}});
    const auto violations = validate_mesh(mesh, arch);
    for (const auto& v : violations) out << v.describe() << '\n';
    if (!violations.empty()) {
        err << fmt::format("error: mesh ({}, {}) is invalid for this architecture: {} violation(s)\n", fsdp, tp,
                           violations.size());
        return kDataError;
    }
    out << fmt::format("mesh ({}, {}) ok: {:.2f} GB of bf16 projection weights per chip\n", fsdp, tp,
                       memory_per_chip(arch, mesh, 2.0));
    return kOk;
}

// ---- prep-data ----

sft::RawSample parse_sample(const nlohmann::json& j) {
    sft::RawSample s;
    for (const auto& t : j.at("turns")) {
        sft::Turn turn;
        turn.role = sft::parse_role(t.at("role").get<std::string>());
        turn.text = t.at("text").get<std::string>();
        if (turn.role == sft::Role::Model) turn.text = sft::strip_reasoning(turn.text);
        s.turns.push_back(std::move(turn));
    }
    return s;
}

void cmd_prep_data(const fs::path& in_path, const fs::path& out_path, std::int64_t max_seq_len,
                   const std::string& tokenizer_name, std::ostream& out) {
    const sft::Tokenizer tokenize = tokenizer_name == "byte" ? sft::Tokenizer(sft::byte_tokenize)
                                                             : sft::Tokenizer(sft::whitespace_tokenize);
    std::ifstream in(in_path);
    if (!in) throw Error(fmt::format("cannot open '{}'", in_path.string()));

    std::vector<sft::TokenizedSample> samples;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            samples.push_back(sft::build_loss_mask(parse_sample(nlohmann::json::parse(line)), tokenize));
        } catch (const nlohmann::json::exception& e) {
            throw Error(fmt::format("{}:{}: {}", in_path.string(), line_no, e.what()));
        } catch (const Error& e) {
            throw Error(fmt::format("{}:{}: {}", in_path.string(), line_no, e.what()));
        }
    }

    auto result = sft::filter_samples(std::move(samples), max_seq_len);
    std::string body;
    for (const auto& s : result.kept) {
        nlohmann::ordered_json turns = nlohmann::ordered_json::array();
        for (const auto& t : s.rendered) turns.push_back({{"role", sft::role_name(t.role)}, {"text", t.text}});
        nlohmann::ordered_json rec;
        rec["turns"] = std::move(turns);
        rec["token_ids"] = s.token_ids;
        rec["loss_mask"] = s.loss_mask;
        body += rec.dump();
        body += '\n';
    }
    write_text(out_path, body);

    const auto& st = result.stats;
    nlohmann::ordered_json summary = {{"total", st.total},
                                      {"kept", st.kept},
                                      {"dropped_too_long", st.dropped_too_long},
                                      {"dropped_empty", st.dropped_empty},
                                      {"max_seq_len", max_seq_len}};
    out << summary.dump() << '\n';
}

// ---- lr ----

void cmd_lr(double peak, std::int64_t warmup, std::int64_t total, std::int64_t step, std::ostream& out) {
    sft::ScheduleConfig cfg{peak, warmup, total};
    out << fmt::format("{:.17g}\n", sft::lr_at(step, cfg));
}

// ---- bench-report ----

void cmd_bench_report(const fs::path& in_path, double rate, double epsilon, bool as_json, std::ostream& out) {
    std::ifstream in(in_path);
    if (!in) throw Error(fmt::format("cannot open '{}'", in_path.string()));
    const auto records = bench::read_records(in);
    if (records.empty()) throw Error(fmt::format("'{}' holds no records", in_path.string()));
    const auto runs = bench::summarize_sweep(records);
    const auto peak = bench::peak_throughput(runs);
    const auto serve = bench::serving_cost(rate, peak.tok_s);
    std::optional<double> saturation;
    if (runs.size() >= 2) saturation = bench::saturation_qps(runs, epsilon);

    if (as_json) {
        nlohmann::ordered_json jr = nlohmann::ordered_json::array();
        for (const auto& r : runs) {
            jr.push_back({{"qps_target", format_qps(r.qps_target)},
                          {"median_ttft_ms", r.median_ttft_ms},
                          {"p99_itl_ms", opt_json(r.p99_itl_ms)},
                          {"median_tpot_ms", opt_json(r.median_tpot_ms)},
                          {"output_throughput_tok_s", r.output_throughput_tok_s},
                          {"request_count", r.request_count}});
        }
        nlohmann::ordered_json doc;
        doc["runs"] = std::move(jr);
        doc["peak"] = {{"qps_target", format_qps(peak.qps_target)}, {"tok_s", peak.tok_s}};
        doc["saturation_qps"] = saturation ? nlohmann::ordered_json(format_qps(*saturation)) : nullptr;
        doc["serving"] = {{"hourly_rate", serve.hourly_rate},
                          {"tokens_per_hour", serve.tokens_per_hour},
                          {"dollars_per_1M_tokens", serve.dollars_per_1m_tokens}};
        out << doc.dump(2) << '\n';
        return;
    }

    out << fmt::format("{:>8}  {:>10}  {:>10}  {:>10}  {:>12}  {:>8}\n", "QPS", "TTFT p50", "ITL p99", "TPOT p50",
                       "tok/s", "requests");
    for (const auto& r : runs) {
        out << fmt::format("{:>8}  {:>10.2f}  {:>10}  {:>10}  {:>12.1f}  {:>8}\n", format_qps(r.qps_target),
                           r.median_ttft_ms, format_opt(r.p99_itl_ms), format_opt(r.median_tpot_ms),
                           r.output_throughput_tok_s, r.request_count);
    }
    out << fmt::format("peak output throughput: {:.1f} tok/s at QPS {}\n", peak.tok_s, format_qps(peak.qps_target));
    if (saturation) out << fmt::format("saturates at QPS {} (epsilon {:g})\n", format_qps(*saturation), epsilon);
    out << fmt::format("serving at ${:.2f}/hr: {:.2f}M tok/hr, ${:.2f}/1M tok\n", serve.hourly_rate,
                       serve.tokens_per_hour / 1e6, serve.dollars_per_1m_tokens);
}

// ---- cost ----

struct CostArgs {
    double train_hours = 0.0, train_rate = 0.0, throughput = 0.0, serve_rate = 0.0;
    std::vector<double> serve_hours;
    std::optional<double> serve_throughput;
};

void cmd_cost(const CostArgs& a, std::ostream& out) {
    const auto train = bench::training_cost({a.train_rate, a.train_hours, a.throughput});
    out << fmt::format("training: {:.2f} hr x ${:.2f}/hr = ${:.2f}; ${:.2f}/1M tok\n", a.train_hours, a.train_rate,
                       train.total_cost, train.dollars_per_1m_tokens);
    if (a.serve_throughput) {
        const auto serve = bench::serving_cost(a.serve_rate, *a.serve_throughput);
        out << fmt::format("serving: {:.2f}M tok/hr; ${:.2f}/1M tok\n", serve.tokens_per_hour / 1e6,
                           serve.dollars_per_1m_tokens);
    }
    for (double hours : a.serve_hours) {
        out << fmt::format("tco (train + {:g} hr serving): ${:.2f}\n", hours, bench::tco(train, a.serve_rate, hours));
    }
}

}  // namespace

int run(std::span<const std::string> args, std::istream& in, std::ostream& out, std::ostream& err) {
    CLI::App app{"LoRA checkpoint merge, sharding and cost toolkit", "lorabridge"};
    app.set_version_flag("--version", LORABRIDGE_VERSION);
    app.require_subcommand(1);

    std::string inspect_file;
    auto* inspect = app.add_subcommand("inspect", "List the tensors and metadata of a safetensors file");
    inspect->add_option("file", inspect_file, "safetensors file")->required();

    MergeArgs merge_args;
    auto* merge_cmd = app.add_subcommand("merge", "Merge LoRA factors into a base checkpoint");
    merge_cmd->add_option("--base", merge_args.base, "base safetensors file")->required();
    merge_cmd->add_option("--lora", merge_args.lora, "safetensors file of <module>.lora_a / .lora_b factors")
        ->required();
    merge_cmd->add_option("--arch", merge_args.arch, "architecture JSON")->required();
    merge_cmd->add_option("--alpha", merge_args.alpha, "LoRA alpha")->required();
    merge_cmd->add_option("--rank", merge_args.rank, "LoRA rank")->required();
    merge_cmd->add_option("--out", merge_args.out, "output safetensors file")->required();
    merge_cmd->add_option("--dtype", merge_args.dtype, "output dtype for every tensor (F32, F16, BF16)")
        ->check(CLI::IsMember({"F32", "F16", "BF16"}));
    merge_cmd->add_flag("--force", merge_args.force, "overwrite an existing output file");

    std::string direction;
    std::vector<std::string> names;
    auto* map_cmd = app.add_subcommand("map-names", "Translate module names between checkpoint namespaces");
    map_cmd->add_option("--direction", direction, "hf-to-tunix or tunix-to-hf")
        ->required()
        ->check(CLI::IsMember({"hf-to-tunix", "tunix-to-hf"}));
    map_cmd->add_option("names", names, "names to map (default: one per line on stdin)");

    std::string mesh_text, repair_in, repair_out;
    auto* repair_cmd = app.add_subcommand("repair-specs", "Repair partition specs for a device mesh");
    repair_cmd->add_option("--mesh", mesh_text, "<fsdp>x<tp>, e.g. 1x4")->required();
    repair_cmd->add_option("--in", repair_in, "shard document JSON")->required();
    repair_cmd->add_option("--out", repair_out, "repaired shard document JSON")->required();

    std::string vm_arch;
    std::int64_t vm_tp = 1, vm_fsdp = 1;
    auto* vm_cmd = app.add_subcommand("validate-mesh", "Check tensor-parallel divisibility for an architecture");
    vm_cmd->add_option("--arch", vm_arch, "architecture JSON")->required();
    vm_cmd->add_option("--tp", vm_tp, "tensor-parallel degree")->required()->check(CLI::PositiveNumber);
    vm_cmd->add_option("--fsdp", vm_fsdp, "fsdp degree")->capture_default_str()->check(CLI::PositiveNumber);

    std::string prep_in, prep_out, tokenizer = "whitespace";
    std::int64_t max_seq_len = 0;
    auto* prep_cmd = app.add_subcommand("prep-data", "Strip reasoning, render, tokenize, mask and filter SFT data");
    prep_cmd->add_option("--in", prep_in, "input JSONL with a turns array per line")->required();
    prep_cmd->add_option("--out", prep_out, "output JSONL")->required();
    prep_cmd->add_option("--max-seq-len", max_seq_len, "drop samples longer than this")->required();
    prep_cmd->add_option("--tokenizer", tokenizer, "whitespace or byte")
        ->capture_default_str()
        ->check(CLI::IsMember({"whitespace", "byte"}));

    double lr_peak = 0.0;
    std::int64_t lr_warmup = 0, lr_total = 0, lr_step = 0;
    auto* lr_cmd = app.add_subcommand("lr", "Learning rate at a step of the warmup + cosine schedule");
    lr_cmd->add_option("--peak", lr_peak, "peak learning rate")->required();
    lr_cmd->add_option("--warmup", lr_warmup, "warmup steps")->required();
    lr_cmd->add_option("--total", lr_total, "total steps")->required();
    lr_cmd->add_option("--step", lr_step, "step")->required();

    std::string bench_in;
    double bench_rate = 0.0, bench_eps = 0.05;
    bool bench_json = false;
    auto* bench_cmd = app.add_subcommand("bench-report", "Summarize a QPS sweep and its serving cost");
    bench_cmd->add_option("--in", bench_in, "request records JSONL")->required();
    bench_cmd->add_option("--rate", bench_rate, "hourly rate in dollars")->required();
    bench_cmd->add_option("--epsilon", bench_eps, "saturation threshold (relative gain)")->capture_default_str();
    bench_cmd->add_flag("--json", bench_json, "emit a JSON summary instead of a table");

    CostArgs cost_args;
    double serve_throughput = 0.0;
    auto* cost_cmd = app.add_subcommand("cost", "Training cost, serving cost and TCO");
    cost_cmd->add_option("--train-hours", cost_args.train_hours, "training wall-clock hours")->required();
    cost_cmd->add_option("--train-rate", cost_args.train_rate, "training hourly rate")->required();
    cost_cmd->add_option("--throughput", cost_args.throughput, "training throughput, tok/s")->required();
    cost_cmd->add_option("--serve-rate", cost_args.serve_rate, "serving hourly rate")->required();
    cost_cmd->add_option("--serve-hours", cost_args.serve_hours, "serving horizons in hours")->required();
    auto* st_opt = cost_cmd->add_option("--serve-throughput", serve_throughput, "peak serving throughput, tok/s");

    if (args.empty()) {
        err << app.help();
        return kUsageError;
    }

    std::vector<const char*> argv;
    argv.push_back("lorabridge");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kOk;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return kOk;
    } catch (const CLI::CallForVersion&) {
        out << LORABRIDGE_VERSION << '\n';
        return kOk;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << '\n';
        err << "run with --help for usage\n";
        return kUsageError;
    }

    try {
        if (inspect->parsed()) {
            cmd_inspect(inspect_file, out);
        } else if (merge_cmd->parsed()) {
            cmd_merge(merge_args, out);
        } else if (map_cmd->parsed()) {
            cmd_map_names(direction, names, in, out);
        } else if (repair_cmd->parsed()) {
            cmd_repair_specs(mesh_text, repair_in, repair_out, out);
        } else if (vm_cmd->parsed()) {
            return cmd_validate_mesh(vm_arch, vm_fsdp, vm_tp, out, err);
        } else if (prep_cmd->parsed()) {
            cmd_prep_data(prep_in, prep_out, max_seq_len, tokenizer, out);
        } else if (lr_cmd->parsed()) {
            cmd_lr(lr_peak, lr_warmup, lr_total, lr_step, out);
        } else if (bench_cmd->parsed()) {
            cmd_bench_report(bench_in, bench_rate, bench_eps, bench_json, out);
        } else if (cost_cmd->parsed()) {
            if (st_opt->count() > 0) cost_args.serve_throughput = serve_throughput;
            cmd_cost(cost_args, out);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kDataError;
    }
    return kOk;
}

}  // namespace lorabridge::cli
