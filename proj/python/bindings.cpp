// SPDX-License-Identifier: Apache-2.0
// Python bindings for the checkpoint, sharding, data and cost operations.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "lorabridge/bench.h"
#include "lorabridge/cli.h"
#include "lorabridge/dtype.h"
#include "lorabridge/error.h"
#include "lorabridge/layout.h"
#include "lorabridge/merge.h"
#include "lorabridge/safetensors.h"
#include "lorabridge/sft.h"
#include "lorabridge/shard.h"

namespace py = pybind11;
namespace lb = lorabridge;

namespace {

py::dict inspect(const std::filesystem::path& path) {
    const auto st = lb::read_file(path);
    py::list tensors;
    for (const auto& t : lb::list_tensors(st)) {
        py::dict d;
        d["name"] = t.name;
        d["dtype"] = std::string(lb::dtype_name(t.dtype));
        d["shape"] = t.shape;
        d["byte_size"] = t.byte_size;
        tensors.append(d);
    }
    py::dict out;
    out["metadata"] = st.metadata();
    out["tensors"] = tensors;
    return out;
}

py::tuple read_tensor(const std::filesystem::path& path, const std::string& name) {
    const auto st = lb::read_file(path);
    const auto& e = st.entry(name);
    const auto payload = st.payload(name);
    return py::make_tuple(std::string(lb::dtype_name(e.dtype)), e.shape,
                          py::bytes(reinterpret_cast<const char*>(payload.data()), payload.size()));
}

// tensors: {name: (dtype, shape, raw little-endian bytes)}
void write_safetensors(const std::filesystem::path& path, const py::dict& tensors,
                       const std::map<std::string, std::string>& metadata) {
    lb::SafetensorsBuilder builder;
    builder.set_metadata(metadata);
    for (const auto& [key, value] : tensors) {
        const auto name = key.cast<std::string>();
        const auto spec = value.cast<py::tuple>();
        if (spec.size() != 3) throw lb::Error(name + ": expected (dtype, shape, bytes)");
        const auto dtype = lb::parse_storage_dtype(spec[0].cast<std::string>());
        const auto shape = spec[1].cast<lb::Shape>();
        const auto raw = spec[2].cast<std::string>();
        builder.add(name, dtype, shape,
                    std::span<const std::byte>(reinterpret_cast<const std::byte*>(raw.data()), raw.size()));
    }
    lb::write_file(std::move(builder).build(), path);
}

void merge_files(const std::filesystem::path& base, const std::filesystem::path& lora,
                 const std::filesystem::path& arch_path, double alpha, std::int64_t rank,
                 const std::filesystem::path& out, const std::optional<std::string>& dtype) {
    lb::MergeConfig cfg;
    cfg.alpha = alpha;
    cfg.rank = rank;
    if (dtype) cfg.output_dtype = lb::parse_storage_dtype(*dtype);
    cfg.validate();
    const auto arch = lb::load_arch(arch_path);
    const auto pairs = lb::load_lora_factors(lb::read_file(lora), arch);
    lb::write_file(lb::merge(lb::read_file(base), pairs, cfg, arch), out);
}

std::vector<std::string> map_name(const std::string& name, const std::string& direction) {
    if (direction == "hf-to-tunix") return lb::map_name(name, lb::Direction::HFToTunix);
    if (direction == "tunix-to-hf") return lb::map_name(name, lb::Direction::TunixToHF);
    throw lb::Error("direction must be 'hf-to-tunix' or 'tunix-to-hf'");
}

std::vector<std::string> validate_mesh(const std::string& arch_json, std::int64_t tp, std::int64_t fsdp) {
    const lb::Mesh mesh({{"fsdp", fsdp}, {"tp", tp}});
    std::vector<std::string> out;
    for (const auto& v : lb::validate_mesh(mesh, lb::parse_arch(arch_json))) out.push_back(v.describe());
    return out;
}

py::dict cost_dict(const lb::bench::CostReport& r) {
    py::dict d;
    d["hourly_rate"] = r.hourly_rate;
    d["total_cost"] = r.total_cost;
    d["tokens_per_hour"] = r.tokens_per_hour;
    d["dollars_per_1M_tokens"] = r.dollars_per_1m_tokens;
    return d;
}

py::tuple run_cli(const std::vector<std::string>& args, const std::string& stdin_text) {
    std::istringstream in(stdin_text);
    std::ostringstream out, err;
    const int code = lb::cli::run(args, in, out, err);
    return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "LoRA checkpoint merge, sharding and cost toolkit";
    m.attr("__version__") = LORABRIDGE_VERSION;
    py::register_exception<lb::Error>(m, "Error", PyExc_ValueError);

    m.def("inspect", &inspect, py::arg("path"), "Metadata and tensor listing of a safetensors file.");
    m.def("read_tensor", &read_tensor, py::arg("path"), py::arg("name"),
          "(dtype, shape, raw bytes) of one tensor.");
    m.def("write_safetensors", &write_safetensors, py::arg("path"), py::arg("tensors"),
          py::arg("metadata") = std::map<std::string, std::string>{},
          "Write {name: (dtype, shape, bytes)} in canonical layout.");
    m.def("merge_files", &merge_files, py::arg("base"), py::arg("lora"), py::arg("arch"), py::arg("alpha"),
          py::arg("rank"), py::arg("out"), py::arg("dtype") = py::none());
    m.def("map_name", &map_name, py::arg("name"), py::arg("direction"));
    m.def("lora_target", [](const std::string& name, bool hf) {
        return lb::lora_target_filter(name, hf ? lb::NameSide::HF : lb::NameSide::Tunix);
    }, py::arg("name"), py::arg("hf") = false);
    m.def("validate_mesh", &validate_mesh, py::arg("arch_json"), py::arg("tp"), py::arg("fsdp") = 1,
          "Violation descriptions; empty when the mesh is valid.");

    m.def("f32_to_bf16", &lb::f32_to_bf16, py::arg("value"));
    m.def("bf16_to_f32", &lb::bf16_to_f32, py::arg("bits"));
    m.def("f32_to_f16", &lb::f32_to_f16, py::arg("value"));
    m.def("f16_to_f32", &lb::f16_to_f32, py::arg("bits"));

    m.def("strip_reasoning", &lb::sft::strip_reasoning, py::arg("text"));
    m.def("lr_at", [](std::int64_t step, double peak, std::int64_t warmup, std::int64_t total) {
        return lb::sft::lr_at(step, {peak, warmup, total});
    }, py::arg("step"), py::arg("peak"), py::arg("warmup"), py::arg("total"));

    m.def("bucket_pad", [](std::int64_t n, const std::optional<std::vector<std::int64_t>>& buckets) {
        const auto fit = buckets ? lb::bench::bucket_pad(n, *buckets) : lb::bench::bucket_pad(n);
        return py::make_tuple(fit.bucket, fit.padding);
    }, py::arg("n_tokens"), py::arg("buckets") = py::none());
    m.def("training_cost", [](double rate, double hours, double tok_s) {
        return cost_dict(lb::bench::training_cost({rate, hours, tok_s}));
    }, py::arg("hourly_rate"), py::arg("wall_hours"), py::arg("throughput_tok_s"));
    m.def("serving_cost", [](double rate, double tok_s) {
        return cost_dict(lb::bench::serving_cost(rate, tok_s));
    }, py::arg("hourly_rate"), py::arg("peak_tok_s"));
    m.def("tco", [](double rate, double hours, double tok_s, double serve_rate, double serve_hours) {
        return lb::bench::tco(lb::bench::training_cost({rate, hours, tok_s}), serve_rate, serve_hours);
    }, py::arg("train_rate"), py::arg("train_hours"), py::arg("train_tok_s"), py::arg("serve_rate"),
       py::arg("serve_hours"));

    m.def("run_cli", &run_cli, py::arg("args"), py::arg("stdin") = std::string(),
          "Run a CLI command in-process; returns (exit code, stdout, stderr).");
}
