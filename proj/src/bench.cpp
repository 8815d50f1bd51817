// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/bench.h"

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <map>

#include <fmt/format.h>
#include <json.hpp>

#include "lorabridge/error.h"

namespace lorabridge::bench {

void RequestRecord::validate() const {
    if (output_tokens < 1) throw Error(fmt::format("output_tokens must be >= 1, got {}", output_tokens));
    if (input_tokens < 0) throw Error(fmt::format("input_tokens must be >= 0, got {}", input_tokens));
    if (!(ttft_ms >= 0.0) || !(e2e_ms >= ttft_ms)) {
        throw Error(fmt::format("need 0 <= ttft_ms ({}) <= e2e_ms ({})", ttft_ms, e2e_ms));
    }
    if (std::isnan(qps_target) || qps_target <= 0.0) throw Error("qps_target must be positive");
    if (itl_ms) {
        for (double gap : *itl_ms) {
            if (!(gap >= 0.0)) throw Error("itl_ms entries must be non-negative");
        }
    }
}

double nearest_rank(std::vector<double> values, int pct) {
    if (values.empty()) throw Error("percentile of an empty set");
    if (pct <= 0 || pct > 100) throw Error(fmt::format("percentile {} outside (0, 100]", pct));
    std::sort(values.begin(), values.end());
    const auto n = values.size();
    const auto rank = (static_cast<std::size_t>(pct) * n + 99) / 100;
    return values[std::max<std::size_t>(rank, 1) - 1];
}

RunSummary summarize_run(std::span<const RequestRecord> records) {
    if (records.empty()) throw Error("cannot summarize an empty run");

    RunSummary s;
    s.qps_target = records.front().qps_target;
    s.request_count = static_cast<std::int64_t>(records.size());

    std::vector<double> ttft, tpot, itl;
    double first_start = std::numeric_limits<double>::infinity();
    double last_done = -std::numeric_limits<double>::infinity();
    std::int64_t tokens = 0;
    for (const auto& r : records) {
        r.validate();
        ttft.push_back(r.ttft_ms);
        if (r.output_tokens > 1) {
            tpot.push_back((r.e2e_ms - r.ttft_ms) / static_cast<double>(r.output_tokens - 1));
        }
        if (r.itl_ms) itl.insert(itl.end(), r.itl_ms->begin(), r.itl_ms->end());
        first_start = std::min(first_start, r.start_ms);
        last_done = std::max(last_done, r.start_ms + r.e2e_ms);
        tokens += r.output_tokens;
    }
    s.median_ttft_ms = nearest_rank(ttft, 50);
    if (!tpot.empty()) s.median_tpot_ms = nearest_rank(tpot, 50);
    if (!itl.empty()) s.p99_itl_ms = nearest_rank(itl, 99);
    const double makespan_s = (last_done - first_start) / 1000.0;
    if (!(makespan_s > 0.0)) throw Error("run makespan is zero");
    s.output_throughput_tok_s = static_cast<double>(tokens) / makespan_s;
    return s;
}

std::vector<RunSummary> summarize_sweep(std::span<const RequestRecord> records) {
    std::map<double, std::vector<RequestRecord>> runs;
    for (const auto& r : records) runs[r.qps_target].push_back(r);
    std::vector<RunSummary> out;
    for (const auto& [qps, run] : runs) out.push_back(summarize_run(run));
    return out;
}

Peak peak_throughput(std::span<const RunSummary> summaries) {
    if (summaries.empty()) throw Error("no runs to pick a peak from");
    const RunSummary* best = &summaries.front();
    for (const auto& s : summaries) {
        if (s.output_throughput_tok_s > best->output_throughput_tok_s ||
            (s.output_throughput_tok_s == best->output_throughput_tok_s && s.qps_target < best->qps_target)) {
            best = &s;
        }
    }
    return {best->qps_target, best->output_throughput_tok_s};
}

double saturation_qps(std::span<const RunSummary> summaries, double epsilon) {
    if (summaries.size() < 2) throw Error("saturation needs at least two QPS levels");
    std::vector<RunSummary> sorted(summaries.begin(), summaries.end());
    std::stable_sort(sorted.begin(), sorted.end(),
                     [](const RunSummary& a, const RunSummary& b) { return a.qps_target < b.qps_target; });
    for (std::size_t i = 1; i < sorted.size(); ++i) {
        const double prev = sorted[i - 1].output_throughput_tok_s;
        const double gain = sorted[i].output_throughput_tok_s - prev;
        if (gain < epsilon * prev) return sorted[i].qps_target;
    }
    return sorted.back().qps_target;
}

const std::vector<std::int64_t>& default_buckets() {
    static const std::vector<std::int64_t> buckets = {16, 32, 64, 128, 256, 512, 1024, 2048};
    return buckets;
}

BucketFit bucket_pad(std::int64_t n_tokens, std::span<const std::int64_t> buckets) {
    if (buckets.empty()) throw Error("bucket list is empty");
    if (!std::is_sorted(buckets.begin(), buckets.end(), std::less_equal<>())) {
        throw Error("bucket list must be strictly ascending");
    }
    if (n_tokens < 0) throw Error("token count must be non-negative");
    auto it = std::lower_bound(buckets.begin(), buckets.end(), n_tokens);
    if (it == buckets.end()) {
        throw Error(fmt::format("{} tokens exceeds max bucket {}", n_tokens, buckets.back()));
    }
    return {*it, *it - n_tokens};
}

bool CostReport::consistent(double rel_tol) const {
    const double expected = hourly_rate / tokens_per_hour * 1e6;
    return std::fabs(dollars_per_1m_tokens - expected) <= rel_tol * std::fabs(expected);
}

namespace {

void require_positive(double v, const char* what) {
    if (!(v > 0.0) || !std::isfinite(v)) throw Error(fmt::format("{} must be positive, got {}", what, v));
}

CostReport checked(CostReport r) {
    if (!r.consistent()) throw Error("cost report is internally inconsistent");
    return r;
}

}  // namespace

CostReport training_cost(const CostInputs& in) {
    require_positive(in.hourly_rate, "hourly rate");
    require_positive(in.wall_hours, "wall-clock hours");
    require_positive(in.throughput_tok_s, "throughput");
    CostReport r;
    r.hourly_rate = in.hourly_rate;
    r.total_cost = in.wall_hours * in.hourly_rate;
    r.tokens_per_hour = in.throughput_tok_s * 3600.0;
    const double tokens = in.throughput_tok_s * in.wall_hours * 3600.0;
    r.dollars_per_1m_tokens = r.total_cost / tokens * 1e6;
    return checked(r);
}

CostReport serving_cost(double hourly_rate, double peak_tok_s) {
    require_positive(hourly_rate, "hourly rate");
    require_positive(peak_tok_s, "throughput");
    CostReport r;
    r.hourly_rate = hourly_rate;
    r.total_cost = hourly_rate;
    r.tokens_per_hour = peak_tok_s * 3600.0;
    r.dollars_per_1m_tokens = hourly_rate / r.tokens_per_hour * 1e6;
    return checked(r);
}

double tco(const CostReport& train, double serve_rate, double serve_hours) {
    if (serve_hours < 0.0) throw Error("serve hours must be non-negative");
    if (serve_rate < 0.0) throw Error("serve rate must be non-negative");
    return train.total_cost + serve_rate * serve_hours;
}

namespace {

double parse_qps(const nlohmann::json& j) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf" || s == "Infinity" || s == "infinity") return std::numeric_limits<double>::infinity();
    }
    throw Error("qps_target must be a number or \"inf\"");
}

}  // namespace

std::vector<RequestRecord> read_records(std::istream& in) {
    std::vector<RequestRecord> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            RequestRecord r;
            r.qps_target = parse_qps(j.at("qps_target"));
            r.input_tokens = j.at("input_tokens").get<std::int64_t>();
            r.output_tokens = j.at("output_tokens").get<std::int64_t>();
            r.ttft_ms = j.at("ttft_ms").get<double>();
            r.e2e_ms = j.at("e2e_ms").get<double>();
            if (j.contains("start_ms")) r.start_ms = j.at("start_ms").get<double>();
            if (j.contains("itl_ms") && !j.at("itl_ms").is_null()) r.itl_ms = j.at("itl_ms").get<std::vector<double>>();
            r.validate();
            out.push_back(std::move(r));
        } catch (const nlohmann::json::exception& e) {
            throw Error(fmt::format("record line {}: {}", line_no, e.what()));
        } catch (const Error& e) {
            throw Error(fmt::format("record line {}: {}", line_no, e.what()));
        }
    }
    return out;
}

}  // namespace lorabridge::bench
