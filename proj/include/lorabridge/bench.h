// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lorabridge::bench {

struct RequestRecord {
    double qps_target = 0.0;  // +inf for burst runs
    std::int64_t input_tokens = 0;
    std::int64_t output_tokens = 1;
    double ttft_ms = 0.0;
    double e2e_ms = 0.0;
    // Submission time relative to the start of the run; completion is
    // start_ms + e2e_ms.
    double start_ms = 0.0;
    std::optional<std::vector<double>> itl_ms;

    void validate() const;
};

struct RunSummary {
    double qps_target = 0.0;
    double median_ttft_ms = 0.0;
    std::optional<double> p99_itl_ms;      // unset when no record carries ITL gaps
    std::optional<double> median_tpot_ms;  // unset when every request emitted one token
    double output_throughput_tok_s = 0.0;
    std::int64_t request_count = 0;
};

// Nearest-rank percentile: the ceil(pct/100 * n)-th smallest value.
double nearest_rank(std::vector<double> values, int pct);

// Summary of one run (all records share a qps_target). Throughput is total
// output tokens over the makespan (last completion minus first start).
RunSummary summarize_run(std::span<const RequestRecord> records);

// One summary per distinct qps_target, ascending.
std::vector<RunSummary> summarize_sweep(std::span<const RequestRecord> records);

struct Peak {
    double qps_target = 0.0;
    double tok_s = 0.0;
};

// Highest throughput; ties go to the lower qps_target.
Peak peak_throughput(std::span<const RunSummary> summaries);

// Smallest qps_target whose throughput gain over the previous level is below
// epsilon * previous, or the largest qps_target if throughput never flattens.
double saturation_qps(std::span<const RunSummary> summaries, double epsilon = 0.05);

struct BucketFit {
    std::int64_t bucket = 0;
    std::int64_t padding = 0;
};

const std::vector<std::int64_t>& default_buckets();

// Smallest bucket >= n_tokens.
BucketFit bucket_pad(std::int64_t n_tokens, std::span<const std::int64_t> buckets = default_buckets());

struct CostInputs {
    double hourly_rate = 0.0;      // $/hr
    double wall_hours = 0.0;       // hr
    double throughput_tok_s = 0.0; // tokens/s
};

struct CostReport {
    double hourly_rate = 0.0;
    double total_cost = 0.0;
    double tokens_per_hour = 0.0;
    double dollars_per_1m_tokens = 0.0;

    // dollars_per_1M == hourly_rate / tokens_per_hour * 1e6
    bool consistent(double rel_tol = 1e-9) const;
};

CostReport training_cost(const CostInputs& inputs);

// Cost of serving at a sustained rate; total_cost covers one hour.
CostReport serving_cost(double hourly_rate, double peak_tok_s);

double tco(const CostReport& train, double serve_rate, double serve_hours);

// Line-delimited JSON records; blank lines are skipped. qps_target accepts a
// number or "inf".
std::vector<RequestRecord> read_records(std::istream& in);

}  // namespace lorabridge::bench
