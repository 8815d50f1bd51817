// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace lorabridge::sft {

enum class Role : std::uint8_t { System, User, Model };

std::string_view role_name(Role role);
// Accepts "system", "user", "model" and "assistant" (alias of model).
Role parse_role(std::string_view name);

struct Turn {
    Role role = Role::User;
    std::string text;

    bool operator==(const Turn&) const = default;
};

struct RawSample {
    std::vector<Turn> turns;
};

struct TurnSpan {
    std::int64_t start = 0;
    std::int64_t length = 0;
    Role role = Role::User;

    bool operator==(const TurnSpan&) const = default;
};

struct TokenizedSample {
    std::vector<Turn> rendered;  // turns as fed to the tokenizer
    std::vector<std::int32_t> token_ids;
    std::vector<std::uint8_t> loss_mask;
    std::vector<TurnSpan> offsets;
    // A model turn is blank, or tokenized to nothing.
    bool flagged_empty = false;

    std::int64_t model_token_count() const;
};

struct PipelineStats {
    std::int64_t total = 0;
    std::int64_t kept = 0;
    std::int64_t dropped_too_long = 0;
    std::int64_t dropped_empty = 0;

    bool balanced() const { return total == kept + dropped_too_long + dropped_empty; }
    PipelineStats& operator+=(const PipelineStats& other);
    bool operator==(const PipelineStats&) const = default;
};

// Turn delimiters of the chat template; they are wrapped around each user or
// model turn before tokenization.
struct ChatTemplate {
    std::string user_prefix = "<start_of_turn>user\n";
    std::string model_prefix = "<start_of_turn>model\n";
    std::string turn_suffix = "<end_of_turn>\n";
};

using Tokenizer = std::function<std::vector<std::int32_t>(std::string_view)>;

// Removes <think>...</think> spans (an unclosed <think> runs to the end), then
// keeps the first <answer> block's content if there is one, then unwraps a
// ```verilog fence if there is one. Idempotent.
std::string strip_reasoning(std::string_view text);

// Drops system turns and wraps the rest in the template's delimiters.
std::vector<Turn> render_turns(const RawSample& sample, const ChatTemplate& chat = {});

// Tokenizes each rendered turn separately and marks model-turn tokens.
TokenizedSample build_loss_mask(const RawSample& sample, const Tokenizer& tokenize, const ChatTemplate& chat = {});

struct FilterResult {
    std::vector<TokenizedSample> kept;
    PipelineStats stats;
};

// Drops samples longer than max_seq_len (a sample of exactly max_seq_len is
// kept) and samples with no model-turn loss tokens.
FilterResult filter_samples(std::vector<TokenizedSample> samples, std::int64_t max_seq_len);

struct ScheduleConfig {
    double peak_lr = 0.0;
    std::int64_t warmup_steps = 0;
    std::int64_t total_steps = 0;

    void validate() const;
};

// Linear warmup from 0 to peak, then cosine decay to 0 at total_steps.
double lr_at(std::int64_t step, const ScheduleConfig& cfg);

// Deterministic test tokenizers. Whitespace: one token per
// whitespace-separated word, id = FNV-1a hash of the word (31 bits).
// Byte: one token per byte, id = byte value.
std::vector<std::int32_t> whitespace_tokenize(std::string_view text);
std::vector<std::int32_t> byte_tokenize(std::string_view text);

}  // namespace lorabridge::sft
