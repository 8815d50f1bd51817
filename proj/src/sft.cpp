// SPDX-License-Identifier: Apache-2.0

#include "lorabridge/sft.h"

#include <cmath>
#include <numbers>
#include <optional>

#include <fmt/format.h>

#include "lorabridge/error.h"

namespace lorabridge::sft {

std::string_view role_name(Role role) {
    switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Model: return "model";
    }
    return "?";
}

Role parse_role(std::string_view name) {
    if (name == "system") return Role::System;
    if (name == "user") return Role::User;
    if (name == "model" || name == "assistant") return Role::Model;
    throw Error(fmt::format("unknown role '{}'", name));
}

std::int64_t TokenizedSample::model_token_count() const {
    std::int64_t n = 0;
    for (auto m : loss_mask) n += m;
    return n;
}

PipelineStats& PipelineStats::operator+=(const PipelineStats& other) {
    total += other.total;
    kept += other.kept;
    dropped_too_long += other.dropped_too_long;
    dropped_empty += other.dropped_empty;
    return *this;
}

namespace {

constexpr std::string_view kThinkOpen = "<think>";
constexpr std::string_view kThinkClose = "</think>";
constexpr std::string_view kAnswerOpen = "<answer>";
constexpr std::string_view kAnswerClose = "</answer>";
constexpr std::string_view kFenceOpen = "```verilog";
constexpr std::string_view kFence = "```";

std::string remove_think_spans(std::string text) {
    // Removal can splice a new "<think>" together, so repeat to a fixed point.
    for (auto open = text.find(kThinkOpen); open != std::string::npos; open = text.find(kThinkOpen)) {
        const auto close = text.find(kThinkClose, open + kThinkOpen.size());
        if (close == std::string::npos) {
            text.erase(open);
        } else {
            text.erase(open, close + kThinkClose.size() - open);
        }
    }
    return text;
}

// Content of the first answer block: ends at the first "</answer>" and starts
// after the nearest preceding "<answer>". Unclosed blocks run to the end.
std::optional<std::string> answer_content(const std::string& text) {
    if (text.find(kAnswerOpen) == std::string::npos) return std::nullopt;
    auto first_open = text.find(kAnswerOpen);
    auto close = text.find(kAnswerClose, first_open);
    const auto limit = close == std::string::npos ? text.size() : close;
    const auto open = text.rfind(kAnswerOpen, limit - kAnswerOpen.size());
    const auto start = open + kAnswerOpen.size();
    return text.substr(start, limit - start);
}

std::optional<std::string> fence_content(const std::string& text) {
    const auto open = text.find(kFenceOpen);
    if (open == std::string::npos) return std::nullopt;
    auto start = text.find('\n', open + kFenceOpen.size());
    start = start == std::string::npos ? text.size() : start + 1;
    auto end = text.find(kFence, start);
    if (end == std::string::npos) end = text.size();
    std::string code = text.substr(start, end - start);
    if (code.ends_with('\n')) code.pop_back();
    return code;
}

}  // namespace

std::string strip_reasoning(std::string_view text) {
    std::string out = remove_think_spans(std::string(text));
    if (auto answer = answer_content(out)) out = std::move(*answer);
    if (auto code = fence_content(out)) out = std::move(*code);
    return out;
}

std::vector<Turn> render_turns(const RawSample& sample, const ChatTemplate& chat) {
    std::vector<Turn> out;
    for (const auto& turn : sample.turns) {
        switch (turn.role) {
        case Role::System: break;
        case Role::User: out.push_back({Role::User, chat.user_prefix + turn.text + chat.turn_suffix}); break;
        case Role::Model: out.push_back({Role::Model, chat.model_prefix + turn.text + chat.turn_suffix}); break;
        }
    }
    return out;
}

TokenizedSample build_loss_mask(const RawSample& sample, const Tokenizer& tokenize, const ChatTemplate& chat) {
    TokenizedSample out;
    out.rendered = render_turns(sample, chat);

    // Raw turns in render order, to detect model turns whose text is lost.
    std::vector<const Turn*> sources;
    for (const auto& t : sample.turns) {
        if (t.role != Role::System) sources.push_back(&t);
    }

    for (std::size_t i = 0; i < out.rendered.size(); ++i) {
        const auto& turn = out.rendered[i];
        const auto ids = tokenize(turn.text);
        const auto start = static_cast<std::int64_t>(out.token_ids.size());
        out.token_ids.insert(out.token_ids.end(), ids.begin(), ids.end());
        out.loss_mask.insert(out.loss_mask.end(), ids.size(), turn.role == Role::Model ? 1 : 0);
        out.offsets.push_back({start, static_cast<std::int64_t>(ids.size()), turn.role});
        if (turn.role == Role::Model) {
            const bool blank = sources[i]->text.find_first_not_of(" \t\r\n") == std::string::npos;
            if (blank || ids.empty()) out.flagged_empty = true;
        }
    }
    return out;
}

FilterResult filter_samples(std::vector<TokenizedSample> samples, std::int64_t max_seq_len) {
    if (max_seq_len <= 0) throw Error(fmt::format("max_seq_len must be positive, got {}", max_seq_len));
    FilterResult result;
    result.stats.total = static_cast<std::int64_t>(samples.size());
    for (auto& s : samples) {
        if (static_cast<std::int64_t>(s.token_ids.size()) > max_seq_len) {
            ++result.stats.dropped_too_long;
        } else if (s.flagged_empty || s.model_token_count() == 0) {
            ++result.stats.dropped_empty;
        } else {
            ++result.stats.kept;
            result.kept.push_back(std::move(s));
        }
    }
    return result;
}

void ScheduleConfig::validate() const {
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) throw Error(fmt::format("peak lr must be positive, got {}", peak_lr));
    if (warmup_steps <= 0 || warmup_steps >= total_steps) {
        throw Error(fmt::format("need 0 < warmup ({}) < total ({})", warmup_steps, total_steps));
    }
}

double lr_at(std::int64_t step, const ScheduleConfig& cfg) {
    cfg.validate();
    if (step < 0 || step > cfg.total_steps) {
        throw Error(fmt::format("step {} outside [0, {}]", step, cfg.total_steps));
    }
    if (step < cfg.warmup_steps) {
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    }
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(cfg.total_steps - cfg.warmup_steps);
    return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::vector<std::int32_t> whitespace_tokenize(std::string_view text) {
    std::vector<std::int32_t> out;
    std::size_t i = 0;
    auto is_space = [](char c) { return c == ' ' || c == '\n' || c == '\t' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < text.size()) {
        while (i < text.size() && is_space(text[i])) ++i;
        if (i >= text.size()) break;
        std::uint32_t hash = 2166136261u;
        while (i < text.size() && !is_space(text[i])) {
            hash ^= static_cast<unsigned char>(text[i++]);
            hash *= 16777619u;
        }
        out.push_back(static_cast<std::int32_t>(hash & 0x7fffffffu));
    }
    return out;
}

std::vector<std::int32_t> byte_tokenize(std::string_view text) {
    std::vector<std::int32_t> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(static_cast<unsigned char>(c));
    return out;
}

}  // namespace lorabridge::sft
