#include "redteam/llm_gateway.hpp"

#include <fstream>
#include <sstream>

#include "redteam/error.hpp"

namespace redteam {

namespace {

constexpr std::array<std::string_view, kSessionKindCount> kKindNames{"reason", "act", "summarizer", "planner",
                                                                     "corrector"};

[[noreturn]] void schema_violation(const std::string& pointer, const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, "at " + pointer + ": " + what);
}

Completion parse_completion(const nlohmann::json& e, const std::string& pointer) {
    Completion c;
    if (!e.contains("text") || !e["text"].is_string()) schema_violation(pointer + "/text", "string required");
    c.text = e["text"].get<std::string>();
    if (e.contains("tool_call") && !e["tool_call"].is_null()) {
        const auto& tc = e["tool_call"];
        if (!tc.is_object()) schema_violation(pointer + "/tool_call", "object required");
        ToolCall call;
        call.tool_name = tc.value("tool_name", std::string("terminal"));
        if (!tc.contains("arguments")) schema_violation(pointer + "/tool_call/arguments", "missing");
        const auto& args = tc["arguments"];
        if (args.is_string()) {
            call.arguments = args.get<std::string>();
        } else if (args.is_object()) {
            call.arguments = args.dump();
        } else {
            schema_violation(pointer + "/tool_call/arguments", "string or object required");
        }
        c.tool_call = std::move(call);
    }
    if (e.contains("usage")) {
        c.usage.prompt_tokens = e["usage"].value("prompt_tokens", std::uint64_t{0});
        c.usage.completion_tokens = e["usage"].value("completion_tokens", std::uint64_t{0});
    }
    return c;
}

nlohmann::json entry_json(const ScriptEntry& e) {
    nlohmann::json j{{"kind", to_string(e.kind)}, {"text", e.completion.text}};
    if (e.turn) j["turn"] = *e.turn;
    if (e.completion.tool_call) {
        nlohmann::json args = nlohmann::json::parse(e.completion.tool_call->arguments, nullptr, false);
        j["tool_call"] = {{"tool_name", e.completion.tool_call->tool_name},
                          {"arguments", args.is_discarded() ? nlohmann::json(e.completion.tool_call->arguments)
                                                            : args}};
    }
    return j;
}

std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

}  // namespace

std::string_view to_string(Role role) noexcept {
    switch (role) {
        case Role::System: return "system";
        case Role::User: return "user";
        case Role::Assistant: return "assistant";
        case Role::ToolResult: return "tool";
    }
    return "?";
}

std::string_view to_string(SessionKind kind) noexcept { return kKindNames[static_cast<std::size_t>(kind)]; }

std::optional<SessionKind> parse_session_kind(std::string_view text) noexcept {
    for (std::size_t i = 0; i < kKindNames.size(); ++i) {
        if (kKindNames[i] == text) return static_cast<SessionKind>(i);
    }
    return std::nullopt;
}

std::string ToolCall::command() const {
    auto j = nlohmann::json::parse(arguments, nullptr, false);
    if (j.is_object() && j.contains("command") && j["command"].is_string()) return j["command"].get<std::string>();
    return arguments;
}

ToolCall ToolCall::terminal(std::string_view command) {
    return ToolCall{"terminal", nlohmann::json{{"command", command}}.dump()};
}

std::size_t estimate_tokens(std::string_view text) noexcept { return (text.size() + 3) / 4; }

std::size_t ChatTranscript::message_tokens(const ChatMessage& m) noexcept {
    std::size_t chars = m.content.size();
    if (m.tool_call) chars += m.tool_call->tool_name.size() + m.tool_call->arguments.size();
    return (chars + 3) / 4;
}

void ChatTranscript::append(ChatMessage message) {
    token_estimate_ += message_tokens(message);
    messages_.push_back(std::move(message));
}

bool ChatTranscript::append_within(ChatMessage message, std::size_t budget) {
    if (token_estimate_ + message_tokens(message) <= budget) {
        append(std::move(message));
        return true;
    }
    if (token_estimate_ >= budget) return false;
    static constexpr std::string_view kMarker = "\n[truncated to fit context budget]";
    std::size_t room_chars = (budget - token_estimate_) * 4;
    std::size_t overhead = kMarker.size();
    if (message.tool_call) overhead += message.tool_call->tool_name.size() + message.tool_call->arguments.size();
    if (room_chars <= overhead) return false;
    message.content.resize(std::min(message.content.size(), room_chars - overhead));
    message.content += kMarker;
    append(std::move(message));
    return true;
}

void ChatTranscript::clamp_last(std::size_t budget) {
    if (messages_.empty() || token_estimate_ <= budget) return;
    ChatMessage& last = messages_.back();
    token_estimate_ -= message_tokens(last);
    std::size_t room_chars = budget > token_estimate_ ? (budget - token_estimate_) * 4 : 0;
    std::size_t overhead = last.tool_call ? last.tool_call->tool_name.size() + last.tool_call->arguments.size() : 0;
    last.content.resize(room_chars > overhead ? std::min(last.content.size(), room_chars - overhead) : 0);
    token_estimate_ += message_tokens(last);
}

std::size_t ChatTranscript::evict_oldest(std::size_t budget, std::size_t headroom, std::size_t keep_prefix,
                                         bool keep_last) {
    std::size_t first = keep_prefix, last = messages_.size() - (keep_last && !messages_.empty() ? 1 : 0);
    std::size_t dropped_to = first;
    while (dropped_to < last && token_estimate_ + headroom > budget) {
        token_estimate_ -= message_tokens(messages_[dropped_to]);
        ++dropped_to;
    }
    if (dropped_to == first) return 0;
    messages_.erase(messages_.begin() + static_cast<std::ptrdiff_t>(first),
                    messages_.begin() + static_cast<std::ptrdiff_t>(dropped_to));
    return dropped_to - first;
}

void ChatTranscript::reset() {
    messages_.clear();
    token_estimate_ = 0;
}

std::uint64_t CallCounts::of(SessionKind kind) const noexcept {
    switch (kind) {
        case SessionKind::Reason: return reason;
        case SessionKind::Act: return act;
        case SessionKind::Summarizer: return summarizer;
        case SessionKind::Planner: return planner;
        case SessionKind::Corrector: return corrector;
    }
    return 0;
}

void to_json(nlohmann::json& j, const CallCounts& c) {
    j = nlohmann::json{{"reason", c.reason},
                       {"act", c.act},
                       {"summarizer", c.summarizer},
                       {"planner", c.planner},
                       {"corrector", c.corrector}};
}

void from_json(const nlohmann::json& j, CallCounts& c) {
    c.reason = j.at("reason").get<std::uint64_t>();
    c.act = j.at("act").get<std::uint64_t>();
    c.summarizer = j.at("summarizer").get<std::uint64_t>();
    c.planner = j.value("planner", std::uint64_t{0});
    c.corrector = j.value("corrector", std::uint64_t{0});
}

CallCounts CallCounters::snapshot() const noexcept {
    return CallCounts{get(SessionKind::Reason), get(SessionKind::Act), get(SessionKind::Summarizer),
                      get(SessionKind::Planner), get(SessionKind::Corrector)};
}

Completion LlmGateway::complete(ChatTranscript& transcript) {
    if (transcript.empty()) throw Error(ErrorCode::EmptyTranscript, std::string(to_string(transcript.kind())));
    const auto index = static_cast<std::size_t>(transcript.kind());
    const std::size_t turn = next_turn_[index].fetch_add(1, std::memory_order_relaxed);
    Completion completion = provider_->generate(transcript, turn);
    if (completion.tool_call && transcript.kind() != SessionKind::Act) {
        throw Error(ErrorCode::ProtocolViolation,
                    "tool call returned by " + std::string(to_string(transcript.kind())) + " session");
    }
    counters_.increment(transcript.kind());
    transcript.append(ChatMessage{Role::Assistant, completion.text, completion.tool_call});
    return completion;
}

ScriptedProvider::ScriptedProvider(std::vector<ScriptEntry> entries) : entries_(std::move(entries)) {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        const auto& e = entries_[i];
        if (e.turn) {
            if (!exact_.emplace(std::pair{e.kind, *e.turn}, i).second) {
                throw Error(ErrorCode::DuplicateKey, "(" + std::string(to_string(e.kind)) + ", " +
                                                         std::to_string(*e.turn) + ") at /entries/" +
                                                         std::to_string(i));
            }
        } else if (!fallback_.emplace(e.kind, i).second) {
            throw Error(ErrorCode::DuplicateKey,
                        "second fallback entry for " + std::string(to_string(e.kind)) + " at /entries/" +
                            std::to_string(i));
        }
    }
}

std::shared_ptr<ScriptedProvider> ScriptedProvider::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) schema_violation("/", "object required");
    if (!doc.contains("entries") || !doc["entries"].is_array()) schema_violation("/entries", "array required");
    std::vector<ScriptEntry> entries;
    const auto& list = doc["entries"];
    for (std::size_t i = 0; i < list.size(); ++i) {
        const std::string pointer = "/entries/" + std::to_string(i);
        const auto& e = list[i];
        if (!e.is_object()) schema_violation(pointer, "object required");
        if (!e.contains("kind") || !e["kind"].is_string()) schema_violation(pointer + "/kind", "string required");
        auto kind = parse_session_kind(e["kind"].get<std::string>());
        if (!kind) schema_violation(pointer + "/kind", "unknown session kind");
        ScriptEntry entry;
        entry.kind = *kind;
        if (e.contains("turn") && !e["turn"].is_null()) {
            if (!e["turn"].is_number_integer() || e["turn"].get<std::int64_t>() < 0)
                schema_violation(pointer + "/turn", "non-negative integer required");
            entry.turn = e["turn"].get<std::size_t>();
        }
        entry.completion = parse_completion(e, pointer);
        entries.push_back(std::move(entry));
    }
    return std::make_shared<ScriptedProvider>(std::move(entries));
}

std::shared_ptr<ScriptedProvider> ScriptedProvider::load_script(std::string_view document) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(document);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::SchemaViolation, e.what()).at(e.byte);
    }
    return from_json(doc);
}

std::shared_ptr<ScriptedProvider> ScriptedProvider::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open script " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return load_script(buf.str());
}

Completion ScriptedProvider::generate(const ChatTranscript& transcript, std::size_t turn) {
    if (auto it = exact_.find({transcript.kind(), turn}); it != exact_.end()) {
        return entries_[it->second].completion;
    }
    if (auto it = fallback_.find(transcript.kind()); it != fallback_.end()) {
        return entries_[it->second].completion;
    }
    throw Error(ErrorCode::ScriptExhausted,
                "no entry for (" + std::string(to_string(transcript.kind())) + ", " + std::to_string(turn) + ")");
}

nlohmann::json ScriptedProvider::to_json() const {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : entries_) list.push_back(entry_json(e));
    return {{"entries", std::move(list)}};
}

Completion RecordingProvider::generate(const ChatTranscript& transcript, std::size_t turn) {
    Completion c = inner_->generate(transcript, turn);
    std::lock_guard lock(mutex_);
    recorded_.push_back(ScriptEntry{transcript.kind(), turn, c});
    return c;
}

nlohmann::json RecordingProvider::script() const {
    std::lock_guard lock(mutex_);
    nlohmann::json list = nlohmann::json::array();
    for (const auto& e : recorded_) list.push_back(entry_json(e));
    return {{"entries", std::move(list)}};
}

std::size_t RecordingProvider::recorded() const {
    std::lock_guard lock(mutex_);
    return recorded_.size();
}

std::int64_t percent_tenths_half_up(std::int64_t numerator, std::int64_t denominator) {
    if (denominator <= 0) throw Error(ErrorCode::ZeroTotal, "non-positive denominator");
    return floor_div(2000 * numerator + denominator, 2 * denominator);
}

std::string format_tenths(std::int64_t tenths) {
    const bool negative = tenths < 0;
    const std::int64_t magnitude = negative ? -tenths : tenths;
    return (negative ? "-" : "") + std::to_string(magnitude / 10) + "." + std::to_string(magnitude % 10);
}

ComponentShares component_shares(const CallCounts& counts) {
    const std::uint64_t total = counts.reason + counts.act + counts.summarizer;
    if (total == 0) throw Error(ErrorCode::ZeroTotal, "no Reason/Act/Summarizer calls");
    const auto t = static_cast<double>(total);
    ComponentShares s;
    s.reason_pct = static_cast<double>(counts.reason) / t * 100.0;
    s.act_pct = static_cast<double>(counts.act) / t * 100.0;
    s.summarizer_pct = static_cast<double>(counts.summarizer) / t * 100.0;
    const auto den = static_cast<std::int64_t>(total);
    s.reason_tenths = percent_tenths_half_up(static_cast<std::int64_t>(counts.reason), den);
    s.act_tenths = percent_tenths_half_up(static_cast<std::int64_t>(counts.act), den);
    s.summarizer_tenths = percent_tenths_half_up(static_cast<std::int64_t>(counts.summarizer), den);
    return s;
}

}  // namespace redteam
