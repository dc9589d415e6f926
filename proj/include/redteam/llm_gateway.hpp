#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace redteam {

enum class Role : std::uint8_t { System, User, Assistant, ToolResult };

/// Reason, Act and Summarizer are the three execution sessions. Planner and
/// Corrector carry the decomposition and plan-correction traffic; they are
/// counted but excluded from component shares.
enum class SessionKind : std::uint8_t { Reason, Act, Summarizer, Planner, Corrector };
inline constexpr std::size_t kSessionKindCount = 5;

std::string_view to_string(Role role) noexcept;
std::string_view to_string(SessionKind kind) noexcept;
std::optional<SessionKind> parse_session_kind(std::string_view text) noexcept;

struct ToolCall {
    std::string tool_name;
    std::string arguments;  // JSON text, e.g. {"command":"nmap -sV 10.0.0.5"}

    /// The "command" argument of a terminal tool call, or the raw arguments
    /// when they are not a JSON object.
    [[nodiscard]] std::string command() const;
    static ToolCall terminal(std::string_view command);

    bool operator==(const ToolCall&) const = default;
};

struct ChatMessage {
    Role role = Role::User;
    std::string content;
    std::optional<ToolCall> tool_call;  // assistant messages of the Act session only

    bool operator==(const ChatMessage&) const = default;
};

/// chars/4, rounded up.
std::size_t estimate_tokens(std::string_view text) noexcept;

class ChatTranscript {
public:
    explicit ChatTranscript(SessionKind kind) : kind_(kind) {}

    [[nodiscard]] SessionKind kind() const noexcept { return kind_; }
    [[nodiscard]] const std::vector<ChatMessage>& messages() const noexcept { return messages_; }
    [[nodiscard]] bool empty() const noexcept { return messages_.empty(); }
    [[nodiscard]] std::size_t token_estimate() const noexcept { return token_estimate_; }

    void append(ChatMessage message);
    void append(Role role, std::string content) { append(ChatMessage{role, std::move(content), std::nullopt}); }

    /// Appends, cutting the content so the estimate stays within `budget`.
    /// Returns false when nothing of the content fits.
    bool append_within(ChatMessage message, std::size_t budget);

    /// Shrinks the most recent message's content until the estimate is within budget.
    void clamp_last(std::size_t budget);

    /// Drops the oldest messages after the first `keep_prefix` until `headroom`
    /// more tokens fit within `budget`. The newest message is spared when
    /// `keep_last`. Returns the number of messages dropped.
    std::size_t evict_oldest(std::size_t budget, std::size_t headroom, std::size_t keep_prefix, bool keep_last);

    static std::size_t message_tokens(const ChatMessage& m) noexcept;

    /// Stateless sessions drop their history between requests.
    void reset();

    bool operator==(const ChatTranscript& other) const noexcept {
        return kind_ == other.kind_ && messages_ == other.messages_;
    }

private:
    SessionKind kind_;
    std::vector<ChatMessage> messages_;
    std::size_t token_estimate_ = 0;
};

struct Usage {
    std::uint64_t prompt_tokens = 0;
    std::uint64_t completion_tokens = 0;
    bool operator==(const Usage&) const = default;
};

struct Completion {
    std::string text;
    std::optional<ToolCall> tool_call;
    Usage usage;
    bool operator==(const Completion&) const = default;
};

enum class ProviderKind : std::uint8_t { Scripted, Live };

class LlmProvider {
public:
    virtual ~LlmProvider() = default;
    /// `turn` is the per-kind call ordinal within the owning gateway.
    virtual Completion generate(const ChatTranscript& transcript, std::size_t turn) = 0;
    [[nodiscard]] virtual ProviderKind kind() const noexcept = 0;
};

struct CallCounts {
    std::uint64_t reason = 0;
    std::uint64_t act = 0;
    std::uint64_t summarizer = 0;
    std::uint64_t planner = 0;
    std::uint64_t corrector = 0;

    [[nodiscard]] std::uint64_t of(SessionKind kind) const noexcept;
    bool operator==(const CallCounts&) const = default;
};

void to_json(nlohmann::json& j, const CallCounts& c);
void from_json(const nlohmann::json& j, CallCounts& c);

class CallCounters {
public:
    void increment(SessionKind kind) noexcept { slot(kind).fetch_add(1, std::memory_order_relaxed); }
    [[nodiscard]] std::uint64_t get(SessionKind kind) const noexcept {
        return counts_[static_cast<std::size_t>(kind)].load(std::memory_order_relaxed);
    }
    [[nodiscard]] CallCounts snapshot() const noexcept;

private:
    std::atomic<std::uint64_t>& slot(SessionKind kind) noexcept { return counts_[static_cast<std::size_t>(kind)]; }
    std::array<std::atomic<std::uint64_t>, kSessionKindCount> counts_{};
};

/// Binds one provider to one run: assigns per-kind turn ordinals, appends
/// completions to their transcripts and counts API calls.
class LlmGateway {
public:
    explicit LlmGateway(std::shared_ptr<LlmProvider> provider) : provider_(std::move(provider)) {}

    /// Appends the completion to `transcript` as an Assistant message.
    Completion complete(ChatTranscript& transcript);

    [[nodiscard]] const CallCounters& counters() const noexcept { return counters_; }
    [[nodiscard]] ProviderKind kind() const noexcept { return provider_->kind(); }
    [[nodiscard]] const std::shared_ptr<LlmProvider>& provider() const noexcept { return provider_; }

private:
    std::shared_ptr<LlmProvider> provider_;
    CallCounters counters_;
    std::array<std::atomic<std::size_t>, kSessionKindCount> next_turn_{};
};

struct ScriptEntry {
    SessionKind kind = SessionKind::Act;
    std::optional<std::size_t> turn;  // nullopt: fallback for every unmatched turn of this kind
    Completion completion;
};

/// Deterministic provider answering by (session kind, turn ordinal).
class ScriptedProvider final : public LlmProvider {
public:
    explicit ScriptedProvider(std::vector<ScriptEntry> entries);

    static std::shared_ptr<ScriptedProvider> from_json(const nlohmann::json& doc);
    static std::shared_ptr<ScriptedProvider> load_script(std::string_view document);
    static std::shared_ptr<ScriptedProvider> load_file(const std::string& path);

    Completion generate(const ChatTranscript& transcript, std::size_t turn) override;
    [[nodiscard]] ProviderKind kind() const noexcept override { return ProviderKind::Scripted; }

    [[nodiscard]] const std::vector<ScriptEntry>& entries() const noexcept { return entries_; }
    [[nodiscard]] nlohmann::json to_json() const;

private:
    std::vector<ScriptEntry> entries_;
    std::map<std::pair<SessionKind, std::size_t>, std::size_t> exact_;
    std::map<SessionKind, std::size_t> fallback_;
};

/// Captures every completion of a wrapped provider so a run can be replayed
/// offline through a ScriptedProvider.
class RecordingProvider final : public LlmProvider {
public:
    explicit RecordingProvider(std::shared_ptr<LlmProvider> inner) : inner_(std::move(inner)) {}

    Completion generate(const ChatTranscript& transcript, std::size_t turn) override;
    [[nodiscard]] ProviderKind kind() const noexcept override { return inner_->kind(); }

    /// Script document reproducing the recorded run.
    [[nodiscard]] nlohmann::json script() const;
    [[nodiscard]] std::size_t recorded() const;

private:
    std::shared_ptr<LlmProvider> inner_;
    mutable std::mutex mutex_;
    std::vector<ScriptEntry> recorded_;
};

struct LiveProviderConfig {
    std::string endpoint;  // base URL of an OpenAI-compatible API, e.g. https://api.openai.com/v1
    std::string api_key;
    std::string model;
    int max_attempts = 3;
    std::chrono::milliseconds initial_backoff{250};
    std::chrono::seconds timeout{120};

    /// REDTEAM_LLM_ENDPOINT, REDTEAM_LLM_API_KEY, REDTEAM_LLM_MODEL.
    static LiveProviderConfig from_environment();
};

/// Thin chat-completions adapter with retry-with-backoff on transport errors.
class LiveProvider final : public LlmProvider {
public:
    explicit LiveProvider(LiveProviderConfig config);

    Completion generate(const ChatTranscript& transcript, std::size_t turn) override;
    [[nodiscard]] ProviderKind kind() const noexcept override { return ProviderKind::Live; }

    /// Request body for a transcript; exposed for tests. Never contains the key.
    [[nodiscard]] nlohmann::json request_body(const ChatTranscript& transcript) const;
    static Completion parse_response(const nlohmann::json& body);

private:
    LiveProviderConfig config_;
};

struct ComponentShares {
    double reason_pct = 0;
    double act_pct = 0;
    double summarizer_pct = 0;
    // One decimal, round-half-up, computed in exact integer arithmetic.
    std::int64_t reason_tenths = 0;
    std::int64_t act_tenths = 0;
    std::int64_t summarizer_tenths = 0;
};

/// Share of Reason/Act/Summarizer calls in their sum; throws ZeroTotal.
ComponentShares component_shares(const CallCounts& counts);

/// floor(numerator / denominator * 1000 + 1/2), i.e. a percentage in tenths
/// rounded half-up, for any sign of numerator (denominator > 0).
std::int64_t percent_tenths_half_up(std::int64_t numerator, std::int64_t denominator);

/// "30.9" style rendering of a tenths value.
std::string format_tenths(std::int64_t tenths);

}  // namespace redteam
