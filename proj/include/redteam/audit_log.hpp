#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace redteam {

using WallClock = std::function<std::chrono::system_clock::time_point()>;

/// RFC 3339 UTC with milliseconds, e.g. 2026-01-02T03:04:05.678Z.
std::string format_timestamp(std::chrono::system_clock::time_point t);

namespace audit_kind {
inline constexpr std::string_view RunStarted = "RunStarted";
inline constexpr std::string_view RunFinished = "RunFinished";
inline constexpr std::string_view Planned = "Planned";
inline constexpr std::string_view ToolRequested = "ToolRequested";
inline constexpr std::string_view ApprovalDecided = "ApprovalDecided";
inline constexpr std::string_view Executed = "Executed";
inline constexpr std::string_view ExecutionFinished = "ExecutionFinished";
inline constexpr std::string_view Summarized = "Summarized";
inline constexpr std::string_view Corrected = "Corrected";
inline constexpr std::string_view MemoryStored = "MemoryStored";
inline constexpr std::string_view KillSwitch = "KillSwitch";
inline constexpr std::string_view Intervention = "Intervention";
inline constexpr std::string_view AuthSucceeded = "AuthSucceeded";
inline constexpr std::string_view AuthFailed = "AuthFailed";
inline constexpr std::string_view SessionRejected = "SessionRejected";
}  // namespace audit_kind

struct AuditEvent {
    std::uint64_t seq = 0;
    std::string timestamp;  // RFC 3339, UTC, millisecond precision
    std::string actor;
    std::string kind;
    nlohmann::json payload = nlohmann::json::object();
    std::string prev_hash;
    std::string hash;
};

/// 64 hex zeros: prev_hash of event 1.
inline constexpr std::string_view kAuditGenesis = "0000000000000000000000000000000000000000000000000000000000000000";

/// The canonical line without its hash field:
/// {"seq":N,"timestamp":"..","actor":"..","kind":"..","payload":{..},"prev_hash":".."}
/// payload is compact JSON with lexicographically sorted keys.
std::string audit_body(const AuditEvent& event);

/// hex(SHA-256(prev_hash || body)).
std::string audit_hash(std::string_view prev_hash, std::string_view body);

std::string sha256_hex(std::string_view data);
std::string hmac_sha256_hex(std::string_view key, std::string_view data);

struct AuditVerification {
    bool valid = true;
    std::uint64_t events = 0;
    std::optional<std::uint64_t> first_invalid_seq;
    std::string reason;
};

/// Append-only, hash-chained JSON Lines log. Every append is flushed before
/// it returns; a failed write latches the log closed and fires on_failure.
class AuditLog {
public:
    struct Options {
        std::string path;
        std::string checkpoint_key;  // HMAC key for the signed head checkpoint; empty disables it
        bool sync = false;           // fdatasync per event
        WallClock clock;
        std::function<void()> on_failure;
    };

    explicit AuditLog(Options options);
    ~AuditLog();
    AuditLog(const AuditLog&) = delete;
    AuditLog& operator=(const AuditLog&) = delete;

    /// Returns the assigned seq. Throws AuditFailure (fail-closed).
    std::uint64_t append(std::string_view actor, std::string_view kind, nlohmann::json payload);

    /// Appends only if `guard` holds; the guard runs under the append lock so
    /// it is ordered against every other event. Returns nullopt when refused.
    std::optional<std::uint64_t> append_guarded(std::string_view actor, std::string_view kind, nlohmann::json payload,
                                                const std::function<bool()>& guard);

    [[nodiscard]] std::uint64_t last_seq() const;
    [[nodiscard]] const std::string& path() const noexcept { return options_.path; }
    [[nodiscard]] bool failed() const;

    /// Snapshot of the events written through this instance and any loaded on open.
    [[nodiscard]] std::vector<AuditEvent> events() const;

    static std::string checkpoint_path(const std::string& log_path) { return log_path + ".head"; }

    /// Verifies the chain line by line; with a key, also checks the signed
    /// head checkpoint so a dropped suffix is detected.
    static AuditVerification verify_text(std::string_view content, const std::optional<nlohmann::json>& checkpoint,
                                         std::string_view key);
    static AuditVerification verify_file(const std::string& path, std::string_view key);

    static std::vector<AuditEvent> parse(std::string_view content);
    static std::vector<AuditEvent> read_file(const std::string& path);

private:
    void write_checkpoint();

    Options options_;
    mutable std::mutex mutex_;
    int fd_ = -1;
    std::uint64_t seq_ = 0;
    std::string last_hash_;
    bool failed_ = false;
    std::vector<AuditEvent> events_;
};

/// Recursively replaces values under secret-looking keys (api_key, password,
/// secret, token, credential, authorization) with "***".
nlohmann::json redact_secrets(nlohmann::json payload);

struct InterlockViolation {
    std::uint64_t executed_seq;
    std::string request_id;
};

/// Every Executed event must be preceded by ApprovalDecided(Approved) for the
/// same request_id; returns the violations.
std::vector<InterlockViolation> check_interlock(const std::vector<AuditEvent>& events);

}  // namespace redteam
