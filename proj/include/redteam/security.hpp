#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/audit_log.hpp"
#include "redteam/kill_switch.hpp"
#include "redteam/terminal.hpp"

namespace redteam {

enum class OperatorRole : std::uint8_t { Operator, Viewer };

std::string_view to_string(OperatorRole role) noexcept;
OperatorRole parse_operator_role(std::string_view s);

struct OperatorSession {
    std::string session_id;
    std::string principal;
    OperatorRole role = OperatorRole::Viewer;
    std::chrono::system_clock::time_point expires_at;
};

void to_json(nlohmann::json& j, const OperatorSession& s);

/// Local credential file, one principal per line:
///   principal:role:iterations:salt_hex:pbkdf2_sha256_hex
/// Blank lines and lines starting with '#' are ignored.
class CredentialStore {
public:
    static CredentialStore load(const std::string& path);
    void save(const std::string& path) const;

    void add(const std::string& principal, const std::string& password, OperatorRole role,
             unsigned iterations = 120000);
    [[nodiscard]] std::optional<OperatorRole> verify(const std::string& principal, const std::string& password) const;
    [[nodiscard]] bool contains(const std::string& principal) const { return entries_.count(principal) > 0; }
    [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }

private:
    struct Entry {
        OperatorRole role;
        unsigned iterations;
        std::string salt;  // raw bytes
        std::string hash;  // raw bytes
    };
    std::map<std::string, Entry> entries_;
};

/// Random lowercase hex string of 2*bytes characters from the OpenSSL CSPRNG.
std::string random_hex(std::size_t bytes);

class Authenticator {
public:
    struct Options {
        std::chrono::seconds session_ttl = std::chrono::hours(8);
        int max_failures = 5;
        std::chrono::seconds lockout = std::chrono::minutes(15);
        WallClock clock;
    };

    Authenticator(CredentialStore store, AuditLog* audit, Options options);
    Authenticator(CredentialStore store, AuditLog* audit) : Authenticator(std::move(store), audit, Options{}) {}

    /// Throws InvalidCredentials, LockedOut.
    OperatorSession authenticate(const std::string& principal, const std::string& password);

    /// Session for a locally trusted principal (CLI on the operator's host).
    OperatorSession issue(const std::string& principal, OperatorRole role);

    /// Throws Unauthorized (unknown id) or SessionExpired; both audited.
    OperatorSession validate(const std::string& session_id);

    /// validate() plus Operator role; a Viewer gets Unauthorized.
    OperatorSession require_operator(const std::string& session_id, std::string_view action);

    void logout(const std::string& session_id);

private:
    void audit(std::string_view actor, std::string_view kind, nlohmann::json payload);

    CredentialStore store_;
    AuditLog* audit_;
    Options options_;
    std::mutex mutex_;
    std::map<std::string, OperatorSession> sessions_;
    struct FailureState {
        int consecutive = 0;
        std::optional<std::chrono::system_clock::time_point> locked_until;
    };
    std::map<std::string, FailureState> failures_;
};

enum class ApprovalPolicy : std::uint8_t { Interactive, Allowlist, AutoApprove };
enum class ApprovalDecision : std::uint8_t { Approved, Denied, TimedOut };

std::string_view to_string(ApprovalPolicy p) noexcept;
ApprovalPolicy parse_approval_policy(std::string_view s);
std::string_view to_string(ApprovalDecision d) noexcept;

struct ApprovalSettings {
    ApprovalPolicy policy = ApprovalPolicy::Interactive;
    std::vector<std::string> allowlist;  // glob patterns
    std::chrono::milliseconds interactive_timeout{300000};
    SandboxMode sandbox = SandboxMode::Simulated;

    /// PolicyViolation for AutoApprove outside the Simulated sandbox.
    void validate() const;
};

struct ApprovalContext {
    std::string run_id;
    std::string node_id;
    std::string context_digest;  // root-to-leaf description path
};

struct ApprovalRequest {
    std::string request_id;
    std::string run_id;
    std::string node_id;
    std::string command;
    std::string context_digest;
    ApprovalPolicy policy = ApprovalPolicy::Interactive;
    std::optional<ApprovalDecision> decision;
    std::string decided_by;
    std::optional<std::chrono::system_clock::time_point> decided_at;
    std::chrono::system_clock::time_point created_at;
    std::chrono::system_clock::time_point deadline;
};

void to_json(nlohmann::json& j, const ApprovalRequest& r);

struct ApprovalResult {
    std::string request_id;
    ApprovalDecision decision = ApprovalDecision::Denied;
    std::string reason;
    [[nodiscard]] bool approved() const noexcept { return decision == ApprovalDecision::Approved; }
};

/// Human command validation. Every request is audited as ToolRequested and
/// resolved by exactly one ApprovalDecided event before request() returns.
class ApprovalGate {
public:
    ApprovalGate(AuditLog& audit, std::shared_ptr<KillSwitch> kill_switch, Authenticator* authenticator,
                 WallClock clock = {});
    ~ApprovalGate();
    ApprovalGate(const ApprovalGate&) = delete;
    ApprovalGate& operator=(const ApprovalGate&) = delete;

    /// Blocks under Interactive until decided, timed out, cancelled or killed.
    /// Throws KillSwitchActive, PolicyViolation.
    ApprovalResult request(const std::string& command, const ApprovalContext& context,
                           const ApprovalSettings& settings);

    /// Operator decision for a pending Interactive request. Throws
    /// UnknownRequest, AlreadyDecided, Unauthorized, SessionExpired.
    void decide(const std::string& request_id, bool approve, const std::string& session_id);

    /// Denies every pending request of `run_id` (operator stop).
    void cancel_run(const std::string& run_id);

    [[nodiscard]] std::vector<ApprovalRequest> pending() const;
    [[nodiscard]] std::optional<ApprovalRequest> find(const std::string& request_id) const;

    using Listener = std::function<void(const ApprovalRequest&)>;
    void on_pending(Listener listener);
    void on_resolved(Listener listener);

    static bool matches_allowlist(const std::string& command, const std::vector<std::string>& patterns);

private:
    struct Slot {
        ApprovalRequest request;
        std::string reason;
    };
    void resolve_locked(Slot& slot, ApprovalDecision decision, const std::string& by, const std::string& reason,
                        bool audit_as_denied);
    void notify(const std::vector<Listener>& listeners, const ApprovalRequest& r);

    AuditLog& audit_;
    std::shared_ptr<KillSwitch> kill_switch_;
    Authenticator* authenticator_;
    WallClock clock_;
    KillSwitch::ListenerId kill_listener_ = 0;

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::map<std::string, std::shared_ptr<Slot>> requests_;
    std::uint64_t next_id_ = 1;
    std::vector<Listener> pending_listeners_;
    std::vector<Listener> resolved_listeners_;
};

}  // namespace redteam
