#include "redteam/security.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include <openssl/crypto.h>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include "redteam/error.hpp"
#include "redteam/scenario.hpp"

namespace redteam {

namespace {

std::string hex_encode(std::string_view raw) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(raw.size() * 2);
    for (unsigned char c : raw) {
        out += digits[c >> 4];
        out += digits[c & 0xF];
    }
    return out;
}

std::string hex_decode(std::string_view hex) {
    if (hex.size() % 2) throw Error(ErrorCode::ConfigError, "odd-length hex string");
    auto nibble = [](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        if (c >= 'A' && c <= 'F') return c - 'A' + 10;
        throw Error(ErrorCode::ConfigError, "invalid hex digit");
    };
    std::string out(hex.size() / 2, '\0');
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<char>(nibble(hex[2 * i]) << 4 | nibble(hex[2 * i + 1]));
    return out;
}

std::string pbkdf2(const std::string& password, const std::string& salt, unsigned iterations) {
    std::string out(32, '\0');
    if (PKCS5_PBKDF2_HMAC(password.data(), static_cast<int>(password.size()),
                          reinterpret_cast<const unsigned char*>(salt.data()), static_cast<int>(salt.size()),
                          static_cast<int>(iterations), EVP_sha256(), static_cast<int>(out.size()),
                          reinterpret_cast<unsigned char*>(out.data())) != 1)
        throw Error(ErrorCode::InvalidCredentials, "key derivation failed");
    return out;
}

std::vector<std::string> split(const std::string& line, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    std::istringstream ss(line);
    while (std::getline(ss, cur, sep)) parts.push_back(cur);
    if (!line.empty() && line.back() == sep) parts.emplace_back();
    return parts;
}

}  // namespace

std::string random_hex(std::size_t bytes) {
    std::string raw(bytes, '\0');
    if (RAND_bytes(reinterpret_cast<unsigned char*>(raw.data()), static_cast<int>(bytes)) != 1)
        throw Error(ErrorCode::StorageError, "CSPRNG unavailable");
    return hex_encode(raw);
}

std::string_view to_string(OperatorRole role) noexcept {
    return role == OperatorRole::Operator ? "Operator" : "Viewer";
}

OperatorRole parse_operator_role(std::string_view s) {
    if (s == "Operator" || s == "operator") return OperatorRole::Operator;
    if (s == "Viewer" || s == "viewer") return OperatorRole::Viewer;
    throw Error(ErrorCode::ConfigError, "unknown role " + std::string(s));
}

void to_json(nlohmann::json& j, const OperatorSession& s) {
    j = {{"session_id", s.session_id},
         {"principal", s.principal},
         {"role", to_string(s.role)},
         {"expires_at", format_timestamp(s.expires_at)}};
}

CredentialStore CredentialStore::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot read credential store " + path);
    CredentialStore store;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        auto parts = split(line, ':');
        if (parts.size() != 5 || parts[0].empty())
            throw Error(ErrorCode::ConfigError, path + ":" + std::to_string(lineno) + ": expected 5 fields");
        Entry e{parse_operator_role(parts[1]), static_cast<unsigned>(std::stoul(parts[2])), hex_decode(parts[3]),
                hex_decode(parts[4])};
        store.entries_[parts[0]] = std::move(e);
    }
    return store;
}

void CredentialStore::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error(ErrorCode::ConfigError, "cannot write credential store " + path);
    out << "# principal:role:iterations:salt_hex:pbkdf2_sha256_hex\n";
    for (const auto& [principal, e] : entries_)
        out << principal << ':' << to_string(e.role) << ':' << e.iterations << ':' << hex_encode(e.salt) << ':'
            << hex_encode(e.hash) << '\n';
}

void CredentialStore::add(const std::string& principal, const std::string& password, OperatorRole role,
                          unsigned iterations) {
    if (principal.empty() || principal.find(':') != std::string::npos)
        throw Error(ErrorCode::ConfigError, "principal must be non-empty and contain no ':'");
    std::string salt = hex_decode(random_hex(16));
    entries_[principal] = Entry{role, iterations, salt, pbkdf2(password, salt, iterations)};
}

std::optional<OperatorRole> CredentialStore::verify(const std::string& principal, const std::string& password) const {
    auto it = entries_.find(principal);
    if (it == entries_.end()) return std::nullopt;
    const Entry& e = it->second;
    std::string derived = pbkdf2(password, e.salt, e.iterations);
    if (derived.size() != e.hash.size() || CRYPTO_memcmp(derived.data(), e.hash.data(), derived.size()) != 0)
        return std::nullopt;
    return e.role;
}

Authenticator::Authenticator(CredentialStore store, AuditLog* audit, Options options)
    : store_(std::move(store)), audit_(audit), options_(std::move(options)) {
    if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
}

void Authenticator::audit(std::string_view actor, std::string_view kind, nlohmann::json payload) {
    if (audit_) audit_->append(actor, kind, std::move(payload));
}

OperatorSession Authenticator::authenticate(const std::string& principal, const std::string& password) {
    const auto now = options_.clock();
    {
        std::lock_guard lock(mutex_);
        auto& f = failures_[principal];
        if (f.locked_until && now < *f.locked_until) {
            audit(principal, audit_kind::AuthFailed, {{"principal", principal}, {"reason", "locked_out"}});
            throw Error(ErrorCode::LockedOut, principal + " is locked out");
        }
        if (f.locked_until) f = FailureState{};
    }
    auto role = store_.verify(principal, password);
    std::lock_guard lock(mutex_);
    auto& f = failures_[principal];
    if (!role) {
        ++f.consecutive;
        const bool lock_now = f.consecutive >= options_.max_failures;
        if (lock_now) f.locked_until = now + options_.lockout;
        audit(principal, audit_kind::AuthFailed,
              {{"principal", principal}, {"reason", "invalid_credentials"}, {"consecutive_failures", f.consecutive}});
        if (lock_now) throw Error(ErrorCode::LockedOut, principal + " locked out after " +
                                                            std::to_string(f.consecutive) + " failures");
        throw Error(ErrorCode::InvalidCredentials, "invalid credentials for " + principal);
    }
    f = FailureState{};
    OperatorSession s{random_hex(16), principal, *role, now + options_.session_ttl};
    sessions_[s.session_id] = s;
    audit(principal, audit_kind::AuthSucceeded, {{"principal", principal}, {"role", to_string(s.role)}});
    return s;
}

OperatorSession Authenticator::issue(const std::string& principal, OperatorRole role) {
    std::lock_guard lock(mutex_);
    OperatorSession s{random_hex(16), principal, role, options_.clock() + options_.session_ttl};
    sessions_[s.session_id] = s;
    audit(principal, audit_kind::AuthSucceeded,
          {{"principal", principal}, {"role", to_string(role)}, {"method", "local"}});
    return s;
}

OperatorSession Authenticator::validate(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    auto it = sessions_.find(session_id);
    if (it == sessions_.end()) {
        audit("anonymous", audit_kind::SessionRejected, {{"reason", "unknown_session"}});
        throw Error(ErrorCode::Unauthorized, "unknown session");
    }
    if (options_.clock() >= it->second.expires_at) {
        audit(it->second.principal, audit_kind::SessionRejected,
              {{"reason", "expired"}, {"principal", it->second.principal}});
        throw Error(ErrorCode::SessionExpired, "session for " + it->second.principal + " has expired");
    }
    return it->second;
}

OperatorSession Authenticator::require_operator(const std::string& session_id, std::string_view action) {
    OperatorSession s = validate(session_id);
    if (s.role != OperatorRole::Operator) {
        std::lock_guard lock(mutex_);
        audit(s.principal, audit_kind::SessionRejected,
              {{"reason", "insufficient_role"}, {"action", action}, {"principal", s.principal}});
        throw Error(ErrorCode::Unauthorized, s.principal + " may not " + std::string(action));
    }
    return s;
}

void Authenticator::logout(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    sessions_.erase(session_id);
}

std::string_view to_string(ApprovalPolicy p) noexcept {
    switch (p) {
        case ApprovalPolicy::Interactive: return "Interactive";
        case ApprovalPolicy::Allowlist: return "Allowlist";
        case ApprovalPolicy::AutoApprove: return "AutoApprove";
    }
    return "?";
}

ApprovalPolicy parse_approval_policy(std::string_view s) {
    if (s == "Interactive" || s == "interactive") return ApprovalPolicy::Interactive;
    if (s == "Allowlist" || s == "allowlist") return ApprovalPolicy::Allowlist;
    if (s == "AutoApprove" || s == "auto-approve" || s == "auto_approve" || s == "auto")
        return ApprovalPolicy::AutoApprove;
    throw Error(ErrorCode::ConfigError, "unknown approval policy " + std::string(s));
}

std::string_view to_string(ApprovalDecision d) noexcept {
    switch (d) {
        case ApprovalDecision::Approved: return "Approved";
        case ApprovalDecision::Denied: return "Denied";
        case ApprovalDecision::TimedOut: return "TimedOut";
    }
    return "?";
}

void ApprovalSettings::validate() const {
    if (policy == ApprovalPolicy::AutoApprove && sandbox != SandboxMode::Simulated)
        throw Error(ErrorCode::PolicyViolation, "AutoApprove is only permitted with the Simulated sandbox");
}

void to_json(nlohmann::json& j, const ApprovalRequest& r) {
    j = {{"request_id", r.request_id},
         {"run_id", r.run_id},
         {"node_id", r.node_id},
         {"command", r.command},
         {"context_digest", r.context_digest},
         {"policy", to_string(r.policy)},
         {"created_at", format_timestamp(r.created_at)},
         {"deadline", format_timestamp(r.deadline)}};
    j["decision"] = r.decision ? nlohmann::json(to_string(*r.decision)) : nlohmann::json(nullptr);
    if (!r.decided_by.empty()) j["decided_by"] = r.decided_by;
    if (r.decided_at) j["decided_at"] = format_timestamp(*r.decided_at);
}

ApprovalGate::ApprovalGate(AuditLog& audit, std::shared_ptr<KillSwitch> kill_switch, Authenticator* authenticator,
                           WallClock clock)
    : audit_(audit), kill_switch_(std::move(kill_switch)), authenticator_(authenticator), clock_(std::move(clock)) {
    if (!clock_) clock_ = [] { return std::chrono::system_clock::now(); };
    if (kill_switch_)
        kill_listener_ = kill_switch_->on_activate([this] {
            std::lock_guard lock(mutex_);
            cv_.notify_all();
        });
}

ApprovalGate::~ApprovalGate() {
    if (kill_switch_ && kill_listener_) kill_switch_->remove_listener(kill_listener_);
}

bool ApprovalGate::matches_allowlist(const std::string& command, const std::vector<std::string>& patterns) {
    for (const auto& p : patterns)
        if (glob_match(p, command)) return true;
    return false;
}

void ApprovalGate::resolve_locked(Slot& slot, ApprovalDecision decision, const std::string& by,
                                  const std::string& reason, bool audit_as_denied) {
    slot.request.decision = decision;
    slot.request.decided_by = by;
    slot.request.decided_at = clock_();
    slot.reason = reason;
    nlohmann::json payload{{"request_id", slot.request.request_id},
                           {"run_id", slot.request.run_id},
                           {"node_id", slot.request.node_id},
                           {"decision", audit_as_denied ? "Denied" : to_string(decision)},
                           {"outcome", to_string(decision)},
                           {"decided_by", by}};
    if (!reason.empty()) payload["reason"] = reason;
    try {
        audit_.append(by, audit_kind::ApprovalDecided, std::move(payload));
    } catch (...) {
        slot.request.decision.reset();
        slot.request.decided_by.clear();
        slot.request.decided_at.reset();
        throw;
    }
}

void ApprovalGate::notify(const std::vector<Listener>& listeners, const ApprovalRequest& r) {
    for (const auto& l : listeners) l(r);
}

ApprovalResult ApprovalGate::request(const std::string& command, const ApprovalContext& context,
                                     const ApprovalSettings& settings) {
    settings.validate();
    if (kill_switch_ && kill_switch_->active())
        throw Error(ErrorCode::KillSwitchActive, "kill switch is active; no approvals are granted");

    auto slot = std::make_shared<Slot>();
    std::vector<Listener> pending_listeners, resolved_listeners;
    {
        std::lock_guard lock(mutex_);
        char id[32];
        std::snprintf(id, sizeof id, "req-%06llu", static_cast<unsigned long long>(next_id_++));
        auto& r = slot->request;
        r.request_id = id;
        r.run_id = context.run_id;
        r.node_id = context.node_id;
        r.command = command;
        r.context_digest = context.context_digest;
        r.policy = settings.policy;
        r.created_at = clock_();
        r.deadline = r.created_at + settings.interactive_timeout;
        audit_.append("agent:" + context.run_id, audit_kind::ToolRequested,
                      {{"request_id", r.request_id},
                       {"run_id", r.run_id},
                       {"node_id", r.node_id},
                       {"command", command},
                       {"policy", to_string(settings.policy)},
                       {"context", r.context_digest}});
        requests_[r.request_id] = slot;

        if (settings.policy == ApprovalPolicy::AutoApprove) {
            resolve_locked(*slot, ApprovalDecision::Approved, "policy:auto_approve", "", false);
        } else if (settings.policy == ApprovalPolicy::Allowlist) {
            bool ok = matches_allowlist(command, settings.allowlist);
            resolve_locked(*slot, ok ? ApprovalDecision::Approved : ApprovalDecision::Denied, "policy:allowlist",
                           ok ? "" : "command matches no allowlist pattern", false);
        }
        pending_listeners = pending_listeners_;
        resolved_listeners = resolved_listeners_;
    }

    if (settings.policy != ApprovalPolicy::Interactive) {
        notify(resolved_listeners, slot->request);
        return {slot->request.request_id, *slot->request.decision, slot->reason};
    }

    notify(pending_listeners, slot->request);
    std::unique_lock lock(mutex_);
    const auto deadline = std::chrono::steady_clock::now() + settings.interactive_timeout;
    cv_.wait_until(lock, deadline, [&] {
        return slot->request.decision.has_value() || (kill_switch_ && kill_switch_->active());
    });
    bool killed = false;
    if (!slot->request.decision) {
        killed = kill_switch_ && kill_switch_->active();
        if (killed)
            resolve_locked(*slot, ApprovalDecision::Denied, "system", "kill_switch", false);
        else
            resolve_locked(*slot, ApprovalDecision::TimedOut, "system", "no operator decision before timeout", true);
    }
    ApprovalResult result{slot->request.request_id, *slot->request.decision, slot->reason};
    ApprovalRequest snapshot = slot->request;
    resolved_listeners = resolved_listeners_;
    lock.unlock();
    notify(resolved_listeners, snapshot);
    if (killed) throw Error(ErrorCode::KillSwitchActive, "kill switch engaged while awaiting approval");
    return result;
}

void ApprovalGate::decide(const std::string& request_id, bool approve, const std::string& session_id) {
    if (!authenticator_) throw Error(ErrorCode::Unauthorized, "no authenticator configured");
    OperatorSession session = authenticator_->require_operator(session_id, "approve");
    std::vector<Listener> listeners;
    ApprovalRequest snapshot;
    {
        std::lock_guard lock(mutex_);
        auto it = requests_.find(request_id);
        if (it == requests_.end()) throw Error(ErrorCode::UnknownRequest, "no approval request " + request_id);
        Slot& slot = *it->second;
        if (slot.request.decision)
            throw Error(ErrorCode::AlreadyDecided, request_id + " was already " +
                                                       std::string(to_string(*slot.request.decision)));
        if (kill_switch_ && kill_switch_->active())
            throw Error(ErrorCode::KillSwitchActive, "kill switch is active; no approvals are granted");
        resolve_locked(slot, approve ? ApprovalDecision::Approved : ApprovalDecision::Denied,
                       "operator:" + session.principal, approve ? "" : "denied by operator", false);
        snapshot = slot.request;
        listeners = resolved_listeners_;
    }
    cv_.notify_all();
    notify(listeners, snapshot);
}

void ApprovalGate::cancel_run(const std::string& run_id) {
    std::vector<ApprovalRequest> resolved;
    std::vector<Listener> listeners;
    {
        std::lock_guard lock(mutex_);
        for (auto& [_, slot] : requests_) {
            if (slot->request.run_id != run_id || slot->request.decision) continue;
            resolve_locked(*slot, ApprovalDecision::Denied, "system", "run_stopped", false);
            resolved.push_back(slot->request);
        }
        listeners = resolved_listeners_;
    }
    cv_.notify_all();
    for (const auto& r : resolved) notify(listeners, r);
}

std::vector<ApprovalRequest> ApprovalGate::pending() const {
    std::lock_guard lock(mutex_);
    std::vector<ApprovalRequest> out;
    for (const auto& [_, slot] : requests_)
        if (!slot->request.decision) out.push_back(slot->request);
    return out;
}

std::optional<ApprovalRequest> ApprovalGate::find(const std::string& request_id) const {
    std::lock_guard lock(mutex_);
    auto it = requests_.find(request_id);
    if (it == requests_.end()) return std::nullopt;
    return it->second->request;
}

void ApprovalGate::on_pending(Listener listener) {
    std::lock_guard lock(mutex_);
    pending_listeners_.push_back(std::move(listener));
}

void ApprovalGate::on_resolved(Listener listener) {
    std::lock_guard lock(mutex_);
    resolved_listeners_.push_back(std::move(listener));
}

}  // namespace redteam
