#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace redteam {

enum class ErrorCode : std::uint8_t {
    // task graph
    EmptyDescription,
    UnknownNode,
    InvalidStatus,
    IllegalTransition,
    ParseError,
    // llm gateway
    EmptyTranscript,
    ScriptExhausted,
    ProviderError,
    DuplicateKey,
    SchemaViolation,
    ZeroTotal,
    ProtocolViolation,
    // react engine / executor
    EmptyInput,
    Aborted,
    Timeout,
    SandboxViolation,
    KillSwitchActive,
    // planning
    PlanParseError,
    CorrectionExhausted,
    StaleRevision,
    // memory
    EmptyText,
    EmbedderError,
    DimensionMismatch,
    StorageError,
    // security
    InvalidCredentials,
    LockedOut,
    SessionExpired,
    Unauthorized,
    PolicyViolation,
    AlreadyDecided,
    UnknownRequest,
    AuditFailure,
    // orchestration / evaluation
    UnknownRun,
    RunTerminal,
    UnknownRubricStep,
    ConfigError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Single exception type for the library; callers branch on code().
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    Error(ErrorCode code, const std::string& message, bool retriable)
        : Error(code, message) {
        retriable_ = retriable;
    }

    [[nodiscard]] ErrorCode code() const noexcept { return code_; }

    /// Set for ProviderError; transport failures are retriable, protocol failures are not.
    [[nodiscard]] bool retriable() const noexcept { return retriable_; }

    /// Byte offset for ParseError / SchemaViolation when known.
    [[nodiscard]] std::optional<std::size_t> location() const noexcept { return location_; }

    Error& at(std::size_t offset) {
        location_ = offset;
        return *this;
    }

private:
    ErrorCode code_;
    bool retriable_ = false;
    std::optional<std::size_t> location_;
};

}  // namespace redteam
