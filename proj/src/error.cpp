#include "redteam/error.hpp"

namespace redteam {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::EmptyDescription: return "EmptyDescription";
        case ErrorCode::UnknownNode: return "UnknownNode";
        case ErrorCode::InvalidStatus: return "InvalidStatus";
        case ErrorCode::IllegalTransition: return "IllegalTransition";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::EmptyTranscript: return "EmptyTranscript";
        case ErrorCode::ScriptExhausted: return "ScriptExhausted";
        case ErrorCode::ProviderError: return "ProviderError";
        case ErrorCode::DuplicateKey: return "DuplicateKey";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::ZeroTotal: return "ZeroTotal";
        case ErrorCode::ProtocolViolation: return "ProtocolViolation";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::Aborted: return "Aborted";
        case ErrorCode::Timeout: return "Timeout";
        case ErrorCode::SandboxViolation: return "SandboxViolation";
        case ErrorCode::KillSwitchActive: return "KillSwitchActive";
        case ErrorCode::PlanParseError: return "PlanParseError";
        case ErrorCode::CorrectionExhausted: return "CorrectionExhausted";
        case ErrorCode::StaleRevision: return "StaleRevision";
        case ErrorCode::EmptyText: return "EmptyText";
        case ErrorCode::EmbedderError: return "EmbedderError";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::StorageError: return "StorageError";
        case ErrorCode::InvalidCredentials: return "InvalidCredentials";
        case ErrorCode::LockedOut: return "LockedOut";
        case ErrorCode::SessionExpired: return "SessionExpired";
        case ErrorCode::Unauthorized: return "Unauthorized";
        case ErrorCode::PolicyViolation: return "PolicyViolation";
        case ErrorCode::AlreadyDecided: return "AlreadyDecided";
        case ErrorCode::UnknownRequest: return "UnknownRequest";
        case ErrorCode::AuditFailure: return "AuditFailure";
        case ErrorCode::UnknownRun: return "UnknownRun";
        case ErrorCode::RunTerminal: return "RunTerminal";
        case ErrorCode::UnknownRubricStep: return "UnknownRubricStep";
        case ErrorCode::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

}  // namespace redteam
