#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/audit_log.hpp"
#include "redteam/kill_switch.hpp"
#include "redteam/llm_gateway.hpp"
#include "redteam/security.hpp"
#include "redteam/task_graph.hpp"
#include "redteam/terminal.hpp"

namespace redteam {

enum class LeafState : std::uint8_t { Running, AwaitingApproval, Done, Aborted };
std::string_view to_string(LeafState s) noexcept;

struct StepRecord {
    std::size_t index = 0;
    std::optional<std::string> reason_output;
    std::string act_output;
    std::optional<ToolCall> tool_call;
    std::optional<ApprovalResult> approval;
    std::optional<ExecutionRecord> execution;
    bool summarized = false;
    bool summary_degraded = false;  // summarizer failed; output hard-truncated
    std::string observation;        // what was fed back into the sessions
};

void to_json(nlohmann::json& j, const StepRecord& s);

struct LeafRun {
    NodeId node_id;
    bool reasoning_enabled = true;
    ChatTranscript reason_transcript{SessionKind::Reason};
    ChatTranscript act_transcript{SessionKind::Act};
    std::vector<StepRecord> steps;
    LeafState state = LeafState::Running;
    NodeMetrics metrics;
    std::optional<OutcomeSummary> outcome;
    std::string abort_reason;
    std::size_t peak_act_tokens = 0;  // largest Act estimate observed between calls

    [[nodiscard]] std::size_t executions() const;
    [[nodiscard]] std::size_t denials() const;
};

void to_json(nlohmann::json& j, const ChatTranscript& t);
void to_json(nlohmann::json& j, const LeafRun& r);

struct LeafContext {
    std::string run_id;
    NodeId node_id;
    std::string description;
    std::vector<std::string> path;  // root .. parent descriptions
    std::vector<std::string> prior_sibling_outcomes;
    std::vector<std::string> memory_digests;

    /// Root-to-leaf description path shown to approvers.
    [[nodiscard]] std::string context_digest() const;
};

/// The first user message of both sessions.
std::string leaf_task_message(const LeafContext& context);

struct ReactConfig {
    bool reasoning_enabled = true;
    std::size_t max_steps = 30;
    std::size_t summarize_threshold = 4096;  // bytes
    std::size_t act_context_budget = 24000;  // tokens
    std::size_t reason_context_budget = 24000;
    ApprovalSettings approval;
};

struct Terminator {
    bool success;
    std::string text;
};

/// A line starting with TASK_COMPLETE: or TASK_FAILED:, if any.
std::optional<Terminator> find_terminator(std::string_view completion);

/// Runs Reason -> Act -> approve/execute -> summarize for one leaf task.
class ReactEngine {
public:
    ReactEngine(LlmGateway& gateway, ApprovalGate& approvals, Terminal& terminal, AuditLog* audit,
                std::shared_ptr<const KillSwitch> kill_switch, ReactConfig config);

    /// Never throws Aborted; an aborted leaf comes back with state Aborted.
    LeafRun run_leaf(const LeafContext& context, const std::function<bool()>& stop_requested = {});

    /// One stateless Summarizer completion. Throws EmptyInput.
    std::string summarize(std::string_view text);

    /// Routes an execution result into the sessions. Sets step.summarized and
    /// step.observation.
    void feed_observation(LeafRun& run, StepRecord& step, const std::string& text);

    using StepListener = std::function<void(const LeafRun&, const StepRecord&)>;
    void on_step(StepListener l) { step_listener_ = std::move(l); }
    using StateListener = std::function<void(const LeafRun&, LeafState)>;
    void on_state(StateListener l) { state_listener_ = std::move(l); }

    [[nodiscard]] const ReactConfig& config() const noexcept { return config_; }

private:
    Completion call(ChatTranscript& transcript, LeafRun& run);
    bool halted(const std::function<bool()>& stop_requested, LeafRun& run);
    void set_state(LeafRun& run, LeafState s);
    void finish(LeafRun& run, OutcomeSummary outcome);
    static void track(LeafRun& run) noexcept;
    bool admit_act(LeafRun& run, ChatMessage message);
    void fit_act(LeafRun& run);

    LlmGateway& gateway_;
    ApprovalGate& approvals_;
    Terminal& terminal_;
    AuditLog* audit_;
    std::shared_ptr<const KillSwitch> kill_switch_;
    ReactConfig config_;
    std::string run_id_;
    StepListener step_listener_;
    StateListener state_listener_;
};

}  // namespace redteam
