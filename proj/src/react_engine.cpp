#include "redteam/react_engine.hpp"

#include <algorithm>
#include <sstream>

#include "redteam/error.hpp"
#include "redteam/prompts.hpp"

namespace redteam {

namespace {

std::string format_observation(const ExecutionRecord& r) {
    std::string out = "$ " + r.command + "\n" + r.output;
    if (!out.empty() && out.back() != '\n') out += '\n';
    if (r.timed_out) out += "[command timed out and was killed]\n";
    if (r.awaiting_input == AwaitingInput::Yes) out += "[command was waiting for interactive input and was killed]\n";
    out += "[exit code " + std::to_string(r.exit_code) + "]";
    return out;
}

nlohmann::json tool_call_json(const ToolCall& c) { return {{"tool_name", c.tool_name}, {"arguments", c.arguments}}; }

}  // namespace

std::string_view to_string(LeafState s) noexcept {
    switch (s) {
        case LeafState::Running: return "Running";
        case LeafState::AwaitingApproval: return "AwaitingApproval";
        case LeafState::Done: return "Done";
        case LeafState::Aborted: return "Aborted";
    }
    return "?";
}

void to_json(nlohmann::json& j, const StepRecord& s) {
    j = {{"index", s.index}, {"act_output", s.act_output}, {"summarized", s.summarized},
         {"observation", s.observation}};
    j["reason_output"] = s.reason_output ? nlohmann::json(*s.reason_output) : nlohmann::json(nullptr);
    j["tool_call"] = s.tool_call ? tool_call_json(*s.tool_call) : nlohmann::json(nullptr);
    if (s.approval)
        j["approval"] = {{"request_id", s.approval->request_id},
                         {"decision", to_string(s.approval->decision)},
                         {"reason", s.approval->reason}};
    else
        j["approval"] = nullptr;
    j["execution"] = s.execution ? nlohmann::json(*s.execution) : nlohmann::json(nullptr);
    if (s.summary_degraded) j["summary_degraded"] = true;
}

void to_json(nlohmann::json& j, const ChatTranscript& t) {
    j = {{"session_kind", to_string(t.kind())}, {"token_estimate", t.token_estimate()}};
    auto& msgs = j["messages"] = nlohmann::json::array();
    for (const auto& m : t.messages()) {
        nlohmann::json jm{{"role", to_string(m.role)}, {"content", m.content}};
        if (m.tool_call) jm["tool_call"] = tool_call_json(*m.tool_call);
        msgs.push_back(std::move(jm));
    }
}

void to_json(nlohmann::json& j, const LeafRun& r) {
    j = {{"node_id", r.node_id},
         {"reasoning_enabled", r.reasoning_enabled},
         {"state", to_string(r.state)},
         {"metrics", r.metrics},
         {"reason_transcript", r.reason_transcript},
         {"act_transcript", r.act_transcript},
         {"steps", r.steps}};
    j["outcome"] = r.outcome ? nlohmann::json(*r.outcome) : nlohmann::json(nullptr);
    j["peak_act_tokens"] = r.peak_act_tokens;
    if (!r.abort_reason.empty()) j["abort_reason"] = r.abort_reason;
}

std::size_t LeafRun::executions() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.execution.has_value();
    return n;
}

std::size_t LeafRun::denials() const {
    std::size_t n = 0;
    for (const auto& s : steps) n += s.approval && !s.approval->approved();
    return n;
}

std::string LeafContext::context_digest() const {
    std::string out;
    for (const auto& p : path) out += p + " > ";
    return out + description;
}

std::string leaf_task_message(const LeafContext& c) {
    std::ostringstream ss;
    ss << "TASK: " << c.description << "\n";
    if (!c.path.empty()) {
        ss << "PARENT TASKS:\n";
        for (const auto& p : c.path) ss << "- " << p << "\n";
    }
    if (!c.prior_sibling_outcomes.empty()) {
        ss << "RESULTS OF EARLIER SUBTASKS:\n";
        for (const auto& o : c.prior_sibling_outcomes) ss << "- " << o << "\n";
    }
    if (!c.memory_digests.empty()) {
        ss << "MEMORY:\n";
        for (const auto& m : c.memory_digests) ss << "- " << m << "\n";
    }
    return ss.str();
}

std::optional<Terminator> find_terminator(std::string_view completion) {
    std::size_t pos = 0;
    while (pos <= completion.size()) {
        std::size_t nl = completion.find('\n', pos);
        std::string_view line = completion.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        while (!line.empty() && (line.front() == ' ' || line.front() == '\t')) line.remove_prefix(1);
        for (auto [marker, ok] : {std::pair{prompts::kTerminatorComplete, true}, std::pair{prompts::kTerminatorFailed, false}}) {
            if (line.substr(0, marker.size()) == marker) {
                std::string_view rest = line.substr(marker.size());
                while (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
                while (!rest.empty() && (rest.back() == '\r' || rest.back() == ' ')) rest.remove_suffix(1);
                return Terminator{ok, std::string(rest)};
            }
        }
        if (nl == std::string_view::npos) break;
        pos = nl + 1;
    }
    return std::nullopt;
}

ReactEngine::ReactEngine(LlmGateway& gateway, ApprovalGate& approvals, Terminal& terminal, AuditLog* audit,
                         std::shared_ptr<const KillSwitch> kill_switch, ReactConfig config)
    : gateway_(gateway),
      approvals_(approvals),
      terminal_(terminal),
      audit_(audit),
      kill_switch_(std::move(kill_switch)),
      config_(std::move(config)) {
    config_.approval.validate();
    if (config_.max_steps == 0) throw Error(ErrorCode::ConfigError, "max_steps must be at least 1");
}

Completion ReactEngine::call(ChatTranscript& transcript, LeafRun& run) {
    Completion c = gateway_.complete(transcript);
    switch (transcript.kind()) {
        case SessionKind::Reason: ++run.metrics.api_calls_reason; break;
        case SessionKind::Act: ++run.metrics.api_calls_act; break;
        case SessionKind::Summarizer: ++run.metrics.api_calls_summarizer; break;
        default: break;
    }
    return c;
}

void ReactEngine::set_state(LeafRun& run, LeafState s) {
    run.state = s;
    if (state_listener_) state_listener_(run, s);
}

void ReactEngine::track(LeafRun& run) noexcept {
    run.peak_act_tokens = std::max(run.peak_act_tokens, run.act_transcript.token_estimate());
}

// System prompt and task message are never evicted.
constexpr std::size_t kActPinned = 2;

bool ReactEngine::admit_act(LeafRun& run, ChatMessage message) {
    const std::size_t budget = config_.act_context_budget;
    run.act_transcript.evict_oldest(budget, std::min(ChatTranscript::message_tokens(message), budget / 2), kActPinned,
                                    false);
    const bool ok = run.act_transcript.append_within(std::move(message), budget);
    track(run);
    return ok;
}

void ReactEngine::fit_act(LeafRun& run) {
    run.act_transcript.clamp_last(config_.act_context_budget);
    run.act_transcript.evict_oldest(config_.act_context_budget, 0, kActPinned, true);
    track(run);
}

void ReactEngine::finish(LeafRun& run, OutcomeSummary outcome) {
    run.outcome = std::move(outcome);
    set_state(run, LeafState::Done);
}

bool ReactEngine::halted(const std::function<bool()>& stop_requested, LeafRun& run) {
    std::string reason;
    if (kill_switch_ && kill_switch_->active())
        reason = "kill switch";
    else if (stop_requested && stop_requested())
        reason = "operator stop";
    else
        return false;
    run.abort_reason = reason;
    run.outcome = OutcomeSummary::failed("aborted by " + reason, "Aborted: " + reason);
    set_state(run, LeafState::Aborted);
    return true;
}

std::string ReactEngine::summarize(std::string_view text) {
    if (text.empty()) throw Error(ErrorCode::EmptyInput, "nothing to summarize");
    ChatTranscript t(SessionKind::Summarizer);
    t.append(Role::System, std::string(prompts::kSummarizerSystem));
    t.append(Role::User, std::string(text));
    return gateway_.complete(t).text;
}

void ReactEngine::feed_observation(LeafRun& run, StepRecord& step, const std::string& text) {
    std::string observation = text;
    step.summarized = text.size() > config_.summarize_threshold;
    if (step.summarized) {
        try {
            observation = summarize(text);
            ++run.metrics.api_calls_summarizer;
            if (observation.size() >= text.size()) {
                observation = capture(observation, config_.summarize_threshold).text;
                step.summary_degraded = true;
            }
        } catch (const Error& e) {
            if (e.code() == ErrorCode::AuditFailure) throw;
            observation = capture(text, config_.summarize_threshold).text;
            step.summary_degraded = true;
        }
        if (audit_)
            audit_->append("agent:" + run_id_, audit_kind::Summarized,
                           {{"run_id", run_id_},
                            {"node_id", run.node_id},
                            {"original_length", text.size()},
                            {"summary_length", observation.size()},
                            {"degraded", step.summary_degraded}});
    }
    step.observation = observation;
    if (run.reasoning_enabled)
        run.reason_transcript.append_within(ChatMessage{Role::User, "OBSERVATION:\n" + observation, std::nullopt},
                                            config_.reason_context_budget);
    else
        admit_act(run, ChatMessage{Role::User, "OBSERVATION:\n" + observation, std::nullopt});
}

LeafRun ReactEngine::run_leaf(const LeafContext& context, const std::function<bool()>& stop_requested) {
    run_id_ = context.run_id;
    LeafRun run;
    run.node_id = context.node_id;
    run.reasoning_enabled = config_.reasoning_enabled;
    const std::string task = leaf_task_message(context);
    if (run.reasoning_enabled) {
        run.reason_transcript.append(Role::System, std::string(prompts::kReasonSystem));
        run.reason_transcript.append_within(ChatMessage{Role::User, task, std::nullopt}, config_.reason_context_budget);
    }
    run.act_transcript.append(Role::System, std::string(prompts::kActSystem));
    run.act_transcript.append_within(ChatMessage{Role::User, task, std::nullopt}, config_.act_context_budget);
    track(run);
    set_state(run, LeafState::Running);

    auto push = [&](StepRecord step) {
        run.steps.push_back(std::move(step));
        if (step_listener_) step_listener_(run, run.steps.back());
    };
    const std::string actor = "agent:" + context.run_id;

    for (std::size_t i = 0; i < config_.max_steps; ++i) {
        if (halted(stop_requested, run)) return run;
        StepRecord step;
        step.index = i;

        if (run.reasoning_enabled) {
            Completion r = call(run.reason_transcript, run);
            run.reason_transcript.clamp_last(config_.reason_context_budget);
            step.reason_output = r.text;
            if (auto term = find_terminator(r.text)) {
                push(std::move(step));
                finish(run, term->success ? OutcomeSummary::succeeded(term->text)
                                          : OutcomeSummary::failed(term->text, term->text));
                return run;
            }
            if (!admit_act(run, ChatMessage{Role::Assistant, r.text, std::nullopt})) {
                push(std::move(step));
                finish(run, OutcomeSummary::failed("act context budget exhausted", "context budget exhausted"));
                return run;
            }
            if (halted(stop_requested, run)) {
                push(std::move(step));
                return run;
            }
        }

        Completion a = call(run.act_transcript, run);
        fit_act(run);
        step.act_output = a.text;

        if (!a.tool_call) {
            if (!run.reasoning_enabled) {
                auto term = find_terminator(a.text);
                push(std::move(step));
                if (term && !term->success)
                    finish(run, OutcomeSummary::failed(term->text, term->text));
                else
                    finish(run, OutcomeSummary::succeeded(term ? term->text : a.text));
                return run;
            }
            step.observation = "The acting component issued no command.";
            run.reason_transcript.append_within(
                ChatMessage{Role::User, "OBSERVATION:\n" + step.observation + "\n" + a.text, std::nullopt},
                config_.reason_context_budget);
            push(std::move(step));
            continue;
        }

        step.tool_call = a.tool_call;
        ++run.metrics.tool_calls;
        if (a.tool_call->tool_name != "terminal" || a.tool_call->command().empty()) {
            feed_observation(run, step, "Tool call rejected: only the terminal tool with a non-empty command exists.");
            push(std::move(step));
            continue;
        }
        const std::string command = a.tool_call->command();

        set_state(run, LeafState::AwaitingApproval);
        try {
            step.approval = approvals_.request(command, {context.run_id, context.node_id, context.context_digest()},
                                               config_.approval);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::KillSwitchActive) throw;
            push(std::move(step));
            halted(stop_requested, run);
            return run;
        }
        set_state(run, LeafState::Running);

        if (!step.approval->approved()) {
            const bool timed_out = step.approval->decision == ApprovalDecision::TimedOut;
            feed_observation(run, step,
                             "Command was not executed: " + command + "\n[" +
                                 (timed_out ? "approval timed out" : "approval denied") +
                                 (step.approval->reason.empty() ? "" : ": " + step.approval->reason) + "]");
            push(std::move(step));
            continue;
        }

        if (halted(stop_requested, run)) {
            push(std::move(step));
            return run;
        }
        nlohmann::json exec_payload{{"request_id", step.approval->request_id},
                                    {"run_id", context.run_id},
                                    {"node_id", context.node_id},
                                    {"command", command},
                                    {"sandbox_id", terminal_.sandbox_id()}};
        bool admitted = true;
        if (audit_)
            admitted = audit_->append_guarded(actor, audit_kind::Executed, exec_payload,
                                             [this] { return !(kill_switch_ && kill_switch_->active()); })
                           .has_value();
        else
            admitted = !(kill_switch_ && kill_switch_->active());
        if (!admitted) {
            push(std::move(step));
            halted(stop_requested, run);
            return run;
        }

        ExecutionRecord record;
        try {
            record = terminal_.execute(command);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::KillSwitchActive) {
                if (audit_)
                    audit_->append(actor, audit_kind::ExecutionFinished,
                                   {{"request_id", step.approval->request_id}, {"refused", "kill_switch"}});
                push(std::move(step));
                halted(stop_requested, run);
                return run;
            }
            if (e.code() != ErrorCode::SandboxViolation) throw;
            if (audit_)
                audit_->append(actor, audit_kind::ExecutionFinished,
                               {{"request_id", step.approval->request_id}, {"refused", "sandbox_violation"}});
            feed_observation(run, step, "Command refused by the sandbox: " + std::string(e.what()));
            push(std::move(step));
            continue;
        }
        if (audit_)
            audit_->append(actor, audit_kind::ExecutionFinished,
                           {{"request_id", step.approval->request_id},
                            {"exit_code", record.exit_code},
                            {"signal", record.signal ? nlohmann::json(*record.signal) : nlohmann::json(nullptr)},
                            {"duration_ms", record.duration_ms},
                            {"output_length", record.original_length},
                            {"truncated", record.truncated},
                            {"timed_out", record.timed_out},
                            {"interrupted", record.interrupted},
                            {"awaiting_input", to_string(record.awaiting_input)}});
        step.execution = record;
        if (record.interrupted) {
            push(std::move(step));
            halted(stop_requested, run);
            if (run.state != LeafState::Aborted) {
                run.abort_reason = "kill switch";
                run.outcome = OutcomeSummary::failed("aborted by kill switch", "Aborted: kill switch");
                set_state(run, LeafState::Aborted);
            }
            return run;
        }
        feed_observation(run, step, format_observation(record));
        push(std::move(step));
    }
    finish(run, OutcomeSummary::failed("step budget of " + std::to_string(config_.max_steps) + " exhausted",
                                       "step budget exhausted"));
    return run;
}

}  // namespace redteam
