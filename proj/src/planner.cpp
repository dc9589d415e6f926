#include "redteam/planner.hpp"

#include <cctype>
#include <cstdio>
#include <sstream>

#include "redteam/error.hpp"
#include "redteam/prompts.hpp"

namespace redteam {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::string upper(std::string_view s) {
    std::string out(s);
    for (auto& c : out) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    return out;
}

}  // namespace

PlanDecision parse_plan_decision(std::string_view completion) {
    std::optional<std::string> decision;
    std::vector<std::string> subtasks;
    std::istringstream ss{std::string(completion)};
    std::string raw;
    while (std::getline(ss, raw)) {
        std::string_view line = trim(raw);
        if (line.substr(0, 9) == "DECISION:") {
            if (decision) throw Error(ErrorCode::PlanParseError, "more than one DECISION line");
            decision = upper(trim(line.substr(9)));
        } else if (line.substr(0, 8) == "SUBTASK:") {
            std::string_view d = trim(line.substr(8));
            if (d.empty()) throw Error(ErrorCode::PlanParseError, "empty SUBTASK line");
            subtasks.emplace_back(d);
        }
    }
    if (!decision) throw Error(ErrorCode::PlanParseError, "no DECISION line");
    PlanDecision out;
    if (*decision == "EXECUTE") return out;
    if (*decision != "DECOMPOSE") throw Error(ErrorCode::PlanParseError, "unknown decision " + *decision);
    if (subtasks.size() < 2)
        throw Error(ErrorCode::PlanParseError, "DECOMPOSE needs at least two SUBTASK lines, got " +
                                                   std::to_string(subtasks.size()));
    out.kind = PlanDecision::Kind::Decompose;
    out.subtasks = std::move(subtasks);
    return out;
}

std::vector<std::string> memory_digests(const std::vector<MemoryHit>& hits, std::size_t max_chars) {
    std::vector<std::string> out;
    out.reserve(hits.size());
    for (const auto& h : hits) {
        char sim[16];
        std::snprintf(sim, sizeof sim, "[%.2f] ", h.similarity);
        out.push_back(sim + digest(h.record, max_chars));
    }
    return out;
}

std::string planner_message(const PlanRequest& r) {
    std::ostringstream ss;
    ss << "TASK: " << r.description << "\n";
    ss << "DEPTH: " << r.depth << " of at most " << r.max_depth << "\n";
    if (!r.path.empty()) {
        ss << "PARENT TASKS:\n";
        for (const auto& p : r.path) ss << "- " << p << "\n";
    }
    if (!r.prior_sibling_outcomes.empty()) {
        ss << "RESULTS OF EARLIER SUBTASKS:\n";
        for (const auto& o : r.prior_sibling_outcomes) ss << "- " << o << "\n";
    }
    if (!r.memory_hits.empty()) {
        ss << "MEMORY:\n";
        for (const auto& d : memory_digests(r.memory_hits)) ss << "- " << d << "\n";
    }
    return ss.str();
}

Planner::Planner(LlmGateway& gateway, const MemoryStore* memory, Embedder* embedder, PlannerConfig config)
    : gateway_(gateway), memory_(memory), embedder_(embedder), config_(config) {}

std::vector<MemoryHit> Planner::recall(const std::string& description, const std::string& run_id) const {
    if (!config_.use_memory || !memory_ || !embedder_ || memory_->size() == 0 || config_.memory_k == 0) return {};
    return memory_->query(description, config_.memory_k, *embedder_, run_id);
}

PlanDecision Planner::plan(const PlanRequest& request, NodeMetrics* metrics) {
    if (request.depth >= request.max_depth) {
        PlanDecision forced;
        forced.forced = true;
        return forced;
    }
    ChatTranscript t(SessionKind::Planner);
    t.append(Role::System, std::string(prompts::kPlannerSystem));
    t.append(Role::User, planner_message(request));
    for (int attempt = 0;; ++attempt) {
        Completion c = gateway_.complete(t);
        if (metrics) ++metrics->api_calls_planner;
        try {
            return parse_plan_decision(c.text);
        } catch (const Error& e) {
            if (attempt > 0) throw;
            t.append(Role::User, std::string("Your answer could not be parsed (") + e.what() +
                                     "). Answer again in the exact DECISION/SUBTASK format.");
        }
    }
}

std::string outcome_line(const TaskNode& node) {
    std::string line = node.description + ": " + std::string(to_string(node.status));
    if (node.outcome) {
        if (!node.outcome->summary.empty()) line += " - " + node.outcome->summary;
        if (node.outcome->failure_reason && *node.outcome->failure_reason != node.outcome->summary)
            line += " (" + *node.outcome->failure_reason + ")";
    }
    return line;
}

Traversal::Traversal(PlanTree& tree, std::mutex& tree_mutex, Planner& planner, PlanCorrector* corrector, Hooks hooks,
                     std::string run_id, AuditLog* audit, std::shared_ptr<const KillSwitch> kill_switch)
    : tree_(tree),
      tree_mutex_(tree_mutex),
      planner_(planner),
      corrector_(corrector),
      hooks_(std::move(hooks)),
      run_id_(std::move(run_id)),
      audit_(audit),
      kill_switch_(std::move(kill_switch)) {
    if (!hooks_.execute_leaf) throw Error(ErrorCode::ConfigError, "traversal needs a leaf executor");
}

void Traversal::audit(std::string_view kind, nlohmann::json payload) {
    if (audit_) audit_->append("agent:" + run_id_, kind, std::move(payload));
}

void Traversal::check_abort() {
    if (kill_switch_ && kill_switch_->active()) throw Error(ErrorCode::Aborted, "kill switch");
    if (hooks_.stop_requested && hooks_.stop_requested()) throw Error(ErrorCode::Aborted, "operator stop");
}

void Traversal::run() {
    std::vector<std::string> none;
    visit(tree_.root_id(), none, none);
}

void Traversal::cancel_pending_after(const NodeId& parent, std::size_t index) {
    std::lock_guard lock(tree_mutex_);
    auto hold = tree_.hold_derivation();
    const auto children = tree_.node(parent).children;
    std::vector<NodeId> stack(children.begin() + static_cast<std::ptrdiff_t>(index + 1), children.end());
    while (!stack.empty()) {
        const NodeId id = stack.back();
        stack.pop_back();
        const auto& n = tree_.node(id);
        if (n.status == NodeStatus::Pending) tree_.transition(id, NodeStatus::Cancelled);
        stack.insert(stack.end(), n.children.begin(), n.children.end());
    }
}

bool Traversal::visit(const NodeId& id, const std::vector<std::string>& path,
                      const std::vector<std::string>& inherited) {
    check_abort();
    TaskNode node;
    {
        std::lock_guard lock(tree_mutex_);
        node = tree_.node(id);
    }
    if (is_terminal(node.status) || node.status == NodeStatus::Executing) return true;

    if (node.status == NodeStatus::Pending && node.is_leaf()) {
        std::vector<MemoryHit> hits = planner_.recall(node.description, run_id_);
        PlanRequest request{node.description, node.depth, planner_.config().max_depth, hits, inherited, path};
        NodeMetrics m;
        PlanDecision decision = planner_.plan(request, &m);
        {
            std::lock_guard lock(tree_mutex_);
            tree_.add_metrics(id, m);
            if (decision.decompose()) tree_.add_children(id, decision.subtasks);
        }
        audit(audit_kind::Planned, {{"run_id", run_id_},
                                    {"node_id", id},
                                    {"decision", decision.decompose() ? "DECOMPOSE" : "EXECUTE"},
                                    {"subtasks", decision.subtasks},
                                    {"forced", decision.forced},
                                    {"memory_hits", hits.size()}});

        if (!decision.decompose()) {
            check_abort();
            LeafContext ctx{run_id_, id, node.description, path, inherited, memory_digests(hits)};
            {
                std::lock_guard lock(tree_mutex_);
                tree_.transition(id, NodeStatus::Executing);
            }
            LeafRun leaf = hooks_.execute_leaf(ctx);
            executed_.push_back(id);
            contexts_.push_back(ctx);
            OutcomeSummary outcome =
                leaf.outcome.value_or(OutcomeSummary::failed("leaf produced no outcome", "no outcome"));
            outcome.transcript_ref = "transcripts/" + id + ".json";
            {
                std::lock_guard lock(tree_mutex_);
                tree_.add_metrics(id, leaf.metrics);
            }
            if (hooks_.leaf_finished) hooks_.leaf_finished(id, leaf);
            if (leaf.state == LeafState::Aborted) {
                {
                    std::lock_guard lock(tree_mutex_);
                    tree_.transition(id, NodeStatus::Cancelled, outcome);
                }
                throw Error(ErrorCode::Aborted, leaf.abort_reason.empty() ? "aborted" : leaf.abort_reason);
            }
            if (outcome.success) {
                std::lock_guard lock(tree_mutex_);
                tree_.transition(id, NodeStatus::Succeeded, outcome);
            } else {
                std::string observation = outcome.failure_reason.value_or(outcome.summary);
                if (!leaf.steps.empty() && !leaf.steps.back().observation.empty())
                    observation += "\nLAST OBSERVATION:\n" + leaf.steps.back().observation;
                if (!handle_failure(id, outcome, observation)) return false;
            }
            std::lock_guard lock(tree_mutex_);
            // A corrected root leaf gains children; everything else is done here.
            if (tree_.node(id).is_leaf()) return true;
            node = tree_.node(id);
        }
    }

    std::vector<std::string> outcomes = inherited;
    std::vector<std::string> child_path = path;
    child_path.push_back(node.description);
    for (std::size_t i = 0;; ++i) {
        NodeId child;
        {
            std::lock_guard lock(tree_mutex_);
            const auto& children = tree_.node(id).children;
            if (i >= children.size()) break;
            child = children[i];
        }
        const bool ok = visit(child, child_path, outcomes);
        {
            std::lock_guard lock(tree_mutex_);
            const auto& c = tree_.node(child);
            if (is_terminal(c.status) && c.status != NodeStatus::Cancelled) outcomes.push_back(outcome_line(c));
        }
        if (!ok) {
            cancel_pending_after(id, i);
            break;
        }
    }

    std::lock_guard lock(tree_mutex_);
    const TaskNode& done = tree_.node(id);
    if (is_terminal(done.status) && !done.is_leaf()) {
        std::string summary;
        for (const auto& c : done.children) {
            const auto& cn = tree_.node(c);
            if (!cn.outcome || cn.status == NodeStatus::Cancelled) continue;
            if (!summary.empty()) summary += "; ";
            summary += cn.outcome->summary;
        }
        if (summary.size() > 600) summary = summary.substr(0, 600) + "...";
        if (done.status == NodeStatus::Succeeded) {
            tree_.set_outcome(id, OutcomeSummary::succeeded(summary));
        } else {
            std::string reason = "subtask failed";
            for (const auto& c : done.children) {
                const auto& cn = tree_.node(c);
                if (cn.status == NodeStatus::Failed && cn.outcome && cn.outcome->failure_reason) {
                    reason = *cn.outcome->failure_reason;
                    break;
                }
            }
            tree_.set_outcome(id, OutcomeSummary::failed(summary.empty() ? reason : summary, reason));
        }
    }
    return true;
}

bool Traversal::handle_failure(const NodeId& id, const OutcomeSummary& outcome, const std::string& observation) {
    std::unique_lock lock(tree_mutex_);
    if (!corrector_ || !corrector_->config().enabled) {
        tree_.transition(id, NodeStatus::Failed, outcome);
        return false;
    }
    std::optional<PlanTree::DerivationHold> hold;
    hold.emplace(tree_);
    tree_.transition(id, NodeStatus::Failed, outcome);
    for (int tries = 0; tries < 2; ++tries) {
        PlanTree snapshot = tree_;
        lock.unlock();
        NodeMetrics m;
        PlanRevision revision;
        try {
            revision = corrector_->correct(snapshot, id, observation, run_id_, &m);
        } catch (const Error& e) {
            lock.lock();
            tree_.add_metrics(id, m);
            hold.reset();
            if (e.code() != ErrorCode::CorrectionExhausted) throw;
            lock.unlock();
            audit(audit_kind::Corrected,
                  {{"run_id", run_id_}, {"failed_node_id", id}, {"exhausted", true}, {"reason", e.what()}});
            return false;
        }
        lock.lock();
        try {
            corrector_->apply(tree_, revision);
        } catch (const Error& e) {
            if (e.code() == ErrorCode::StaleRevision && tries == 0) continue;
            hold.reset();
            throw;
        }
        tree_.add_metrics(id, m);
        hold.reset();
        lock.unlock();
        nlohmann::json payload = revision;
        payload["run_id"] = run_id_;
        audit(audit_kind::Corrected, std::move(payload));
        if (hooks_.revision_applied) hooks_.revision_applied(revision);
        return true;
    }
    hold.reset();
    return false;
}

}  // namespace redteam
