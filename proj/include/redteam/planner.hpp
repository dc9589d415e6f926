#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "redteam/audit_log.hpp"
#include "redteam/kill_switch.hpp"
#include "redteam/llm_gateway.hpp"
#include "redteam/memory.hpp"
#include "redteam/plan_corrector.hpp"
#include "redteam/react_engine.hpp"
#include "redteam/task_graph.hpp"

namespace redteam {

struct PlanRequest {
    std::string description;
    std::size_t depth = 0;
    std::size_t max_depth = 3;
    std::vector<MemoryHit> memory_hits;  // similarity descending
    std::vector<std::string> prior_sibling_outcomes;
    std::vector<std::string> path;  // ancestor descriptions, root first
};

struct PlanDecision {
    enum class Kind : std::uint8_t { ExecuteAsLeaf, Decompose };
    Kind kind = Kind::ExecuteAsLeaf;
    std::vector<std::string> subtasks;
    bool forced = false;  // depth cap, no planner call made

    [[nodiscard]] bool decompose() const noexcept { return kind == Kind::Decompose; }
};

/// DECISION: EXECUTE | DECISION: DECOMPOSE + two or more SUBTASK: lines.
/// Throws PlanParseError.
PlanDecision parse_plan_decision(std::string_view completion);

/// Memory block lines: "[0.91] [FAILED] description | failure: ...".
std::vector<std::string> memory_digests(const std::vector<MemoryHit>& hits, std::size_t max_chars = 300);

std::string planner_message(const PlanRequest& request);

struct PlannerConfig {
    std::size_t max_depth = 3;
    std::size_t memory_k = 5;
    std::size_t digest_chars = 300;
    bool use_memory = true;
};

class Planner {
public:
    Planner(LlmGateway& gateway, const MemoryStore* memory, Embedder* embedder, PlannerConfig config);

    /// One planner completion (plus one retry on a malformed answer).
    PlanDecision plan(const PlanRequest& request, NodeMetrics* metrics = nullptr);

    /// Top-k hits for `description`, never from `run_id`. Empty when memory is off.
    std::vector<MemoryHit> recall(const std::string& description, const std::string& run_id) const;

    [[nodiscard]] const PlannerConfig& config() const noexcept { return config_; }

private:
    LlmGateway& gateway_;
    const MemoryStore* memory_;
    Embedder* embedder_;
    PlannerConfig config_;
};

/// "desc: SUCCEEDED - summary" style line handed to later siblings.
std::string outcome_line(const TaskNode& node);

/// Depth-first, left-to-right execution of a plan tree with decompose-on-arrival,
/// forward sibling propagation and plan correction on leaf failure.
class Traversal {
public:
    using LeafExecutor = std::function<LeafRun(const LeafContext&)>;
    using LeafListener = std::function<void(const NodeId&, const LeafRun&)>;

    struct Hooks {
        LeafExecutor execute_leaf;
        LeafListener leaf_finished;
        std::function<bool()> stop_requested;
        std::function<void(const PlanRevision&)> revision_applied;
    };

    Traversal(PlanTree& tree, std::mutex& tree_mutex, Planner& planner, PlanCorrector* corrector, Hooks hooks,
              std::string run_id, AuditLog* audit, std::shared_ptr<const KillSwitch> kill_switch);

    /// Throws Aborted on kill switch or stop.
    void run();

    [[nodiscard]] const std::vector<NodeId>& executed_leaves() const noexcept { return executed_; }
    [[nodiscard]] const std::vector<LeafContext>& leaf_contexts() const noexcept { return contexts_; }

private:
    // false: the subtree failed beyond repair and later siblings are cancelled.
    bool visit(const NodeId& id, const std::vector<std::string>& path, const std::vector<std::string>& inherited);
    bool handle_failure(const NodeId& id, const OutcomeSummary& outcome, const std::string& observation);
    void check_abort();
    void cancel_pending_after(const NodeId& parent, std::size_t index);
    void audit(std::string_view kind, nlohmann::json payload);

    PlanTree& tree_;
    std::mutex& tree_mutex_;
    Planner& planner_;
    PlanCorrector* corrector_;
    Hooks hooks_;
    std::string run_id_;
    AuditLog* audit_;
    std::shared_ptr<const KillSwitch> kill_switch_;
    std::vector<NodeId> executed_;
    std::vector<LeafContext> contexts_;
};

}  // namespace redteam
