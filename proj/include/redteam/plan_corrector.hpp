#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/llm_gateway.hpp"
#include "redteam/memory.hpp"
#include "redteam/task_graph.hpp"

namespace redteam {

struct PlanRevision {
    NodeId failed_node_id;  // empty for operator plan edits
    std::vector<std::string> replacement_subtasks;
    std::vector<NodeId> affected_siblings;  // Pending nodes to cancel
    std::vector<std::pair<NodeId, std::string>> description_edits;  // Pending nodes to rename
    std::string rationale;
    std::size_t attempt_index = 0;
    std::uint64_t base_version = 0;  // tree version the revision was computed against

    [[nodiscard]] bool empty() const noexcept {
        return replacement_subtasks.empty() && affected_siblings.empty() && description_edits.empty();
    }
};

void to_json(nlohmann::json& j, const PlanRevision& r);
void from_json(const nlohmann::json& j, PlanRevision& r);

/// RATIONALE:/CANCEL:/REPLACE: tagged lines; throws PlanParseError.
PlanRevision parse_revision(std::string_view completion);

struct CorrectorConfig {
    bool enabled = true;
    std::size_t max_attempts_per_node = 2;
    std::size_t global_budget = 10;
    std::size_t memory_k = 5;
};

/// Validates, then applies cancellations, edits and replacements as one
/// change. Returns the ids of inserted replacement nodes.
std::vector<NodeId> apply_revision(PlanTree& tree, const PlanRevision& revision);

/// Indented outline of the tree with ids and statuses, used in correction prompts.
std::string plan_outline(const PlanTree& tree);

class PlanCorrector {
public:
    PlanCorrector(LlmGateway& gateway, const MemoryStore* memory, Embedder* embedder, CorrectorConfig config);

    /// Asks the Corrector session for a revision of the remaining plan.
    /// Throws CorrectionExhausted, InvalidStatus, PlanParseError.
    PlanRevision correct(const PlanTree& tree, const NodeId& failed_node, const std::string& observation,
                         const std::string& run_id, NodeMetrics* metrics = nullptr);

    /// Checks ids, statuses and base version; throws StaleRevision.
    static void validate(const PlanTree& tree, const PlanRevision& revision);

    /// Validates, then applies atomically. Returns the resume point (earliest Pending leaf).
    std::optional<NodeId> apply(PlanTree& tree, const PlanRevision& revision);

    /// The correction prompt sent for a failure; exposed for inspection.
    std::string correction_message(const PlanTree& tree, const NodeId& failed_node, const std::string& observation,
                                   const std::string& run_id) const;

    [[nodiscard]] std::size_t total_corrections() const noexcept { return total_; }
    [[nodiscard]] std::size_t attempts_for(const NodeId& node) const;
    [[nodiscard]] const CorrectorConfig& config() const noexcept { return config_; }

private:
    NodeId lineage_root(const NodeId& node) const;

    LlmGateway& gateway_;
    const MemoryStore* memory_;
    Embedder* embedder_;
    CorrectorConfig config_;
    std::size_t total_ = 0;
    std::map<NodeId, std::size_t> attempts_;  // by lineage root
    std::map<NodeId, NodeId> lineage_;        // replacement -> lineage root
};

}  // namespace redteam
