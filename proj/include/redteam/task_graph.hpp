#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace redteam {

using NodeId = std::string;

enum class NodeStatus : std::uint8_t {
    Pending,
    Decomposed,
    Executing,
    Succeeded,
    Failed,
    Corrected,
    Cancelled,
};

std::string_view to_string(NodeStatus status) noexcept;
std::optional<NodeStatus> parse_node_status(std::string_view text) noexcept;

/// True for Succeeded, Failed, Corrected and Cancelled.
bool is_terminal(NodeStatus status) noexcept;

/// The explicit (non-derived) transition table.
bool is_legal_transition(NodeStatus from, NodeStatus to) noexcept;

struct OutcomeSummary {
    bool success = false;
    std::string summary;
    std::optional<std::string> failure_reason;  // present iff !success
    std::string transcript_ref;

    static OutcomeSummary succeeded(std::string summary, std::string transcript_ref = {});
    static OutcomeSummary failed(std::string summary, std::string reason, std::string transcript_ref = {});

    bool operator==(const OutcomeSummary&) const = default;
};

struct NodeMetrics {
    std::uint64_t api_calls_reason = 0;
    std::uint64_t api_calls_act = 0;
    std::uint64_t api_calls_summarizer = 0;
    std::uint64_t tool_calls = 0;
    // Planning traffic is attributed to the node being planned or corrected.
    std::uint64_t api_calls_planner = 0;
    std::uint64_t api_calls_corrector = 0;

    NodeMetrics& operator+=(const NodeMetrics& other) noexcept;
    bool operator==(const NodeMetrics&) const = default;
};

struct TaskNode {
    NodeId id;
    std::string description;
    std::uint32_t depth = 0;
    std::optional<NodeId> parent;
    std::vector<NodeId> children;
    NodeStatus status = NodeStatus::Pending;
    std::optional<OutcomeSummary> outcome;
    NodeMetrics metrics;

    [[nodiscard]] bool is_leaf() const noexcept { return children.empty(); }
    bool operator==(const TaskNode&) const = default;
};

struct TreeChange {
    enum class Kind : std::uint8_t { NodeAdded, StatusChanged, DescriptionChanged };
    Kind kind;
    NodeId node_id;
    std::optional<NodeId> parent;
    NodeStatus status;
    std::string description;
};

/// Status of a decomposed node as a pure function of its children's statuses.
/// All-cancelled children yield Cancelled; any live child keeps the node Decomposed.
NodeStatus derive_status(std::span<const NodeStatus> child_statuses) noexcept;

/// The recursive task tree of one run. Node ids are "n" + zero-padded counter,
/// so lexical order equals creation order.
class PlanTree {
public:
    static constexpr int kSchemaVersion = 1;

    static PlanTree create_root(std::string description);

    [[nodiscard]] const NodeId& root_id() const noexcept { return root_; }
    [[nodiscard]] const TaskNode& root() const { return node(root_); }
    [[nodiscard]] const TaskNode& node(const NodeId& id) const;
    [[nodiscard]] bool contains(const NodeId& id) const noexcept { return nodes_.contains(id); }
    [[nodiscard]] std::size_t size() const noexcept { return nodes_.size(); }
    [[nodiscard]] const std::map<NodeId, TaskNode>& nodes() const noexcept { return nodes_; }

    /// Bumped on every mutation; used to detect stale plan revisions.
    [[nodiscard]] std::uint64_t version() const noexcept { return version_; }

    /// Parent must be Pending or Corrected; it becomes Decomposed.
    std::vector<NodeId> add_children(const NodeId& parent_id, std::span<const std::string> descriptions);

    /// Inserts new Pending siblings directly after `anchor`, preserving their order.
    std::vector<NodeId> insert_after(const NodeId& anchor, std::span<const std::string> descriptions);

    void transition(const NodeId& id, NodeStatus to, std::optional<OutcomeSummary> outcome = std::nullopt);

    /// Only Pending nodes may be renamed.
    void set_description(const NodeId& id, std::string description);

    /// Attaches an aggregate outcome to a decomposed node in a terminal derived status.
    void set_outcome(const NodeId& id, OutcomeSummary outcome);

    void add_metrics(const NodeId& id, const NodeMetrics& delta);

    [[nodiscard]] NodeMetrics totals() const;

    /// Depth-first, left-to-right.
    [[nodiscard]] std::vector<NodeId> preorder() const;
    [[nodiscard]] std::vector<NodeId> leaves() const;

    /// Earliest Pending leaf in traversal order.
    [[nodiscard]] std::optional<NodeId> first_pending_leaf() const;

    /// Holds derived-status recomputation until the returned guard is destroyed,
    /// so multi-step edits (fail, then correct) publish a single consistent state.
    class DerivationHold {
    public:
        explicit DerivationHold(PlanTree& tree) noexcept;
        ~DerivationHold();
        DerivationHold(const DerivationHold&) = delete;
        DerivationHold& operator=(const DerivationHold&) = delete;

    private:
        PlanTree* tree_;
    };
    [[nodiscard]] DerivationHold hold_derivation() noexcept { return DerivationHold(*this); }

    void set_observer(std::function<void(const TreeChange&)> observer) { observer_ = std::move(observer); }

    /// Empty when every structural and status invariant holds.
    [[nodiscard]] std::vector<std::string> check_invariants() const;

    [[nodiscard]] nlohmann::json to_json() const;
    [[nodiscard]] std::string snapshot() const;
    static PlanTree from_json(const nlohmann::json& doc);
    static PlanTree restore(std::string_view document);

    bool operator==(const PlanTree& other) const noexcept {
        return root_ == other.root_ && next_id_ == other.next_id_ && nodes_ == other.nodes_;
    }

private:
    PlanTree() = default;

    TaskNode& mutable_node(const NodeId& id);
    NodeId allocate_id();
    void set_status(TaskNode& n, NodeStatus to);
    void rederive_from(const std::optional<NodeId>& start);
    void rederive_all();
    void notify(const TreeChange& change) const;

    std::map<NodeId, TaskNode> nodes_;
    NodeId root_;
    std::uint64_t next_id_ = 1;
    std::uint64_t version_ = 0;
    int holds_ = 0;
    std::function<void(const TreeChange&)> observer_;
};

void to_json(nlohmann::json& j, const OutcomeSummary& o);
void from_json(const nlohmann::json& j, OutcomeSummary& o);
void to_json(nlohmann::json& j, const NodeMetrics& m);
void from_json(const nlohmann::json& j, NodeMetrics& m);

}  // namespace redteam
