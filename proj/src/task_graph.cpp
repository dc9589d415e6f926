#include "redteam/task_graph.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <set>
#include <utility>

#include "redteam/error.hpp"

namespace redteam {

namespace {

constexpr std::array<std::pair<NodeStatus, std::string_view>, 7> kStatusNames{{
    {NodeStatus::Pending, "Pending"},
    {NodeStatus::Decomposed, "Decomposed"},
    {NodeStatus::Executing, "Executing"},
    {NodeStatus::Succeeded, "Succeeded"},
    {NodeStatus::Failed, "Failed"},
    {NodeStatus::Corrected, "Corrected"},
    {NodeStatus::Cancelled, "Cancelled"},
}};

std::string format_id(std::uint64_t n) {
    char buf[24];
    std::snprintf(buf, sizeof buf, "n%08llu", static_cast<unsigned long long>(n));
    return buf;
}

[[noreturn]] void schema_error(const std::string& path, const std::string& what) {
    throw Error(ErrorCode::ParseError, "at " + path + ": " + what);
}

}  // namespace

std::string_view to_string(NodeStatus status) noexcept {
    for (const auto& [s, name] : kStatusNames) {
        if (s == status) return name;
    }
    return "?";
}

std::optional<NodeStatus> parse_node_status(std::string_view text) noexcept {
    for (const auto& [s, name] : kStatusNames) {
        if (name == text) return s;
    }
    return std::nullopt;
}

bool is_terminal(NodeStatus status) noexcept {
    switch (status) {
        case NodeStatus::Succeeded:
        case NodeStatus::Failed:
        case NodeStatus::Corrected:
        case NodeStatus::Cancelled:
            return true;
        default:
            return false;
    }
}

bool is_legal_transition(NodeStatus from, NodeStatus to) noexcept {
    using S = NodeStatus;
    switch (from) {
        case S::Pending:
            return to == S::Decomposed || to == S::Executing || to == S::Cancelled;
        case S::Executing:
            return to == S::Succeeded || to == S::Failed || to == S::Cancelled;
        case S::Failed:
            return to == S::Corrected;
        case S::Decomposed:
            return to == S::Succeeded || to == S::Failed || to == S::Cancelled;
        case S::Corrected:
            return to == S::Decomposed;
        default:
            return false;
    }
}

OutcomeSummary OutcomeSummary::succeeded(std::string summary, std::string transcript_ref) {
    return OutcomeSummary{true, std::move(summary), std::nullopt, std::move(transcript_ref)};
}

OutcomeSummary OutcomeSummary::failed(std::string summary, std::string reason, std::string transcript_ref) {
    return OutcomeSummary{false, std::move(summary), std::move(reason), std::move(transcript_ref)};
}

NodeMetrics& NodeMetrics::operator+=(const NodeMetrics& other) noexcept {
    api_calls_reason += other.api_calls_reason;
    api_calls_act += other.api_calls_act;
    api_calls_summarizer += other.api_calls_summarizer;
    tool_calls += other.tool_calls;
    api_calls_planner += other.api_calls_planner;
    api_calls_corrector += other.api_calls_corrector;
    return *this;
}

NodeStatus derive_status(std::span<const NodeStatus> child_statuses) noexcept {
    bool any_live = false;
    bool any_failed = false;
    bool all_cancelled = true;
    for (NodeStatus s : child_statuses) {
        if (s == NodeStatus::Cancelled) continue;
        all_cancelled = false;
        if (!is_terminal(s)) any_live = true;
        if (s == NodeStatus::Failed) any_failed = true;
    }
    if (child_statuses.empty()) return NodeStatus::Decomposed;
    if (all_cancelled) return NodeStatus::Cancelled;
    if (any_live) return NodeStatus::Decomposed;
    return any_failed ? NodeStatus::Failed : NodeStatus::Succeeded;
}

PlanTree PlanTree::create_root(std::string description) {
    if (description.empty()) throw Error(ErrorCode::EmptyDescription, "root task description is empty");
    PlanTree tree;
    TaskNode root;
    root.id = tree.allocate_id();
    root.description = std::move(description);
    tree.root_ = root.id;
    tree.nodes_.emplace(root.id, std::move(root));
    return tree;
}

const TaskNode& PlanTree::node(const NodeId& id) const {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw Error(ErrorCode::UnknownNode, id);
    return it->second;
}

TaskNode& PlanTree::mutable_node(const NodeId& id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw Error(ErrorCode::UnknownNode, id);
    return it->second;
}

NodeId PlanTree::allocate_id() { return format_id(next_id_++); }

void PlanTree::notify(const TreeChange& change) const {
    if (observer_) observer_(change);
}

void PlanTree::set_status(TaskNode& n, NodeStatus to) {
    if (n.status == to) return;
    n.status = to;
    notify({TreeChange::Kind::StatusChanged, n.id, n.parent, to, {}});
}

std::vector<NodeId> PlanTree::add_children(const NodeId& parent_id, std::span<const std::string> descriptions) {
    TaskNode& parent = mutable_node(parent_id);
    if (parent.status != NodeStatus::Pending && parent.status != NodeStatus::Corrected) {
        throw Error(ErrorCode::InvalidStatus,
                    "cannot decompose " + parent_id + " in status " + std::string(to_string(parent.status)));
    }
    if (descriptions.empty()) throw Error(ErrorCode::EmptyDescription, "no subtasks given for " + parent_id);
    for (const auto& d : descriptions) {
        if (d.empty()) throw Error(ErrorCode::EmptyDescription, "empty subtask description under " + parent_id);
    }
    std::vector<NodeId> ids;
    ids.reserve(descriptions.size());
    const std::uint32_t depth = parent.depth + 1;
    set_status(parent, NodeStatus::Decomposed);
    for (const auto& d : descriptions) {
        TaskNode child;
        child.id = allocate_id();
        child.description = d;
        child.depth = depth;
        child.parent = parent_id;
        ids.push_back(child.id);
        nodes_.at(parent_id).children.push_back(child.id);
        auto [it, _] = nodes_.emplace(child.id, std::move(child));
        notify({TreeChange::Kind::NodeAdded, it->first, parent_id, NodeStatus::Pending, it->second.description});
    }
    ++version_;
    rederive_from(parent.parent);
    return ids;
}

std::vector<NodeId> PlanTree::insert_after(const NodeId& anchor, std::span<const std::string> descriptions) {
    const TaskNode& a = node(anchor);
    if (!a.parent) throw Error(ErrorCode::InvalidStatus, "root has no siblings");
    for (const auto& d : descriptions) {
        if (d.empty()) throw Error(ErrorCode::EmptyDescription, "empty replacement description");
    }
    const NodeId parent_id = *a.parent;
    const std::uint32_t depth = a.depth;
    std::vector<NodeId> ids;
    for (const auto& d : descriptions) {
        TaskNode child;
        child.id = allocate_id();
        child.description = d;
        child.depth = depth;
        child.parent = parent_id;
        ids.push_back(child.id);
        nodes_.emplace(child.id, std::move(child));
    }
    auto& siblings = mutable_node(parent_id).children;
    auto pos = std::find(siblings.begin(), siblings.end(), anchor);
    siblings.insert(pos + 1, ids.begin(), ids.end());
    for (const auto& id : ids) {
        notify({TreeChange::Kind::NodeAdded, id, parent_id, NodeStatus::Pending, nodes_.at(id).description});
    }
    ++version_;
    rederive_from(parent_id);
    return ids;
}

void PlanTree::transition(const NodeId& id, NodeStatus to, std::optional<OutcomeSummary> outcome) {
    TaskNode& n = mutable_node(id);
    if (!n.is_leaf()) {
        throw Error(ErrorCode::IllegalTransition,
                    std::string(to_string(n.status)) + "->" + std::string(to_string(to)) +
                        " on decomposed node " + id + " (status is derived)");
    }
    if (!is_legal_transition(n.status, to) || to == NodeStatus::Decomposed) {
        throw Error(ErrorCode::IllegalTransition,
                    std::string(to_string(n.status)) + "->" + std::string(to_string(to)) + " on " + id);
    }
    if (outcome && is_terminal(to)) n.outcome = std::move(outcome);
    set_status(n, to);
    ++version_;
    rederive_from(n.parent);
}

void PlanTree::set_description(const NodeId& id, std::string description) {
    TaskNode& n = mutable_node(id);
    if (n.status != NodeStatus::Pending) {
        throw Error(ErrorCode::InvalidStatus, "only Pending nodes can be edited: " + id);
    }
    if (description.empty()) throw Error(ErrorCode::EmptyDescription, "empty description for " + id);
    n.description = std::move(description);
    ++version_;
    notify({TreeChange::Kind::DescriptionChanged, id, n.parent, n.status, n.description});
}

void PlanTree::set_outcome(const NodeId& id, OutcomeSummary outcome) {
    TaskNode& n = mutable_node(id);
    n.outcome = std::move(outcome);
    ++version_;
}

void PlanTree::add_metrics(const NodeId& id, const NodeMetrics& delta) {
    mutable_node(id).metrics += delta;
    ++version_;
}

NodeMetrics PlanTree::totals() const {
    NodeMetrics total;
    for (const auto& [_, n] : nodes_) total += n.metrics;
    return total;
}

std::vector<NodeId> PlanTree::preorder() const {
    std::vector<NodeId> out;
    std::vector<NodeId> stack{root_};
    while (!stack.empty()) {
        NodeId id = std::move(stack.back());
        stack.pop_back();
        const TaskNode& n = nodes_.at(id);
        out.push_back(id);
        for (auto it = n.children.rbegin(); it != n.children.rend(); ++it) stack.push_back(*it);
    }
    return out;
}

std::vector<NodeId> PlanTree::leaves() const {
    std::vector<NodeId> out;
    for (auto& id : preorder()) {
        if (nodes_.at(id).is_leaf()) out.push_back(id);
    }
    return out;
}

std::optional<NodeId> PlanTree::first_pending_leaf() const {
    for (auto& id : leaves()) {
        if (nodes_.at(id).status == NodeStatus::Pending) return id;
    }
    return std::nullopt;
}

PlanTree::DerivationHold::DerivationHold(PlanTree& tree) noexcept : tree_(&tree) { ++tree_->holds_; }

PlanTree::DerivationHold::~DerivationHold() {
    if (--tree_->holds_ == 0) tree_->rederive_all();
}

void PlanTree::rederive_from(const std::optional<NodeId>& start) {
    if (holds_ > 0) return;
    std::optional<NodeId> cursor = start;
    std::vector<NodeStatus> statuses;
    while (cursor) {
        TaskNode& n = nodes_.at(*cursor);
        statuses.clear();
        for (const auto& c : n.children) statuses.push_back(nodes_.at(c).status);
        set_status(n, derive_status(statuses));
        cursor = n.parent;
    }
}

void PlanTree::rederive_all() {
    // Post-order so every parent sees settled children.
    auto order = preorder();
    std::vector<NodeStatus> statuses;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TaskNode& n = nodes_.at(*it);
        if (n.is_leaf()) continue;
        statuses.clear();
        for (const auto& c : n.children) statuses.push_back(nodes_.at(c).status);
        set_status(n, derive_status(statuses));
    }
}

std::vector<std::string> PlanTree::check_invariants() const {
    std::vector<std::string> problems;
    auto it = nodes_.find(root_);
    if (it == nodes_.end()) {
        problems.push_back("root missing");
        return problems;
    }
    if (it->second.depth != 0 || it->second.parent) problems.push_back("root must have depth 0 and no parent");

    std::set<NodeId> seen;
    std::vector<NodeId> stack{root_};
    while (!stack.empty()) {
        NodeId id = stack.back();
        stack.pop_back();
        if (!seen.insert(id).second) {
            problems.push_back("cycle or shared child at " + id);
            continue;
        }
        const TaskNode& n = nodes_.at(id);
        std::vector<NodeStatus> statuses;
        for (const auto& c : n.children) {
            auto ci = nodes_.find(c);
            if (ci == nodes_.end()) {
                problems.push_back("dangling child " + c + " of " + id);
                continue;
            }
            if (ci->second.parent != id) problems.push_back("parent link mismatch at " + c);
            if (ci->second.depth != n.depth + 1) problems.push_back("depth mismatch at " + c);
            statuses.push_back(ci->second.status);
            stack.push_back(c);
        }
        if (!n.is_leaf() && holds_ == 0 && n.status != derive_status(statuses)) {
            problems.push_back("derived status mismatch at " + id);
        }
        if (n.is_leaf() && n.status == NodeStatus::Decomposed) problems.push_back("Decomposed leaf " + id);
        if (n.metrics.tool_calls > n.metrics.api_calls_act) problems.push_back("tool_calls > api_calls_act at " + id);
        if (n.outcome && n.outcome->success == n.outcome->failure_reason.has_value()) {
            problems.push_back("failure_reason presence mismatch at " + id);
        }
    }
    if (seen.size() != nodes_.size()) problems.push_back("unreachable nodes present");
    return problems;
}

void to_json(nlohmann::json& j, const OutcomeSummary& o) {
    j = nlohmann::json{{"success", o.success},
                       {"summary", o.summary},
                       {"failure_reason", o.failure_reason ? nlohmann::json(*o.failure_reason) : nlohmann::json()},
                       {"transcript_ref", o.transcript_ref}};
}

void from_json(const nlohmann::json& j, OutcomeSummary& o) {
    o.success = j.at("success").get<bool>();
    o.summary = j.at("summary").get<std::string>();
    const auto& fr = j.at("failure_reason");
    o.failure_reason = fr.is_null() ? std::nullopt : std::optional<std::string>(fr.get<std::string>());
    o.transcript_ref = j.at("transcript_ref").get<std::string>();
}

void to_json(nlohmann::json& j, const NodeMetrics& m) {
    j = nlohmann::json{{"api_calls_reason", m.api_calls_reason},
                       {"api_calls_act", m.api_calls_act},
                       {"api_calls_summarizer", m.api_calls_summarizer},
                       {"tool_calls", m.tool_calls},
                       {"api_calls_planner", m.api_calls_planner},
                       {"api_calls_corrector", m.api_calls_corrector}};
}

void from_json(const nlohmann::json& j, NodeMetrics& m) {
    m.api_calls_reason = j.at("api_calls_reason").get<std::uint64_t>();
    m.api_calls_act = j.at("api_calls_act").get<std::uint64_t>();
    m.api_calls_summarizer = j.at("api_calls_summarizer").get<std::uint64_t>();
    m.tool_calls = j.at("tool_calls").get<std::uint64_t>();
    m.api_calls_planner = j.value("api_calls_planner", std::uint64_t{0});
    m.api_calls_corrector = j.value("api_calls_corrector", std::uint64_t{0});
}

nlohmann::json PlanTree::to_json() const {
    nlohmann::json nodes = nlohmann::json::array();
    for (const auto& [id, n] : nodes_) {
        nodes.push_back({{"id", n.id},
                         {"description", n.description},
                         {"depth", n.depth},
                         {"parent", n.parent ? nlohmann::json(*n.parent) : nlohmann::json()},
                         {"children", n.children},
                         {"status", to_string(n.status)},
                         {"outcome", n.outcome ? nlohmann::json(*n.outcome) : nlohmann::json()},
                         {"metrics", n.metrics}});
    }
    return {{"schema_version", kSchemaVersion}, {"root", root_}, {"next_id", next_id_}, {"nodes", std::move(nodes)}};
}

std::string PlanTree::snapshot() const { return to_json().dump(2); }

PlanTree PlanTree::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) schema_error("/", "document is not an object");
    if (!doc.contains("schema_version")) schema_error("/schema_version", "missing");
    if (doc["schema_version"] != kSchemaVersion) schema_error("/schema_version", "unsupported version");
    PlanTree tree;
    try {
        tree.root_ = doc.at("root").get<std::string>();
        tree.next_id_ = doc.at("next_id").get<std::uint64_t>();
        const auto& nodes = doc.at("nodes");
        if (!nodes.is_array()) schema_error("/nodes", "not an array");
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            const auto& jn = nodes[i];
            const std::string path = "/nodes/" + std::to_string(i);
            TaskNode n;
            n.id = jn.at("id").get<std::string>();
            n.description = jn.at("description").get<std::string>();
            n.depth = jn.at("depth").get<std::uint32_t>();
            if (!jn.at("parent").is_null()) n.parent = jn.at("parent").get<std::string>();
            n.children = jn.at("children").get<std::vector<std::string>>();
            auto status = parse_node_status(jn.at("status").get<std::string>());
            if (!status) schema_error(path + "/status", "unknown status");
            n.status = *status;
            if (!jn.at("outcome").is_null()) n.outcome = jn.at("outcome").get<OutcomeSummary>();
            n.metrics = jn.at("metrics").get<NodeMetrics>();
            if (!tree.nodes_.emplace(n.id, n).second) schema_error(path + "/id", "duplicate id " + n.id);
        }
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("schema: ") + e.what());
    }
    auto problems = tree.check_invariants();
    if (!problems.empty()) schema_error("/nodes", "invalid tree: " + problems.front());
    return tree;
}

PlanTree PlanTree::restore(std::string_view document) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(document);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::ParseError, e.what()).at(e.byte);
    }
    return from_json(doc);
}

}  // namespace redteam
