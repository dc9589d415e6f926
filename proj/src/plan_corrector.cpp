#include "redteam/plan_corrector.hpp"

#include <set>
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

bool take_tag(std::string_view line, std::string_view tag, std::string& value) {
    if (line.substr(0, tag.size()) != tag) return false;
    value = std::string(trim(line.substr(tag.size())));
    return true;
}

}  // namespace

void to_json(nlohmann::json& j, const PlanRevision& r) {
    j = {{"failed_node_id", r.failed_node_id},
         {"replacement_subtasks", r.replacement_subtasks},
         {"affected_siblings", r.affected_siblings},
         {"rationale", r.rationale},
         {"attempt_index", r.attempt_index},
         {"base_version", r.base_version}};
    auto& edits = j["description_edits"] = nlohmann::json::array();
    for (const auto& [id, d] : r.description_edits) edits.push_back({{"node_id", id}, {"description", d}});
}

void from_json(const nlohmann::json& j, PlanRevision& r) {
    r = PlanRevision{};
    r.failed_node_id = j.value("failed_node_id", std::string());
    r.replacement_subtasks = j.value("replacement_subtasks", std::vector<std::string>{});
    r.affected_siblings = j.value("affected_siblings", std::vector<std::string>{});
    r.rationale = j.value("rationale", std::string());
    r.attempt_index = j.value("attempt_index", std::size_t{0});
    r.base_version = j.value("base_version", std::uint64_t{0});
    if (j.contains("description_edits"))
        for (const auto& e : j.at("description_edits"))
            r.description_edits.emplace_back(e.at("node_id").get<std::string>(), e.at("description").get<std::string>());
}

PlanRevision parse_revision(std::string_view completion) {
    PlanRevision r;
    bool have_rationale = false;
    std::istringstream ss{std::string(completion)};
    std::string raw;
    while (std::getline(ss, raw)) {
        std::string_view line = trim(raw);
        std::string value;
        if (take_tag(line, "RATIONALE:", value)) {
            r.rationale = value;
            have_rationale = true;
        } else if (take_tag(line, "CANCEL:", value)) {
            if (value.empty()) throw Error(ErrorCode::PlanParseError, "CANCEL line without a node id");
            r.affected_siblings.push_back(value);
        } else if (take_tag(line, "REPLACE:", value)) {
            if (value.empty()) throw Error(ErrorCode::PlanParseError, "REPLACE line without a description");
            r.replacement_subtasks.push_back(value);
        }
    }
    if (!have_rationale) throw Error(ErrorCode::PlanParseError, "revision has no RATIONALE line");
    return r;
}

std::string plan_outline(const PlanTree& tree) {
    std::string out;
    for (const auto& id : tree.preorder()) {
        const auto& n = tree.node(id);
        out += std::string(2 * n.depth, ' ') + "[" + id + "] " + std::string(to_string(n.status)) + " " +
               n.description + "\n";
    }
    return out;
}

PlanCorrector::PlanCorrector(LlmGateway& gateway, const MemoryStore* memory, Embedder* embedder,
                             CorrectorConfig config)
    : gateway_(gateway), memory_(memory), embedder_(embedder), config_(config) {}

NodeId PlanCorrector::lineage_root(const NodeId& node) const {
    auto it = lineage_.find(node);
    return it == lineage_.end() ? node : it->second;
}

std::size_t PlanCorrector::attempts_for(const NodeId& node) const {
    auto it = attempts_.find(lineage_root(node));
    return it == attempts_.end() ? 0 : it->second;
}

std::string PlanCorrector::correction_message(const PlanTree& tree, const NodeId& failed_node,
                                              const std::string& observation, const std::string& run_id) const {
    const auto& n = tree.node(failed_node);
    std::ostringstream ss;
    ss << "FAILED SUBTASK: [" << failed_node << "] " << n.description << "\n";
    ss << "OBSERVATION: " << observation << "\n";
    ss << "PLAN:\n" << plan_outline(tree);
    if (memory_ && embedder_ && memory_->size() > 0) {
        auto hits = memory_->query(n.description, config_.memory_k, *embedder_, run_id);
        if (!hits.empty()) {
            ss << "MEMORY:\n";
            for (const auto& h : hits) ss << "- " << digest(h.record) << "\n";
        }
    }
    return ss.str();
}

PlanRevision PlanCorrector::correct(const PlanTree& tree, const NodeId& failed_node, const std::string& observation,
                                    const std::string& run_id, NodeMetrics* metrics) {
    const auto& n = tree.node(failed_node);
    if (n.status != NodeStatus::Failed)
        throw Error(ErrorCode::InvalidStatus, failed_node + " is " + std::string(to_string(n.status)) + ", not Failed");
    const NodeId root = lineage_root(failed_node);
    if (attempts_[root] >= config_.max_attempts_per_node)
        throw Error(ErrorCode::CorrectionExhausted,
                    "no correction attempts left for " + failed_node + " (lineage " + root + ")");
    if (total_ >= config_.global_budget)
        throw Error(ErrorCode::CorrectionExhausted, "run correction budget of " +
                                                        std::to_string(config_.global_budget) + " spent");

    ChatTranscript t(SessionKind::Corrector);
    t.append(Role::System, std::string(prompts::kCorrectorSystem));
    t.append(Role::User, correction_message(tree, failed_node, observation, run_id));
    PlanRevision revision;
    for (int attempt = 0;; ++attempt) {
        Completion c = gateway_.complete(t);
        if (metrics) ++metrics->api_calls_corrector;
        try {
            revision = parse_revision(c.text);
            break;
        } catch (const Error& e) {
            if (attempt > 0) throw;
            t.append(Role::User, std::string("Your answer could not be parsed (") + e.what() +
                                     "). Answer again using only RATIONALE:, CANCEL: and REPLACE: lines.");
        }
    }
    // Proposals may only touch the future: ids that are not Pending are dropped.
    std::vector<NodeId> cancels;
    std::set<NodeId> seen;
    for (const auto& id : revision.affected_siblings) {
        if (id == failed_node || !tree.contains(id) || tree.node(id).status != NodeStatus::Pending) continue;
        if (seen.insert(id).second) cancels.push_back(id);
    }
    revision.affected_siblings = std::move(cancels);
    revision.failed_node_id = failed_node;
    revision.attempt_index = ++attempts_[root];
    revision.base_version = tree.version();
    ++total_;
    return revision;
}

void PlanCorrector::validate(const PlanTree& tree, const PlanRevision& r) {
    if (r.base_version != tree.version())
        throw Error(ErrorCode::StaleRevision, "revision computed against version " + std::to_string(r.base_version) +
                                                  ", tree is at " + std::to_string(tree.version()));
    if (!r.failed_node_id.empty()) {
        if (!tree.contains(r.failed_node_id)) throw Error(ErrorCode::StaleRevision, "unknown node " + r.failed_node_id);
        if (tree.node(r.failed_node_id).status != NodeStatus::Failed)
            throw Error(ErrorCode::StaleRevision, r.failed_node_id + " is not Failed");
    } else if (!r.replacement_subtasks.empty()) {
        throw Error(ErrorCode::StaleRevision, "replacements need a failed node");
    }
    for (const auto& d : r.replacement_subtasks)
        if (d.empty()) throw Error(ErrorCode::EmptyDescription, "empty replacement subtask");
    std::set<NodeId> cancelled;
    for (const auto& id : r.affected_siblings) {
        if (!tree.contains(id)) throw Error(ErrorCode::StaleRevision, "unknown node " + id);
        if (tree.node(id).status != NodeStatus::Pending)
            throw Error(ErrorCode::StaleRevision, id + " is " + std::string(to_string(tree.node(id).status)) +
                                                      "; only Pending nodes can be cancelled");
        cancelled.insert(id);
    }
    for (const auto& [id, d] : r.description_edits) {
        if (!tree.contains(id)) throw Error(ErrorCode::StaleRevision, "unknown node " + id);
        if (tree.node(id).status != NodeStatus::Pending || cancelled.count(id))
            throw Error(ErrorCode::StaleRevision, id + " is not an editable Pending node");
        if (d.empty()) throw Error(ErrorCode::EmptyDescription, "empty description for " + id);
    }
}

std::vector<NodeId> apply_revision(PlanTree& tree, const PlanRevision& r) {
    PlanCorrector::validate(tree, r);
    std::vector<NodeId> added;
    auto hold = tree.hold_derivation();
    for (const auto& id : r.affected_siblings) tree.transition(id, NodeStatus::Cancelled);
    for (const auto& [id, d] : r.description_edits) tree.set_description(id, d);
    if (!r.replacement_subtasks.empty()) {
        tree.transition(r.failed_node_id, NodeStatus::Corrected);
        added = tree.node(r.failed_node_id).parent ? tree.insert_after(r.failed_node_id, r.replacement_subtasks)
                                                   : tree.add_children(r.failed_node_id, r.replacement_subtasks);
    }
    return added;
}

std::optional<NodeId> PlanCorrector::apply(PlanTree& tree, const PlanRevision& r) {
    const auto added = apply_revision(tree, r);
    if (!added.empty()) {
        const NodeId root = lineage_root(r.failed_node_id);
        for (const auto& id : added) lineage_[id] = root;
    }
    return tree.first_pending_leaf();
}

}  // namespace redteam
