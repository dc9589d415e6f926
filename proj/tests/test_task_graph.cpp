#include <gtest/gtest.h>

#include <functional>
#include <map>
#include <random>
#include <set>

#include "redteam/error.hpp"
#include "redteam/task_graph.hpp"

using namespace redteam;

namespace {

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::ConfigError;
}

// Independent model of the leaf transition table.
bool table_allows(NodeStatus from, NodeStatus to) {
    using S = NodeStatus;
    static const std::map<S, std::set<S>> table{
        {S::Pending, {S::Decomposed, S::Executing, S::Cancelled}},
        {S::Executing, {S::Succeeded, S::Failed, S::Cancelled}},
        {S::Failed, {S::Corrected}},
        {S::Decomposed, {S::Succeeded, S::Failed, S::Cancelled}},
        {S::Corrected, {S::Decomposed}},
    };
    auto it = table.find(from);
    return it != table.end() && it->second.contains(to);
}

// Brute-force recomputation of a decomposed node's status from its subtree.
NodeStatus oracle_status(const PlanTree& t, const NodeId& id) {
    const TaskNode& n = t.node(id);
    if (n.is_leaf()) return n.status;
    std::vector<NodeStatus> kids;
    for (const auto& c : n.children) kids.push_back(oracle_status(t, c));
    bool all_cancelled = true, live = false, failed = false;
    for (auto s : kids) {
        if (s == NodeStatus::Cancelled) continue;
        all_cancelled = false;
        if (s == NodeStatus::Pending || s == NodeStatus::Executing || s == NodeStatus::Decomposed) live = true;
        if (s == NodeStatus::Failed) failed = true;
    }
    if (all_cancelled) return NodeStatus::Cancelled;
    if (live) return NodeStatus::Decomposed;
    return failed ? NodeStatus::Failed : NodeStatus::Succeeded;
}

void collect_leaves(const PlanTree& t, const NodeId& id, std::vector<NodeId>& out) {
    const TaskNode& n = t.node(id);
    if (n.is_leaf()) {
        out.push_back(id);
        return;
    }
    for (const auto& c : n.children) collect_leaves(t, c, out);
}

PlanTree random_tree(std::mt19937& rng, std::size_t target_nodes) {
    PlanTree t = PlanTree::create_root("root objective");
    std::uniform_int_distribution<int> fanout(1, 3);
    while (t.size() < target_nodes) {
        std::vector<NodeId> candidates;
        for (const auto& id : t.leaves())
            if (t.node(id).status == NodeStatus::Pending && t.node(id).depth < 5) candidates.push_back(id);
        if (candidates.empty()) break;
        const NodeId& pick = candidates[std::uniform_int_distribution<std::size_t>(0, candidates.size() - 1)(rng)];
        std::vector<std::string> d;
        for (int i = fanout(rng); i > 0; --i) d.push_back("subtask " + std::to_string(t.size() + d.size()));
        t.add_children(pick, d);
    }
    return t;
}

}  // namespace

TEST(TaskGraph, CreateRootIsSinglePendingLeaf) {
    PlanTree t = PlanTree::create_root("Obtain root access to 10.0.0.5");
    EXPECT_EQ(t.size(), 1u);
    EXPECT_EQ(t.root().status, NodeStatus::Pending);
    EXPECT_EQ(t.root().depth, 0u);
    EXPECT_TRUE(t.root().children.empty());
    EXPECT_EQ(t.leaves(), std::vector<NodeId>{t.root_id()});
}

TEST(TaskGraph, EmptyRootDescriptionRejected) {
    EXPECT_EQ(code_of([] { PlanTree::create_root(""); }), ErrorCode::EmptyDescription);
}

TEST(TaskGraph, AddChildrenKeepsOrderAndDepth) {
    PlanTree t = PlanTree::create_root("root");
    auto lvl1 = t.add_children(t.root_id(), std::vector<std::string>{"a", "b"});
    auto lvl2 = t.add_children(lvl1[0], std::vector<std::string>{"a1", "a2", "a3"});
    ASSERT_EQ(lvl2.size(), 3u);
    EXPECT_EQ(t.node(lvl1[0]).status, NodeStatus::Decomposed);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(t.node(lvl2[i]).depth, 2u);
        EXPECT_EQ(t.node(lvl2[i]).description, "a" + std::to_string(i + 1));
    }
    EXPECT_EQ(t.node(lvl1[0]).children, lvl2);
    EXPECT_LT(lvl2[0], lvl2[1]);
    EXPECT_LT(lvl2[1], lvl2[2]);
}

TEST(TaskGraph, AddChildrenToTerminalParentIsInvalidStatus) {
    PlanTree t = PlanTree::create_root("root");
    t.transition(t.root_id(), NodeStatus::Executing);
    t.transition(t.root_id(), NodeStatus::Succeeded, OutcomeSummary::succeeded("done"));
    EXPECT_EQ(code_of([&] { t.add_children(t.root_id(), std::vector<std::string>{"x"}); }), ErrorCode::InvalidStatus);
    EXPECT_EQ(code_of([&] { t.add_children("n999", std::vector<std::string>{"x"}); }), ErrorCode::UnknownNode);
}

TEST(TaskGraph, LeavesMatchRecursiveEnumeration) {
    std::mt19937 rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        PlanTree t = random_tree(rng, 2 + trial % 40);
        std::vector<NodeId> expected;
        collect_leaves(t, t.root_id(), expected);
        EXPECT_EQ(t.leaves(), expected);
    }
}

TEST(TaskGraph, LastLeafSuccessPropagatesToRoot) {
    PlanTree t = PlanTree::create_root("root");
    auto a = t.add_children(t.root_id(), std::vector<std::string>{"a", "b"});
    auto b = t.add_children(a[1], std::vector<std::string>{"b1"});
    for (const auto& id : {a[0], b[0]}) {
        t.transition(id, NodeStatus::Executing);
        t.transition(id, NodeStatus::Succeeded, OutcomeSummary::succeeded("ok"));
    }
    EXPECT_EQ(t.node(a[1]).status, NodeStatus::Succeeded);
    EXPECT_EQ(t.root().status, NodeStatus::Succeeded);
}

TEST(TaskGraph, SkippingExecutingIsIllegal) {
    PlanTree t = PlanTree::create_root("root");
    EXPECT_EQ(code_of([&] { t.transition(t.root_id(), NodeStatus::Succeeded); }), ErrorCode::IllegalTransition);
    try {
        t.transition(t.root_id(), NodeStatus::Succeeded);
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("Pending->Succeeded"), std::string::npos);
    }
}

TEST(TaskGraph, CancelledChildrenDoNotBlockSuccess) {
    PlanTree t = PlanTree::create_root("root");
    auto k = t.add_children(t.root_id(), std::vector<std::string>{"a", "b", "c"});
    t.transition(k[0], NodeStatus::Executing);
    t.transition(k[0], NodeStatus::Succeeded, OutcomeSummary::succeeded("ok"));
    t.transition(k[1], NodeStatus::Cancelled);
    EXPECT_EQ(t.root().status, NodeStatus::Decomposed);
    t.transition(k[2], NodeStatus::Cancelled);
    EXPECT_EQ(t.root().status, NodeStatus::Succeeded);
}

TEST(TaskGraph, AllCancelledChildrenCancelParent) {
    std::vector<NodeStatus> all{NodeStatus::Cancelled, NodeStatus::Cancelled};
    EXPECT_EQ(derive_status(all), NodeStatus::Cancelled);
    std::vector<NodeStatus> mixed{NodeStatus::Cancelled, NodeStatus::Failed, NodeStatus::Succeeded};
    EXPECT_EQ(derive_status(mixed), NodeStatus::Failed);
    std::vector<NodeStatus> live{NodeStatus::Failed, NodeStatus::Pending};
    EXPECT_EQ(derive_status(live), NodeStatus::Decomposed);
}

TEST(TaskGraph, RandomLegalSequencesKeepInvariants) {
    std::mt19937 rng(20240601);
    const std::vector<NodeStatus> all{NodeStatus::Pending,   NodeStatus::Decomposed, NodeStatus::Executing,
                                      NodeStatus::Succeeded, NodeStatus::Failed,     NodeStatus::Corrected,
                                      NodeStatus::Cancelled};
    for (int trial = 0; trial < 60; ++trial) {
        PlanTree t = random_tree(rng, 50);
        for (int op = 0; op < 400; ++op) {
            auto leaves = t.leaves();
            const NodeId id = leaves[std::uniform_int_distribution<std::size_t>(0, leaves.size() - 1)(rng)];
            const NodeStatus from = t.node(id).status;
            const NodeStatus to = all[std::uniform_int_distribution<std::size_t>(0, all.size() - 1)(rng)];
            const bool legal = table_allows(from, to) && to != NodeStatus::Decomposed;
            try {
                t.transition(id, to, is_terminal(to) && to != NodeStatus::Corrected
                                         ? std::optional(to == NodeStatus::Succeeded
                                                             ? OutcomeSummary::succeeded("ok")
                                                             : OutcomeSummary::failed("no", "reason"))
                                         : std::nullopt);
                EXPECT_TRUE(legal) << to_string(from) << "->" << to_string(to) << " was accepted";
            } catch (const Error& e) {
                EXPECT_FALSE(legal) << to_string(from) << "->" << to_string(to) << " was rejected";
                EXPECT_EQ(e.code(), ErrorCode::IllegalTransition);
            }
            ASSERT_TRUE(t.check_invariants().empty()) << t.check_invariants().front();
            for (const auto& [nid, n] : t.nodes()) {
                if (n.is_leaf()) continue;
                ASSERT_EQ(n.status, oracle_status(t, nid)) << "derived status of " << nid;
            }
        }
    }
}

TEST(TaskGraph, DecomposedNodesRejectDirectTransitions) {
    PlanTree t = PlanTree::create_root("root");
    t.add_children(t.root_id(), std::vector<std::string>{"a", "b"});
    EXPECT_EQ(code_of([&] { t.transition(t.root_id(), NodeStatus::Succeeded); }), ErrorCode::IllegalTransition);
}

TEST(TaskGraph, SnapshotRoundTripOfSmallTree) {
    PlanTree t = PlanTree::create_root("root");
    auto k = t.add_children(t.root_id(), std::vector<std::string>{"a", "b"});
    t.transition(k[0], NodeStatus::Executing);
    NodeMetrics m;
    m.api_calls_act = 3;
    m.tool_calls = 2;
    t.add_metrics(k[0], m);
    PlanTree back = PlanTree::restore(t.snapshot());
    EXPECT_TRUE(back == t);
    EXPECT_EQ(back.node(k[0]).metrics, m);
}

TEST(TaskGraph, TruncatedSnapshotIsParseError) {
    PlanTree t = PlanTree::create_root("root");
    t.add_children(t.root_id(), std::vector<std::string>{"a", "b"});
    const std::string doc = t.snapshot();
    EXPECT_EQ(code_of([&] { PlanTree::restore(doc.substr(0, doc.size() / 2)); }), ErrorCode::ParseError);
    EXPECT_EQ(code_of([&] { PlanTree::restore(R"({"schema_version":1})"); }), ErrorCode::ParseError);
}

TEST(TaskGraph, ThousandRandomTreesReserializeByteIdentical) {
    std::mt19937 rng(99);
    for (int i = 0; i < 1000; ++i) {
        PlanTree t = random_tree(rng, 1 + i % 30);
        auto leaves = t.leaves();
        for (std::size_t j = 0; j < leaves.size(); j += 2) {
            t.transition(leaves[j], NodeStatus::Executing);
            if (j % 4 == 0) t.transition(leaves[j], NodeStatus::Failed, OutcomeSummary::failed("x", "y"));
        }
        const std::string a = t.snapshot();
        PlanTree back = PlanTree::restore(a);
        ASSERT_EQ(back.snapshot(), a);
        ASSERT_TRUE(back == t);
    }
}

TEST(TaskGraph, MetricsTotalsEqualSumOfNodes) {
    std::mt19937 rng(3);
    PlanTree t = random_tree(rng, 25);
    NodeMetrics expected;
    std::uniform_int_distribution<int> d(0, 9);
    for (const auto& id : t.preorder()) {
        NodeMetrics m;
        m.api_calls_reason = d(rng);
        m.api_calls_act = d(rng) + 10;
        m.tool_calls = d(rng);
        m.api_calls_summarizer = d(rng);
        t.add_metrics(id, m);
        expected += m;
    }
    EXPECT_EQ(t.totals(), expected);
}

TEST(TaskGraph, DerivationHoldPublishesSingleState) {
    PlanTree t = PlanTree::create_root("root");
    auto k = t.add_children(t.root_id(), std::vector<std::string>{"a"});
    t.transition(k[0], NodeStatus::Executing);
    std::vector<NodeStatus> root_seen;
    t.set_observer([&](const TreeChange& c) {
        if (c.kind == TreeChange::Kind::StatusChanged && c.node_id == t.root_id()) root_seen.push_back(c.status);
    });
    {
        auto hold = t.hold_derivation();
        t.transition(k[0], NodeStatus::Failed, OutcomeSummary::failed("x", "y"));
        t.transition(k[0], NodeStatus::Corrected);
        t.insert_after(k[0], std::vector<std::string>{"replacement"});
    }
    EXPECT_EQ(t.root().status, NodeStatus::Decomposed);
    for (auto s : root_seen) EXPECT_NE(s, NodeStatus::Failed);
}

TEST(TaskGraph, OutcomeFailureReasonPresentIffFailed) {
    auto ok = OutcomeSummary::succeeded("fine");
    auto bad = OutcomeSummary::failed("nope", "denied");
    EXPECT_TRUE(ok.success);
    EXPECT_FALSE(ok.failure_reason.has_value());
    EXPECT_FALSE(bad.success);
    EXPECT_EQ(bad.failure_reason, "denied");
}
