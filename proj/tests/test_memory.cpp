#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include "redteam/error.hpp"
#include "redteam/memory.hpp"
#include "test_support.hpp"

using namespace redteam;
using redteam::testing::TempDir;

namespace {

MemoryStore::Options in_memory(std::size_t dim = 256) {
    MemoryStore::Options o;
    o.dimension = dim;
    std::int64_t tick = 0;
    o.clock = [tick]() mutable { return ++tick; };
    return o;
}

PlanTree finished_tree(std::mt19937& rng, std::size_t nodes) {
    PlanTree t = PlanTree::create_root("objective " + std::to_string(rng()));
    while (t.size() < nodes) {
        auto leaves = t.leaves();
        const NodeId pick = leaves[rng() % leaves.size()];
        if (t.node(pick).depth >= 4) break;
        std::vector<std::string> d;
        for (int i = 1 + static_cast<int>(rng() % 3); i > 0; --i) d.push_back("task " + std::to_string(rng() % 100000));
        t.add_children(pick, d);
    }
    for (const auto& id : t.leaves()) {
        t.transition(id, NodeStatus::Executing);
        if (rng() % 4 == 0)
            t.transition(id, NodeStatus::Failed, OutcomeSummary::failed("no", "blocked"));
        else
            t.transition(id, NodeStatus::Succeeded, OutcomeSummary::succeeded("ok"));
    }
    return t;
}

PlanTree five_node_tree() {
    PlanTree t = PlanTree::create_root("Get root on 10.0.0.5");
    auto k = t.add_children(t.root_id(), std::vector<std::string>{"scan ports", "exploit web"});
    auto g = t.add_children(k[1], std::vector<std::string>{"find upload", "get shell"});
    for (const auto& id : {k[0], g[0], g[1]}) {
        t.transition(id, NodeStatus::Executing);
        t.transition(id, NodeStatus::Succeeded, OutcomeSummary::succeeded("ok"));
    }
    return t;
}

Embedding random_unit(std::mt19937& rng, std::size_t dim) {
    std::normal_distribution<float> n(0, 1);
    Embedding v(dim);
    double norm = 0;
    for (auto& x : v) {
        x = n(rng);
        norm += static_cast<double>(x) * x;
    }
    for (auto& x : v) x = static_cast<float>(x / std::sqrt(norm));
    return v;
}

struct FlakyEmbedder final : Embedder {
    HashEmbedder inner{256};
    Embedding embed_raw(std::string_view text) override {
        if (text.find("poison") != std::string_view::npos) throw Error(ErrorCode::EmbedderError, "refused");
        return inner.embed_raw(text);
    }
    std::size_t dimension() const noexcept override { return 256; }
};

}  // namespace

TEST(Embed, DeterministicUnitNorm) {
    HashEmbedder e(256);
    auto a = embed("enumerate smb shares", e);
    auto b = embed("enumerate smb shares", e);
    EXPECT_EQ(a, b);
    double norm = 0;
    for (float x : a) norm += static_cast<double>(x) * x;
    EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-6);
    EXPECT_EQ(a.size(), 256u);
}

TEST(Embed, EmptyTextRejected) {
    HashEmbedder e;
    try {
        embed("", e);
        FAIL();
    } catch (const Error& err) {
        EXPECT_EQ(err.code(), ErrorCode::EmptyText);
    }
}

TEST(Embed, SelfCosineIsOneForRandomStrings) {
    HashEmbedder e;
    std::mt19937 rng(100);
    for (int i = 0; i < 100; ++i) {
        std::string s;
        for (int j = 0, n = 1 + static_cast<int>(rng() % 60); j < n; ++j) s += static_cast<char>(' ' + rng() % 90);
        auto v = embed(s, e);
        EXPECT_NEAR(cosine(v, embed(s, e)), 1.0, 1e-6) << s;
    }
}

TEST(MemoryStore, FiveNodeTreeMirrorsStructure) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    PlanTree t = five_node_tree();
    EXPECT_EQ(store.store_tree(t, "run-1", e), 5u);
    auto root = store.find("run-1:" + t.root_id());
    ASSERT_TRUE(root);
    ASSERT_EQ(root->child_records.size(), 2u);
    EXPECT_EQ(root->child_records[0], "run-1:" + t.root().children[0]);
    EXPECT_EQ(root->child_records[1], "run-1:" + t.root().children[1]);
    EXPECT_FALSE(root->parent_record);
    EXPECT_EQ(store.store_tree(t, "run-1", e), 0u);
    EXPECT_EQ(store.size(), 5u);
}

TEST(MemoryStore, UnfinishedTreeRejected) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    PlanTree t = PlanTree::create_root("x");
    EXPECT_THROW(store.store_tree(t, "r", e), Error);
}

TEST(MemoryStore, RandomTreesReconstructIsomorphically) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    std::mt19937 rng(42);
    std::size_t expected_size = 0;
    for (int i = 0; i < 100; ++i) {
        PlanTree t = finished_tree(rng, 2 + i % 20);
        const std::string run = "run-" + std::to_string(i);
        EXPECT_EQ(store.store_tree(t, run, e), t.size());
        expected_size += t.size();
        std::function<void(const NodeId&)> check = [&](const NodeId& id) {
            auto rec = store.find(run + ":" + id);
            ASSERT_TRUE(rec);
            const TaskNode& n = t.node(id);
            EXPECT_EQ(rec->description, n.description);
            EXPECT_EQ(rec->status, n.status);
            EXPECT_EQ(rec->parent_record.has_value(), n.parent.has_value());
            if (n.parent) { EXPECT_EQ(*rec->parent_record, run + ":" + *n.parent); }
            ASSERT_EQ(rec->child_records.size(), n.children.size());
            for (std::size_t c = 0; c < n.children.size(); ++c) {
                EXPECT_EQ(rec->child_records[c], run + ":" + n.children[c]);
                check(n.children[c]);
            }
        };
        check(t.root_id());
    }
    EXPECT_EQ(store.size(), expected_size);
}

TEST(MemoryStore, EmptyStoreQueryIsEmpty) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    EXPECT_TRUE(store.query("anything", 5, e).empty());
}

TEST(MemoryStore, ExactDescriptionIsTopHit) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    store.store_tree(five_node_tree(), "run-1", e);
    auto hits = store.query("find upload", 3, e);
    ASSERT_FALSE(hits.empty());
    EXPECT_EQ(hits[0].record.description, "find upload");
    EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
    EXPECT_LE(hits.size(), 3u);
    for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_GE(hits[i - 1].similarity, hits[i].similarity);
}

TEST(MemoryStore, QueryExcludesCurrentRun) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    store.store_tree(five_node_tree(), "run-1", e);
    store.store_tree(five_node_tree(), "run-2", e);
    auto hits = store.query("find upload", 10, e, std::string("run-2"));
    EXPECT_EQ(hits.size(), 5u);
    for (const auto& h : hits) EXPECT_EQ(h.record.run_id, "run-1");
}

TEST(MemoryStore, ThousandVectorTopTenMatchesLinearScan) {
    constexpr std::size_t kDim = 64;
    MemoryStore store(in_memory(kDim));
    std::mt19937 rng(1234);
    std::vector<MemoryRecord> all;
    for (int i = 0; i < 1000; ++i) {
        MemoryRecord r;
        r.record_id = "r:" + std::to_string(i);
        r.run_id = "r";
        r.node_id = std::to_string(i);
        r.description = "vector " + std::to_string(i);
        r.embedding = random_unit(rng, kDim);
        r.status = NodeStatus::Succeeded;
        r.created_at = i;
        all.push_back(r);
        ASSERT_TRUE(store.add_record(r));
    }
    const auto start = std::chrono::steady_clock::now();
    for (int q = 0; q < 50; ++q) {
        Embedding query = random_unit(rng, kDim);
        std::vector<std::pair<double, std::size_t>> scan;
        for (std::size_t i = 0; i < all.size(); ++i) {
            double dot = 0;
            for (std::size_t d = 0; d < kDim; ++d) dot += static_cast<double>(all[i].embedding[d]) * query[d];
            scan.push_back({dot, i});
        }
        std::sort(scan.begin(), scan.end(), [](auto& a, auto& b) { return a.first > b.first; });
        auto hits = store.query_vector(query, 10);
        ASSERT_EQ(hits.size(), 10u);
        for (std::size_t i = 0; i < 10; ++i) {
            EXPECT_EQ(hits[i].record.record_id, all[scan[i].second].record_id) << "query " << q << " rank " << i;
            EXPECT_NEAR(hits[i].similarity, scan[i].first, 1e-5);
        }
    }
    EXPECT_LT(std::chrono::steady_clock::now() - start, std::chrono::seconds(2));
}

TEST(MemoryStore, TiesBrokenByNewestThenRecordId) {
    MemoryStore store(in_memory(4));
    Embedding v{1, 0, 0, 0};
    for (auto [id, at] : std::vector<std::pair<std::string, int>>{{"b", 1}, {"a", 1}, {"c", 5}}) {
        MemoryRecord r;
        r.record_id = id;
        r.run_id = "x";
        r.node_id = id;
        r.description = id;
        r.embedding = v;
        r.created_at = at;
        store.add_record(r);
    }
    auto hits = store.query_vector(v, 3);
    ASSERT_EQ(hits.size(), 3u);
    EXPECT_EQ(hits[0].record.record_id, "c");
    EXPECT_EQ(hits[1].record.record_id, "a");
    EXPECT_EQ(hits[2].record.record_id, "b");
}

TEST(MemoryStore, MixedDimensionsRejected) {
    MemoryStore store(in_memory(8));
    MemoryRecord r;
    r.record_id = "x";
    r.embedding = Embedding(4, 0.5f);
    try {
        store.add_record(r);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DimensionMismatch);
    }
    HashEmbedder e16(16);
    EXPECT_THROW(store.store_tree(five_node_tree(), "r", e16), Error);
}

TEST(MemoryStore, EmbedderFailureSkipsNode) {
    MemoryStore store(in_memory());
    FlakyEmbedder e;
    PlanTree t = PlanTree::create_root("root");
    auto k = t.add_children(t.root_id(), std::vector<std::string>{"fine", "poison pill", "also fine"});
    for (const auto& id : k) {
        t.transition(id, NodeStatus::Executing);
        t.transition(id, NodeStatus::Succeeded, OutcomeSummary::succeeded("ok"));
    }
    EXPECT_EQ(store.store_tree(t, "run", e), 3u);
    EXPECT_FALSE(store.find("run:" + k[1]));
}

TEST(MemoryStore, PersistsAcrossReopenAndDropsTornFrame) {
    TempDir dir("mem");
    const std::string path = dir.file("memory.db");
    HashEmbedder e;
    {
        MemoryStore::Options o = in_memory();
        o.path = path;
        MemoryStore store(o);
        store.store_tree(five_node_tree(), "run-1", e);
    }
    const auto full = std::filesystem::file_size(path);
    {
        MemoryStore::Options o = in_memory();
        o.path = path;
        MemoryStore store(o);
        EXPECT_EQ(store.size(), 5u);
        EXPECT_EQ(store.skipped_on_open(), 0u);
        EXPECT_EQ(store.query("scan ports", 1, e)[0].record.description, "scan ports");
    }
    std::filesystem::resize_file(path, full - 7);
    MemoryStore::Options o = in_memory();
    o.path = path;
    MemoryStore store(o);
    EXPECT_EQ(store.size(), 4u);
    EXPECT_EQ(store.skipped_on_open(), 1u);
    EXPECT_EQ(store.store_tree(five_node_tree(), "run-1", e), 1u);
}

TEST(MemoryStore, ReopenWithOtherDimensionRejected) {
    TempDir dir("mem");
    MemoryStore::Options o = in_memory(16);
    o.path = dir.file("m.db");
    { MemoryStore s(o); }
    o.dimension = 32;
    EXPECT_THROW(MemoryStore s(o), Error);
}

TEST(MemoryStore, JsonlExportImportRoundTrip) {
    TempDir dir("mem");
    HashEmbedder e;
    MemoryStore a(in_memory());
    a.store_tree(five_node_tree(), "run-1", e);
    a.export_jsonl(dir.file("dump.jsonl"));
    MemoryStore b(in_memory());
    EXPECT_EQ(b.import_jsonl(dir.file("dump.jsonl")), 5u);
    EXPECT_EQ(a.records(), b.records());
    EXPECT_EQ(b.import_jsonl(dir.file("dump.jsonl")), 0u);
}

TEST(MemoryStore, RepeatQueriesIdenticalUnderConcurrentWrites) {
    MemoryStore store(in_memory());
    HashEmbedder e;
    store.store_tree(five_node_tree(), "base", e);
    const auto reference = store.query("exploit web", 5, e, std::string("writer"));
    std::atomic<bool> done{false};
    std::thread writer([&] {
        std::mt19937 rng(8);
        HashEmbedder we;
        for (int i = 0; i < 40; ++i) store.store_tree(finished_tree(rng, 6), "writer", we);
        done = true;
    });
    int reads = 0;
    while (!done || reads < 10) {
        auto hits = store.query("exploit web", 5, e, std::string("writer"));
        ASSERT_EQ(hits.size(), reference.size());
        for (std::size_t i = 0; i < hits.size(); ++i) EXPECT_EQ(hits[i].record.record_id, reference[i].record.record_id);
        ++reads;
    }
    writer.join();
}
