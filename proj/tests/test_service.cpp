#include <gtest/gtest.h>

#include <httplib.h>

#include <thread>

#include "redteam/audit_log.hpp"
#include "redteam/service.hpp"
#include "test_support.hpp"

using namespace redteam;
using redteam::testing::TempDir;
using json = nlohmann::json;
using namespace std::chrono_literals;

namespace {

CredentialStore operators() {
    CredentialStore s;
    s.add("alice", "correct horse", OperatorRole::Operator, 1000);
    s.add("vic", "viewer pass", OperatorRole::Viewer, 1000);
    return s;
}

class ServiceTest : public ::testing::Test {
protected:
    TempDir dir;
    std::unique_ptr<Orchestrator> orch;
    std::unique_ptr<ServiceServer> server;
    int port = 0;
    std::string op, viewer;

    void SetUp() override {
        Orchestrator::Options o;
        o.data_dir = dir.str();
        o.scenario_dir = redteam::testing::kScenarioDir;
        o.credentials = operators();
        orch = std::make_unique<Orchestrator>(o);
        ServiceServer::Options so;
        so.event_poll = 50ms;
        server = std::make_unique<ServiceServer>(*orch, so);
        port = server->start();
        op = login("alice", "correct horse");
        viewer = login("vic", "viewer pass");
    }
    void TearDown() override {
        server->stop();
        orch.reset();
    }

    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(30, 0);
        return c;
    }

    std::string login(const std::string& who, const std::string& password) {
        auto res = client().Post("/sessions", json{{"principal", who}, {"password", password}}.dump(),
                                 "application/json");
        if (!res || res->status != 201) return {};
        return json::parse(res->body)["session_id"].get<std::string>();
    }

    static httplib::Headers auth(const std::string& session) { return {{"Authorization", "Bearer " + session}}; }

    httplib::Result get(const std::string& path, const std::string& session) const {
        return client().Get(path, auth(session));
    }
    httplib::Result post(const std::string& path, const std::string& session, const json& body = json::object()) const {
        return client().Post(path, auth(session), body.dump(), "application/json");
    }

    std::string submit(const json& config) {
        auto res = post("/runs", op, {{"task", ""}, {"config", config}});
        EXPECT_TRUE(res);
        if (!res) return {};
        EXPECT_EQ(res->status, 201) << res->body;
        return json::parse(res->body).value("run_id", "");
    }

    json wait_pending(const std::string& run_id) {
        for (int i = 0; i < 400; ++i) {
            auto res = get("/approvals/pending", op);
            if (res && res->status == 200)
                for (const auto& r : json::parse(res->body))
                    if (r["run_id"] == run_id) return r;
            std::this_thread::sleep_for(25ms);
        }
        ADD_FAILURE() << "no pending approval for " << run_id;
        return json();
    }

    static json interactive(const std::string& scenario) {
        return {{"scenario", scenario}, {"approval_policy", "interactive"}, {"approval_timeout_ms", 60000}};
    }
};

}  // namespace

TEST_F(ServiceTest, VersionNeedsNoSession) {
    auto res = client().Get("/version");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200);
    const json body = json::parse(res->body);
    EXPECT_EQ(body["api"], std::string(ServiceServer::kApiVersion));
    EXPECT_EQ(body["prompts"], "rtl-prompts/3");
}

TEST_F(ServiceTest, AuthenticationAndRoles) {
    ASSERT_FALSE(op.empty());
    ASSERT_FALSE(viewer.empty());
    auto bad = client().Post("/sessions", json{{"principal", "alice"}, {"password", "nope"}}.dump(),
                             "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 401);
    EXPECT_EQ(json::parse(bad->body)["error"], "InvalidCredentials");

    auto anonymous = client().Get("/runs");
    ASSERT_TRUE(anonymous);
    EXPECT_EQ(anonymous->status, 401);
    auto forged = get("/runs", "not-a-session");
    ASSERT_TRUE(forged);
    EXPECT_EQ(forged->status, 401);

    auto viewer_list = get("/runs", viewer);
    ASSERT_TRUE(viewer_list);
    EXPECT_EQ(viewer_list->status, 200);
    EXPECT_EQ(json::parse(viewer_list->body), json::array());

    auto viewer_submit = post("/runs", viewer, {{"config", {{"scenario", "sar-like"}}}});
    ASSERT_TRUE(viewer_submit);
    EXPECT_EQ(viewer_submit->status, 403);
    EXPECT_EQ(json::parse(viewer_submit->body)["error"], "Unauthorized");
    auto viewer_kill = post("/kill-switch", viewer);
    ASSERT_TRUE(viewer_kill);
    EXPECT_EQ(viewer_kill->status, 403);
    EXPECT_FALSE(orch->kill_switch().active());
}

TEST_F(ServiceTest, MalformedRequestsMapToClientErrors) {
    auto unknown = get("/runs/run-999999", op);
    ASSERT_TRUE(unknown);
    EXPECT_EQ(unknown->status, 404);
    EXPECT_EQ(json::parse(unknown->body)["error"], "UnknownRun");

    auto garbage = client().Post("/runs", auth(op), "{not json", "application/json");
    ASSERT_TRUE(garbage);
    EXPECT_EQ(garbage->status, 400);

    auto unknown_key = post("/runs", op, {{"config", {{"scenario", "sar-like"}, {"warp_speed", 9}}}});
    ASSERT_TRUE(unknown_key);
    EXPECT_EQ(unknown_key->status, 400);
    EXPECT_EQ(json::parse(unknown_key->body)["error"], "ConfigError");

    auto no_request = post("/approvals/req-424242/decision", op, {{"decision", "Approved"}});
    ASSERT_TRUE(no_request);
    EXPECT_EQ(no_request->status, 404);
}

TEST_F(ServiceTest, RunLifecycleTreeMetricsAndEvents) {
    const std::string id = submit({{"scenario", "westwild-like"}});
    ASSERT_FALSE(id.empty());
    const RunDescriptor done = orch->wait(id, 60s);

    auto state = get("/runs/" + id, viewer);
    ASSERT_TRUE(state);
    ASSERT_EQ(state->status, 200);
    const json d = json::parse(state->body);
    EXPECT_EQ(d["state"], "Completed");
    EXPECT_EQ(d["run_id"], id);

    auto tree = get("/runs/" + id + "/tree", viewer);
    ASSERT_TRUE(tree);
    ASSERT_EQ(tree->status, 200);
    const json t = json::parse(tree->body);
    EXPECT_EQ(t["version"], orch->tree(id).version());
    EXPECT_EQ(t["tree"], orch->tree(id).to_json());

    auto metrics = get("/metrics/" + id, viewer);
    ASSERT_TRUE(metrics);
    ASSERT_EQ(metrics->status, 200);
    const json m = json::parse(metrics->body);
    EXPECT_EQ(m["tool_calls"], done.totals.tool_calls);
    EXPECT_EQ(m["tool_calls"], redteam::testing::expected_counts()["westwild-like"]["with"]["tool_calls"]);

    auto list = get("/runs", viewer);
    ASSERT_TRUE(list);
    EXPECT_EQ(json::parse(list->body).size(), 1u);

    auto stream = get("/events?since=0&run_id=" + id + "&follow=0", viewer);
    ASSERT_TRUE(stream);
    ASSERT_EQ(stream->status, 200);
    EXPECT_NE(stream->get_header_value("Content-Type").find("text/event-stream"), std::string::npos);
    std::vector<StateEvent> events;
    std::istringstream lines(stream->body);
    std::uint64_t last_id = 0;
    for (std::string line; std::getline(lines, line);) {
        if (line.rfind("id: ", 0) == 0) {
            const auto cursor = std::stoull(line.substr(4));
            EXPECT_GT(cursor, last_id);
            last_id = cursor;
        } else if (line.rfind("data: ", 0) == 0) {
            events.push_back(json::parse(line.substr(6)).get<StateEvent>());
        }
    }
    const auto feed = orch->events().for_run(id);
    ASSERT_EQ(events.size(), feed.size());
    for (std::size_t i = 0; i < events.size(); ++i) EXPECT_EQ(events[i].seq, i + 1);
    std::map<NodeId, NodeStatus> truth;
    const PlanTree final_tree = orch->tree(id);
    for (const auto& [nid, n] : final_tree.nodes()) truth[nid] = n.status;
    EXPECT_EQ(project_tree_statuses(events, id), truth);

    // resuming from a cursor yields only later events
    auto tail = get("/events?since=" + std::to_string(feed[feed.size() - 3].cursor) + "&run_id=" + id + "&follow=0",
                    viewer);
    ASSERT_TRUE(tail);
    std::size_t frames = 0;
    for (std::size_t at = tail->body.find("\ndata: "); at != std::string::npos; at = tail->body.find("\ndata: ", at + 1))
        ++frames;
    EXPECT_EQ(frames, 2u);
}

TEST_F(ServiceTest, FollowStreamDeliversLiveEvents) {
    std::string body;
    std::thread reader([&] {
        auto c = client();
        c.Get("/events?since=0", auth(viewer), [&](const char* data, size_t n) {
            body.append(data, n);
            return body.find("\"to\":\"Completed\"") == std::string::npos;
        });
    });
    std::this_thread::sleep_for(100ms);
    const std::string id = submit({{"scenario", "westwild-like"}});
    orch->wait(id, 60s);
    reader.join();
    EXPECT_NE(body.find("event: node_added"), std::string::npos);
    EXPECT_NE(body.find("\"to\":\"Completed\""), std::string::npos);
}

TEST_F(ServiceTest, ApprovalsPlanEditsAndDoubleDecision) {
    const std::string id = submit(interactive("westwild-like"));
    ASSERT_FALSE(id.empty());
    const json first = wait_pending(id);
    ASSERT_TRUE(first.is_object());
    EXPECT_EQ(orch->get_state(id).state, RunState::AwaitingApproval);

    // rename a Pending leaf while the run waits on the operator
    const PlanTree tree = orch->tree(id);
    NodeId pending;
    for (const auto& nid : tree.leaves())
        if (tree.node(nid).status == NodeStatus::Pending && pending.empty()) pending = nid;
    ASSERT_FALSE(pending.empty());
    auto edit = post("/runs/" + id + "/plan-edits", op,
                     {{"base_version", tree.version()}, {"edits", {{{"node_id", pending}, {"description", "renamed"}}}}});
    ASSERT_TRUE(edit);
    ASSERT_EQ(edit->status, 200) << edit->body;
    EXPECT_EQ(orch->tree(id).node(pending).description, "renamed");
    auto stale = post("/runs/" + id + "/plan-edits", op,
                      {{"base_version", tree.version()}, {"edits", {{{"node_id", pending}, {"description", "x"}}}}});
    ASSERT_TRUE(stale);
    EXPECT_EQ(stale->status, 409);
    auto viewer_edit = post("/runs/" + id + "/plan-edits", viewer, {{"cancel", {pending}}});
    ASSERT_TRUE(viewer_edit);
    EXPECT_EQ(viewer_edit->status, 403);

    auto viewer_decides = post("/approvals/" + first["request_id"].get<std::string>() + "/decision", viewer,
                               {{"decision", "Approved"}});
    ASSERT_TRUE(viewer_decides);
    EXPECT_EQ(viewer_decides->status, 403);
    auto nonsense = post("/approvals/" + first["request_id"].get<std::string>() + "/decision", op,
                         {{"decision", "Maybe"}});
    ASSERT_TRUE(nonsense);
    EXPECT_EQ(nonsense->status, 400);

    // two operators race on the same request
    const std::string second_op = login("alice", "correct horse");
    int statuses[2] = {0, 0};
    const std::string path = "/approvals/" + first["request_id"].get<std::string>() + "/decision";
    std::thread a([&] {
        auto r = post(path, op, {{"decision", "Approved"}});
        statuses[0] = r ? r->status : -1;
    });
    std::thread b([&] {
        auto r = post(path, second_op, {{"decision", "Approved"}});
        statuses[1] = r ? r->status : -1;
    });
    a.join();
    b.join();
    std::sort(std::begin(statuses), std::end(statuses));
    EXPECT_EQ(statuses[0], 200);
    EXPECT_EQ(statuses[1], 409);

    // approve the rest until the run ends
    while (!is_terminal(orch->get_state(id).state)) {
        auto res = get("/approvals/pending", op);
        ASSERT_TRUE(res);
        for (const auto& r : json::parse(res->body))
            if (r["run_id"] == id) post("/approvals/" + r["request_id"].get<std::string>() + "/decision", op,
                                        {{"decision", "Approved"}});
        std::this_thread::sleep_for(20ms);
    }
    EXPECT_EQ(orch->wait(id, 10s).state, RunState::Completed);

    std::size_t decided = 0;
    for (const auto& e : orch->audit().events())
        decided += e.kind == "ApprovalDecided" && e.payload["request_id"] == first["request_id"];
    EXPECT_EQ(decided, 1u);
    EXPECT_TRUE(check_interlock(orch->audit().events()).empty());
}

TEST_F(ServiceTest, StopAndKillSwitch) {
    const std::string id = submit(interactive("sar-like"));
    ASSERT_FALSE(id.empty());
    wait_pending(id);
    auto stop = post("/runs/" + id + "/stop", op);
    ASSERT_TRUE(stop);
    EXPECT_EQ(stop->status, 202);
    EXPECT_EQ(orch->wait(id, 10s).state, RunState::Aborted);
    auto again = post("/runs/" + id + "/stop", op);
    ASSERT_TRUE(again);
    EXPECT_EQ(again->status, 409);
    auto viewer_stop = post("/runs/" + id + "/stop", viewer);
    ASSERT_TRUE(viewer_stop);
    EXPECT_EQ(viewer_stop->status, 403);

    const std::string live = submit(interactive("westwild-like"));
    wait_pending(live);
    auto kill = post("/kill-switch", op);
    ASSERT_TRUE(kill);
    EXPECT_EQ(kill->status, 200);
    EXPECT_TRUE(orch->kill_switch().active());
    EXPECT_EQ(orch->wait(live, 10s).state, RunState::Aborted);
    auto refused = post("/runs", op, {{"config", {{"scenario", "sar-like"}}}});
    ASSERT_TRUE(refused);
    EXPECT_EQ(refused->status, 409);
    EXPECT_EQ(json::parse(refused->body)["error"], "KillSwitchActive");
}

TEST(ServiceStatus, ErrorCodeMapping) {
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::SessionExpired), 401);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::Unauthorized), 403);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::UnknownRun), 404);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::AlreadyDecided), 409);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::StaleRevision), 409);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::PolicyViolation), 400);
    EXPECT_EQ(ServiceServer::status_for(ErrorCode::LockedOut), 429);
}
