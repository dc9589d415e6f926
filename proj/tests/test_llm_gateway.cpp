#include <gtest/gtest.h>

#include <httplib.h>

#include <atomic>
#include <random>
#include <thread>

#include "redteam/error.hpp"
#include "redteam/llm_gateway.hpp"
#include "test_support.hpp"

using namespace redteam;
using nlohmann::json;

namespace {

ChatTranscript transcript_of(SessionKind kind, const std::string& user = "go") {
    ChatTranscript t(kind);
    t.append(Role::System, "sys");
    t.append(Role::User, user);
    return t;
}

std::shared_ptr<ScriptedProvider> script(const json& entries) {
    return ScriptedProvider::from_json(json{{"entries", entries}});
}

// Exact tenths of a percent, rounded half up, by long division.
std::int64_t tenths_oracle(std::int64_t num, std::int64_t den) {
    std::int64_t q = (1000 * num) / den;
    std::int64_t r = (1000 * num) % den;
    return 2 * r >= den ? q + 1 : q;
}

}  // namespace

TEST(LlmGateway, ScriptedLookupByKindAndTurn) {
    LlmGateway gw(script(json::array({
        {{"kind", "act"}, {"turn", 0}, {"text", "run nmap"},
         {"tool_call", {{"tool_name", "terminal"}, {"arguments", {{"command", "nmap -sV 10.0.0.5"}}}}}},
        {{"kind", "act"}, {"turn", 1}, {"text", "second"}},
    })));
    auto t = transcript_of(SessionKind::Act);
    Completion c = gw.complete(t);
    EXPECT_EQ(c.text, "run nmap");
    ASSERT_TRUE(c.tool_call.has_value());
    EXPECT_EQ(c.tool_call->command(), "nmap -sV 10.0.0.5");
    EXPECT_EQ(gw.counters().get(SessionKind::Act), 1u);
    EXPECT_EQ(t.messages().back().role, Role::Assistant);
    EXPECT_EQ(t.messages().back().tool_call, c.tool_call);
    EXPECT_EQ(gw.complete(t).text, "second");
    EXPECT_EQ(gw.counters().get(SessionKind::Act), 2u);
}

TEST(LlmGateway, EmptyTranscriptRejected) {
    LlmGateway gw(script(json::array()));
    ChatTranscript t(SessionKind::Reason);
    try {
        gw.complete(t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::EmptyTranscript);
    }
    EXPECT_EQ(gw.counters().get(SessionKind::Reason), 0u);
}

TEST(LlmGateway, EmptyScriptFailsOnFirstCall) {
    LlmGateway gw(script(json::array()));
    auto t = transcript_of(SessionKind::Reason);
    try {
        gw.complete(t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ScriptExhausted);
    }
}

TEST(LlmGateway, DuplicateKeyRejected) {
    try {
        script(json::array({{{"kind", "act"}, {"turn", 3}, {"text", "a"}}, {{"kind", "act"}, {"turn", 3}, {"text", "b"}}}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DuplicateKey);
    }
}

TEST(LlmGateway, SchemaViolationNamesLocation) {
    try {
        script(json::array({{{"kind", "act"}, {"turn", 0}, {"text", "ok"}}, {{"kind", "bogus"}, {"text", "x"}}}));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::SchemaViolation);
        EXPECT_NE(std::string(e.what()).find("/entries/1"), std::string::npos) << e.what();
    }
    try {
        ScriptedProvider::load_script("{\"entries\": [");
        FAIL();
    } catch (const Error& e) {
        EXPECT_TRUE(e.code() == ErrorCode::ParseError || e.code() == ErrorCode::SchemaViolation);
    }
}

TEST(LlmGateway, FallbackAnswersUnmatchedTurns) {
    LlmGateway gw(script(json::array({{{"kind", "planner"}, {"turn", 0}, {"text", "first"}},
                                      {{"kind", "planner"}, {"text", "later"}}})));
    auto t = transcript_of(SessionKind::Planner);
    EXPECT_EQ(gw.complete(t).text, "first");
    EXPECT_EQ(gw.complete(t).text, "later");
    EXPECT_EQ(gw.complete(t).text, "later");
}

TEST(LlmGateway, ToolCallOutsideActIsProtocolViolation) {
    LlmGateway gw(script(json::array({{{"kind", "reason"}, {"turn", 0}, {"text", "x"},
                                       {"tool_call", {{"arguments", {{"command", "id"}}}}}}})));
    auto t = transcript_of(SessionKind::Reason);
    try {
        gw.complete(t);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProtocolViolation);
    }
}

TEST(LlmGateway, RecordThenReplayReproducesCounters) {
    // 37 completions across the three sessions.
    json entries = json::array();
    std::mt19937 rng(37);
    std::vector<SessionKind> order;
    for (int i = 0; i < 37; ++i) order.push_back(static_cast<SessionKind>(rng() % 3));
    std::array<std::size_t, 3> turn{};
    for (auto k : order) {
        json e{{"kind", to_string(k)}, {"turn", turn[static_cast<int>(k)]++}, {"text", "t" + std::to_string(entries.size())}};
        if (k == SessionKind::Act) e["tool_call"] = {{"tool_name", "terminal"}, {"arguments", {{"command", "id"}}}};
        entries.push_back(e);
    }
    auto recorder = std::make_shared<RecordingProvider>(script(entries));
    LlmGateway original(recorder);
    std::vector<Completion> first;
    for (auto k : order) {
        auto t = transcript_of(k);
        first.push_back(original.complete(t));
    }
    EXPECT_EQ(recorder->recorded(), 37u);

    LlmGateway replay(ScriptedProvider::from_json(recorder->script()));
    std::vector<Completion> second;
    for (auto k : order) {
        auto t = transcript_of(k);
        second.push_back(replay.complete(t));
    }
    EXPECT_EQ(first, second);
    EXPECT_EQ(original.counters().snapshot(), replay.counters().snapshot());
    EXPECT_EQ(replay.counters().snapshot().reason + replay.counters().snapshot().act +
                  replay.counters().snapshot().summarizer,
              37u);
}

TEST(LlmGateway, CountersExactUnderConcurrency) {
    LlmGateway gw(script(json::array({{{"kind", "reason"}, {"text", "r"}},
                                      {{"kind", "act"}, {"text", "a"}},
                                      {{"kind", "summarizer"}, {"text", "s"}}})));
    constexpr int kThreads = 8, kCalls = 250;
    std::vector<std::thread> threads;
    for (int i = 0; i < kThreads; ++i) {
        threads.emplace_back([&gw, i] {
            const auto kind = static_cast<SessionKind>(i % 3);
            for (int j = 0; j < kCalls; ++j) {
                auto t = transcript_of(kind);
                gw.complete(t);
            }
        });
    }
    for (auto& t : threads) t.join();
    auto c = gw.counters().snapshot();
    EXPECT_EQ(c.reason, 3u * kCalls);
    EXPECT_EQ(c.act, 3u * kCalls);
    EXPECT_EQ(c.summarizer, 2u * kCalls);
}

TEST(LlmGateway, ScriptedReplayIsDeterministic) {
    json entries = json::array({{{"kind", "summarizer"}, {"text", "same summary"}}});
    LlmGateway a(script(entries)), b(script(entries));
    ChatTranscript ta(SessionKind::Summarizer), tb(SessionKind::Summarizer);
    ta.append(Role::User, "long output");
    tb.append(Role::User, "long output");
    EXPECT_EQ(a.complete(ta), b.complete(tb));
    EXPECT_TRUE(ta == tb);
    ChatTranscript t1(SessionKind::Summarizer), t2(SessionKind::Summarizer);
    t1.append(Role::User, "x");
    t2.append(Role::User, "x");
    EXPECT_EQ(a.complete(t1).text, a.complete(t2).text);
}

TEST(ComponentShares, SingleComponent) {
    auto s = component_shares(CallCounts{1, 0, 0, 0, 0});
    EXPECT_EQ(s.reason_tenths, 1000);
    EXPECT_EQ(s.act_tenths, 0);
    EXPECT_EQ(s.summarizer_tenths, 0);
}

TEST(ComponentShares, ZeroTotalRejected) {
    try {
        component_shares(CallCounts{0, 0, 0, 4, 2});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ZeroTotal);
    }
}

TEST(ComponentShares, PlanningTrafficExcluded) {
    auto s = component_shares(CallCounts{24, 23, 21, 50, 9});
    EXPECT_EQ(format_tenths(s.summarizer_tenths), "30.9");
}

TEST(ComponentShares, ThirtyFiveThirtyFourThirtyOneIsThirtyOnePercent) {
    // 31 of 100 calls is exactly 31.0%.
    auto s = component_shares(CallCounts{35, 34, 31, 0, 0});
    EXPECT_EQ(s.summarizer_tenths, 310);
    EXPECT_EQ(format_tenths(s.summarizer_tenths), "31.0");
}

TEST(ComponentShares, RandomTriplesMatchRationalOracle) {
    std::mt19937_64 rng(500);
    std::uniform_int_distribution<std::uint64_t> d(0, 100000);
    for (int i = 0; i < 500; ++i) {
        CallCounts c{d(rng), d(rng), d(rng), 0, 0};
        if (c.reason + c.act + c.summarizer == 0) c.act = 1;
        const auto total = static_cast<std::int64_t>(c.reason + c.act + c.summarizer);
        auto s = component_shares(c);
        const long double t = static_cast<long double>(total);
        EXPECT_NEAR(s.reason_pct, static_cast<double>(c.reason * 100.0L / t), 1e-9);
        EXPECT_NEAR(s.act_pct, static_cast<double>(c.act * 100.0L / t), 1e-9);
        EXPECT_NEAR(s.summarizer_pct, static_cast<double>(c.summarizer * 100.0L / t), 1e-9);
        EXPECT_NEAR(s.reason_pct + s.act_pct + s.summarizer_pct, 100.0, 1e-9);
        EXPECT_EQ(s.reason_tenths, tenths_oracle(static_cast<std::int64_t>(c.reason), total));
        EXPECT_EQ(s.act_tenths, tenths_oracle(static_cast<std::int64_t>(c.act), total));
        EXPECT_EQ(s.summarizer_tenths, tenths_oracle(static_cast<std::int64_t>(c.summarizer), total));
    }
}

TEST(ComponentShares, HalfUpBoundary) {
    // 1/8 = 12.5% exactly; 1/16 = 6.25% rounds to 6.3; 1/3 = 33.33..% rounds to 33.3
    EXPECT_EQ(percent_tenths_half_up(1, 8), 125);
    EXPECT_EQ(percent_tenths_half_up(1, 16), 63);
    EXPECT_EQ(percent_tenths_half_up(1, 3), 333);
    EXPECT_EQ(percent_tenths_half_up(2, 3), 667);
    EXPECT_EQ(format_tenths(-2910), "-291.0");
}

TEST(ChatTranscript, TokenEstimateIsCharsOverFour) {
    ChatTranscript t(SessionKind::Act);
    EXPECT_EQ(t.token_estimate(), 0u);
    t.append(Role::User, std::string(400, 'x'));
    const auto one = t.token_estimate();
    EXPECT_GE(one, 100u);
    EXPECT_LE(one, 110u);
    EXPECT_TRUE(t.append_within(ChatMessage{Role::User, std::string(4000, 'y'), std::nullopt}, one + 20));
    EXPECT_LE(t.token_estimate(), one + 20);
    EXPECT_NE(t.messages().back().content.find("[truncated"), std::string::npos);
    EXPECT_FALSE(t.append_within(ChatMessage{Role::User, "more", std::nullopt}, t.token_estimate()));
}

namespace {

struct FakeApi {
    httplib::Server server;
    std::thread thread;
    int port = 0;
    std::atomic<int> hits{0};
    std::function<void(const httplib::Request&, httplib::Response&)> handler;

    FakeApi() {
        server.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
            ++hits;
            handler(req, res);
        });
        port = server.bind_to_any_port("127.0.0.1");
        thread = std::thread([this] { server.listen_after_bind(); });
        server.wait_until_ready();
    }
    ~FakeApi() {
        server.stop();
        thread.join();
    }
    LiveProviderConfig config() const {
        LiveProviderConfig c;
        c.endpoint = "http://127.0.0.1:" + std::to_string(port) + "/v1";
        c.api_key = "sk-test-secret";
        c.model = "test-model";
        c.initial_backoff = std::chrono::milliseconds(5);
        c.timeout = std::chrono::seconds(5);
        return c;
    }
};

}  // namespace

TEST(LiveProvider, ParsesToolCallResponse) {
    FakeApi api;
    std::string seen_auth;
    json seen_body;
    api.handler = [&](const httplib::Request& req, httplib::Response& res) {
        seen_auth = req.get_header_value("Authorization");
        seen_body = json::parse(req.body);
        res.set_content(json{{"choices", {{{"message", {{"content", ""},
                                                        {"tool_calls", {{{"id", "c1"},
                                                                         {"type", "function"},
                                                                         {"function", {{"name", "terminal"},
                                                                                       {"arguments", "{\"command\":\"id\"}"}}}}}}}}}}},
                             {"usage", {{"prompt_tokens", 12}, {"completion_tokens", 3}}}}
                            .dump(),
                        "application/json");
    };
    LiveProvider p(api.config());
    Completion c = p.generate(transcript_of(SessionKind::Act), 0);
    ASSERT_TRUE(c.tool_call);
    EXPECT_EQ(c.tool_call->command(), "id");
    EXPECT_EQ(c.usage.prompt_tokens, 12u);
    EXPECT_EQ(seen_auth, "Bearer sk-test-secret");
    EXPECT_EQ(seen_body["model"], "test-model");
    EXPECT_TRUE(seen_body.contains("tools"));
}

TEST(LiveProvider, RetriesTransientFailuresThreeTimes) {
    FakeApi api;
    api.handler = [&](const httplib::Request&, httplib::Response& res) {
        if (api.hits < 3) {
            res.status = 503;
            return;
        }
        res.set_content(R"({"choices":[{"message":{"content":"ok"}}]})", "application/json");
    };
    LiveProvider p(api.config());
    EXPECT_EQ(p.generate(transcript_of(SessionKind::Reason), 0).text, "ok");
    EXPECT_EQ(api.hits.load(), 3);
}

TEST(LiveProvider, ExhaustedRetriesAreRetriableProviderError) {
    FakeApi api;
    api.handler = [](const httplib::Request&, httplib::Response& res) { res.status = 500; };
    LiveProvider p(api.config());
    try {
        p.generate(transcript_of(SessionKind::Reason), 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProviderError);
        EXPECT_TRUE(e.retriable());
        EXPECT_EQ(std::string(e.what()).find("sk-test-secret"), std::string::npos);
    }
    EXPECT_EQ(api.hits.load(), 3);
}

TEST(LiveProvider, ClientErrorIsNotRetried) {
    FakeApi api;
    api.handler = [](const httplib::Request&, httplib::Response& res) {
        res.status = 400;
        res.set_content(R"({"error":"bad"})", "application/json");
    };
    LiveProvider p(api.config());
    try {
        p.generate(transcript_of(SessionKind::Reason), 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProviderError);
        EXPECT_FALSE(e.retriable());
    }
    EXPECT_EQ(api.hits.load(), 1);
}

TEST(LiveProvider, UnreachableEndpointIsRetriable) {
    LiveProviderConfig c;
    c.endpoint = "http://127.0.0.1:1/v1";
    c.model = "m";
    c.initial_backoff = std::chrono::milliseconds(1);
    c.timeout = std::chrono::seconds(2);
    LiveProvider p(c);
    try {
        p.generate(transcript_of(SessionKind::Reason), 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::ProviderError);
        EXPECT_TRUE(e.retriable());
    }
}

TEST(ChatTranscript, EvictOldestKeepsPrefixAndNewest) {
    ChatTranscript t(SessionKind::Act);
    t.append(Role::System, std::string(40, 's'));
    t.append(Role::User, std::string(40, 't'));
    for (int i = 0; i < 6; ++i) t.append(Role::User, std::string(40, static_cast<char>('a' + i)));
    EXPECT_EQ(t.token_estimate(), 80u);
    EXPECT_EQ(t.evict_oldest(100, 0, 2, true), 0u);
    EXPECT_EQ(t.evict_oldest(60, 5, 2, true), 3u);
    EXPECT_EQ(t.token_estimate(), 50u);
    ASSERT_EQ(t.messages().size(), 5u);
    EXPECT_EQ(t.messages()[1].content[0], 't');
    EXPECT_EQ(t.messages()[2].content[0], 'd');
    EXPECT_EQ(t.evict_oldest(10, 0, 2, true), 2u);
    EXPECT_EQ(t.messages().back().content[0], 'f');
    EXPECT_EQ(t.evict_oldest(10, 0, 2, false), 1u);
    EXPECT_EQ(t.messages().size(), 2u);
    EXPECT_EQ(t.evict_oldest(10, 0, 2, false), 0u);
}
