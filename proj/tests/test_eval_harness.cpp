#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "redteam/error.hpp"
#include "redteam/eval_harness.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using namespace redteam;
using redteam::testing::TempDir;
using json = nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "no error thrown";
    return ErrorCode::ConfigError;
}

std::vector<WriteupStep> rubric(std::initializer_list<std::pair<const char*, double>> steps) {
    std::vector<WriteupStep> out;
    for (const auto& [id, w] : steps) out.push_back({id, StepCategory::Recon, std::string("step ") + id, w});
    return out;
}

// floor(num * 1000 / den + 1/2) with exact integers; den > 0
std::int64_t exact_tenths(std::int64_t num, std::int64_t den) {
    const std::int64_t a = 2 * num * 1000 + den;
    const std::int64_t b = 2 * den;
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

MetricsRow random_row(std::mt19937& rng, std::size_t rep) {
    static const char* names[] = {"sar-like", "ctf4-like", "odd, \"quoted\" name"};
    std::uniform_int_distribution<int> small(0, 40);
    MetricsRow r;
    r.scenario = names[rng() % 3];
    r.repetition = rep;
    r.reasoning_enabled = rng() % 2;
    r.api_calls = {static_cast<std::uint64_t>(small(rng)), static_cast<std::uint64_t>(small(rng)),
                   static_cast<std::uint64_t>(small(rng)), static_cast<std::uint64_t>(small(rng)),
                   static_cast<std::uint64_t>(small(rng))};
    r.tool_calls = r.api_calls.act;
    r.rubric_total = 7;
    r.steps_completed = static_cast<double>(rng() % 15) / 2.0;
    r.state = rng() % 2 ? "Completed" : "Failed";
    r.run_id = "run-" + std::to_string(rng() % 1000000);
    if (rng() % 7 == 0) r.error = "script not found: a,b\nline two";
    return r;
}

}  // namespace

TEST(Rubric, DistinctCreditsSumWeights) {
    auto four = rubric({{"recon", 1}, {"web", 1}, {"exploit", 1}, {"root", 1}});
    EXPECT_DOUBLE_EQ(score_completion({"recon", "exploit"}, four), 2.0);
    EXPECT_DOUBLE_EQ(score_completion({"recon", "recon", "recon"}, four), 1.0);
    EXPECT_DOUBLE_EQ(score_completion({}, four), 0.0);
    auto half = rubric({{"a", 1}, {"b", 1}, {"c", 1}, {"d", 0.5}});
    EXPECT_DOUBLE_EQ(score_completion({"a", "b", "c", "d"}, half), 3.5);
    EXPECT_EQ(code_of([&] { score_completion({"recon", "ghost"}, four); }), ErrorCode::UnknownRubricStep);
}

TEST(Rubric, ValidationRejectsDuplicatesAndBadWeights) {
    EXPECT_NO_THROW(validate_rubric(rubric({{"a", 1}, {"b", 0.5}})));
    EXPECT_EQ(code_of([] { validate_rubric(rubric({{"a", 1}, {"a", 1}})); }), ErrorCode::ConfigError);
    EXPECT_EQ(code_of([] { validate_rubric(rubric({{"a", 0}})); }), ErrorCode::ConfigError);
    EXPECT_EQ(code_of([] { validate_rubric(rubric({{"a", -1}})); }), ErrorCode::ConfigError);
}

TEST(Rubric, BundledScenarioSizes) {
    const std::map<std::string, double> sizes{
        {"sar-like", 7}, {"cewlkid-like", 6}, {"victim1-like", 4}, {"westwild-like", 4}, {"ctf4-like", 4}};
    for (const auto& [name, total] : sizes) {
        auto s = Scenario::load_file(redteam::testing::kScenarioDir + "/" + name + ".json");
        EXPECT_NO_THROW(validate_rubric(s.writeup)) << name;
        EXPECT_DOUBLE_EQ(s.total_steps(), total) << name;
    }
}

TEST(Drop, PublishedFigures) {
    auto sar = tool_call_drop(63, 100);
    EXPECT_TRUE(sar.defined);
    EXPECT_EQ(sar.tenths, 370);
    EXPECT_EQ(sar.render(), "37.0% drop");
    auto ctf = tool_call_drop(391, 100);
    EXPECT_TRUE(ctf.increase());
    EXPECT_EQ(ctf.tenths, -2910);
    EXPECT_DOUBLE_EQ(ctf.percent(), -291.0);
    EXPECT_EQ(ctf.render(), "increase of 291.0%");
    EXPECT_EQ(tool_call_drop(32, 100).render(), "68.0% drop");
}

TEST(Drop, EdgeCells) {
    EXPECT_FALSE(tool_call_drop(5, 0).defined);
    EXPECT_EQ(tool_call_drop(5, 0).render(), "undefined");
    EXPECT_EQ(tool_call_drop(9, 9).render(), "no change");
    EXPECT_EQ(tool_call_drop(0, 9).render(), "100.0% drop");
    // 1/8 = 12.5% exactly; 1/16 = 6.25% rounds half-up to 6.3
    EXPECT_EQ(tool_call_drop(7, 8).tenths, 125);
    EXPECT_EQ(tool_call_drop(15, 16).tenths, 63);
    EXPECT_EQ(tool_call_drop(17, 16).tenths, -62);
}

TEST(Drop, MatchesExactRationalOracle) {
    std::mt19937 rng(11);
    std::uniform_int_distribution<std::uint64_t> n(0, 5000);
    for (int i = 0; i < 20000; ++i) {
        const std::uint64_t with = n(rng), without = n(rng) + 1;
        const auto d = tool_call_drop(with, without);
        ASSERT_TRUE(d.defined);
        ASSERT_EQ(d.tenths, exact_tenths(static_cast<std::int64_t>(without) - static_cast<std::int64_t>(with),
                                         static_cast<std::int64_t>(without)))
            << with << "/" << without;
    }
}

TEST(Ablation, ParseAndPrint) {
    for (auto a : {Ablation::With, Ablation::Without, Ablation::Both}) EXPECT_EQ(parse_ablation(to_string(a)), a);
    EXPECT_EQ(code_of([] { parse_ablation("sometimes"); }), ErrorCode::ConfigError);
}

TEST(Rows, CsvRoundTrip) {
    std::mt19937 rng(3);
    std::vector<MetricsRow> rows;
    for (std::size_t i = 0; i < 200; ++i) rows.push_back(random_row(rng, i + 1));
    const std::string csv = rows_csv(rows);
    EXPECT_EQ(csv.substr(0, csv.find('\n')),
              "scenario,repetition,reasoning,api_reason,api_act,api_summarizer,api_planner,api_corrector,tool_calls,"
              "steps_completed,rubric_total,state,run_id,error");
    EXPECT_EQ(parse_rows_csv(csv), rows);
    EXPECT_TRUE(parse_rows_csv(rows_csv({})).empty());
}

TEST(Rows, JsonRoundTrip) {
    std::mt19937 rng(4);
    for (int i = 0; i < 50; ++i) {
        auto r = random_row(rng, 1);
        EXPECT_EQ(json(r).get<MetricsRow>(), r);
    }
}

TEST(Aggregates, RecomputedFromRowsByBruteForce) {
    std::mt19937 rng(5);
    for (int round = 0; round < 100; ++round) {
        std::vector<MetricsRow> rows;
        const std::size_t count = rng() % 30;
        for (std::size_t i = 0; i < count; ++i) rows.push_back(random_row(rng, i + 1));
        const Aggregates a = aggregate(rows);

        for (bool reasoning : {true, false}) {
            const auto& side = reasoning ? a.with_reasoning : a.without_reasoning;
            std::set<std::string> names;
            for (const auto& r : rows)
                if (r.error.empty() && r.reasoning_enabled == reasoning) names.insert(r.scenario);
            ASSERT_EQ(side.size(), names.size());
            for (const auto& name : names) {
                std::size_t runs = 0;
                double best = 0;
                std::uint64_t tools = 0, reason = 0, act = 0, summ = 0, plan = 0, corr = 0;
                for (const auto& r : rows) {
                    if (!r.error.empty() || r.reasoning_enabled != reasoning || r.scenario != name) continue;
                    ++runs;
                    best = std::max(best, r.steps_completed);
                    tools += r.tool_calls;
                    reason += r.api_calls.reason;
                    act += r.api_calls.act;
                    summ += r.api_calls.summarizer;
                    plan += r.api_calls.planner;
                    corr += r.api_calls.corrector;
                }
                const auto& c = side.at(name);
                EXPECT_EQ(c.runs, runs);
                EXPECT_DOUBLE_EQ(c.max_steps, best);
                EXPECT_EQ(c.total_tool_calls, tools);
                EXPECT_EQ(c.api_calls, (CallCounts{reason, act, summ, plan, corr}));
                const std::uint64_t total = reason + act + summ;
                ASSERT_EQ(c.shares.has_value(), total > 0);
                if (total > 0) {
                    const auto t = static_cast<std::int64_t>(total);
                    EXPECT_EQ(c.shares->reason_tenths, exact_tenths(static_cast<std::int64_t>(reason), t));
                    EXPECT_EQ(c.shares->act_tenths, exact_tenths(static_cast<std::int64_t>(act), t));
                    EXPECT_EQ(c.shares->summarizer_tenths, exact_tenths(static_cast<std::int64_t>(summ), t));
                }
            }
        }
        for (const auto& [name, d] : a.deltas) {
            ASSERT_TRUE(a.with_reasoning.contains(name) && a.without_reasoning.contains(name));
            const auto& w = a.with_reasoning.at(name);
            const auto& wo = a.without_reasoning.at(name);
            EXPECT_DOUBLE_EQ(d.step_delta, w.max_steps - wo.max_steps);
            EXPECT_EQ(d.tool_call_drop.defined, wo.total_tool_calls > 0);
            if (wo.total_tool_calls > 0) {
                EXPECT_EQ(d.tool_call_drop.tenths,
                          exact_tenths(static_cast<std::int64_t>(wo.total_tool_calls) -
                                           static_cast<std::int64_t>(w.total_tool_calls),
                                       static_cast<std::int64_t>(wo.total_tool_calls)));
            }
        }
        std::size_t both = 0;
        for (const auto& [name, c] : a.with_reasoning) both += a.without_reasoning.contains(name);
        EXPECT_EQ(a.deltas.size(), both);

        // rendering is a pure function of rows, including their order
        auto shuffled = rows;
        std::shuffle(shuffled.begin(), shuffled.end(), rng);
        EXPECT_EQ(aggregates_json(aggregate(shuffled)), aggregates_json(a));
        EXPECT_EQ(plot_data(rows), plot_data(rows));
    }
}

TEST(Suites, BundledPresets) {
    const std::string dir = redteam::testing::kScenarioDir;
    auto ablation = load_suite("ablation", dir);
    EXPECT_EQ(ablation.repetitions, 5u);
    EXPECT_EQ(ablation.ablation, Ablation::Both);
    EXPECT_EQ(ablation.scenarios.size(), 5u);
    auto accounting = load_suite("accounting", dir);
    EXPECT_EQ(accounting.repetitions, 10u);
    EXPECT_EQ(accounting.ablation, Ablation::With);
    EXPECT_EQ(code_of([&] { load_suite("missing-suite", dir); }), ErrorCode::ConfigError);
}

class BenchmarkTest : public ::testing::Test {
protected:
    TempDir dir;
    std::unique_ptr<Orchestrator> orch;
    std::string session;

    void SetUp() override {
        Orchestrator::Options o;
        o.data_dir = dir.file("data");
        o.scenario_dir = redteam::testing::kScenarioDir;
        o.max_concurrent_runs = 4;
        orch = std::make_unique<Orchestrator>(o);
        session = orch->local_session().session_id;
    }
};

TEST_F(BenchmarkTest, CellsAreDeterministicAcrossRepetitions) {
    BenchmarkOptions opts;
    opts.scenarios = {"sar-like"};
    opts.repetitions = 2;
    opts.ablation = Ablation::Both;
    const MetricsReport report = run_benchmark(*orch, opts, session);
    ASSERT_EQ(report.rows.size(), 4u);
    auto strip = [](MetricsRow r) {
        r.run_id.clear();
        r.repetition = 0;
        return r;
    };
    std::vector<MetricsRow> with, without;
    for (const auto& r : report.rows) {
        EXPECT_TRUE(r.error.empty()) << r.error;
        EXPECT_LE(r.steps_completed, r.rubric_total);
        (r.reasoning_enabled ? with : without).push_back(r);
    }
    ASSERT_EQ(with.size(), 2u);
    ASSERT_EQ(without.size(), 2u);
    EXPECT_EQ(strip(with[0]), strip(with[1]));
    EXPECT_EQ(strip(without[0]), strip(without[1]));
    EXPECT_EQ(aggregates_json(report.aggregates), aggregates_json(aggregate(report.rows)));

    const json expected = redteam::testing::expected_counts()["sar-like"];
    EXPECT_EQ(with[0].tool_calls, expected["with"]["tool_calls"].get<std::uint64_t>());
    EXPECT_EQ(without[0].tool_calls, expected["without"]["tool_calls"].get<std::uint64_t>());
    EXPECT_LE(with[0].tool_calls, without[0].tool_calls);
    EXPECT_EQ(report.aggregates.deltas.at("sar-like").tool_call_drop.render(), "37.0% drop");

    // tool calls are the Act completions that carried a tool call
    for (const auto& r : report.rows) {
        std::uint64_t from_transcripts = 0;
        for (const auto& leaf : orch->leaf_runs(r.run_id))
            for (const auto& m : leaf.act_transcript.messages())
                from_transcripts += m.role == Role::Assistant && m.tool_call.has_value();
        EXPECT_EQ(from_transcripts, r.tool_calls) << r.run_id;
    }
}

TEST_F(BenchmarkTest, AblationReproducesQualitativePattern) {
    BenchmarkOptions opts;
    opts.scenarios = {"sar-like", "cewlkid-like", "victim1-like", "westwild-like", "ctf4-like"};
    opts.repetitions = 1;
    const MetricsReport report = run_benchmark(*orch, opts, session);
    ASSERT_EQ(report.rows.size(), 10u);
    const auto& d = report.aggregates.deltas;
    EXPECT_EQ(d.at("sar-like").tool_call_drop.render(), "37.0% drop");
    EXPECT_EQ(d.at("victim1-like").tool_call_drop.render(), "68.0% drop");
    EXPECT_TRUE(d.at("ctf4-like").tool_call_drop.increase());
    EXPECT_EQ(std::llround(-d.at("ctf4-like").tool_call_drop.percent()), 291);
    std::size_t drops = 0, gains = 0;
    for (const auto& [name, delta] : d) {
        drops += delta.tool_call_drop.tenths > 0;
        gains += delta.step_delta > 0;
    }
    EXPECT_EQ(drops, 4u);
    EXPECT_EQ(gains, 4u);
    const json summary = aggregates_json(report.aggregates)["summary"];
    EXPECT_EQ(summary["fewer_tool_calls_with_reasoning"], 4);
}

TEST_F(BenchmarkTest, MissingScriptFailsOnlyItsCell) {
    const fs::path scripts = dir.path() / "scripts";
    fs::create_directories(scripts);
    fs::copy_file(redteam::testing::kScenarioDir + "/westwild-like.with.script.json",
                  scripts / "westwild-like.with.script.json");
    BenchmarkOptions opts;
    opts.scenarios = {"westwild-like"};
    opts.repetitions = 2;
    opts.script_dir = scripts.string();
    const MetricsReport report = run_benchmark(*orch, opts, session);
    ASSERT_EQ(report.rows.size(), 4u);
    for (const auto& r : report.rows) {
        if (r.reasoning_enabled) {
            EXPECT_TRUE(r.error.empty());
            EXPECT_EQ(r.state, "Completed");
        } else {
            EXPECT_NE(r.error.find("script"), std::string::npos);
        }
    }
    EXPECT_EQ(report.aggregates.with_reasoning.at("westwild-like").runs, 2u);
    EXPECT_FALSE(report.aggregates.without_reasoning.contains("westwild-like"));
    EXPECT_TRUE(report.aggregates.deltas.empty());
}

TEST_F(BenchmarkTest, ReportFilesAreSelfConsistent) {
    BenchmarkOptions opts;
    opts.scenarios = {"victim1-like"};
    opts.repetitions = 1;
    const MetricsReport report = run_benchmark(*orch, opts, session);
    const std::string out = dir.file("report");
    write_report(report, out);
    const auto rows = parse_rows_csv(redteam::testing::slurp(out + "/rows.csv"));
    EXPECT_EQ(rows, report.rows);
    EXPECT_EQ(redteam::testing::load_json(out + "/aggregates.json"), aggregates_json(aggregate(rows)));
    EXPECT_EQ(redteam::testing::load_json(out + "/plotdata.json"), plot_data(rows));
}
