#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <httplib.h>
#include <nlohmann/json.hpp>

#include "redteam/audit_log.hpp"
#include "redteam/error.hpp"
#include "redteam/eval_harness.hpp"
#include "redteam/orchestrator.hpp"
#include "redteam/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace redteam;

namespace {

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open " + path);
    json j = json::parse(in, nullptr, false);
    if (j.is_discarded()) throw Error(ErrorCode::ParseError, path + " is not valid JSON");
    return j;
}

struct Common {
    std::string data_dir = "rtl-data";
    std::string scenario_dir;
    std::string credentials;
    std::size_t workers = 4;
};

Orchestrator::Options orchestrator_options(const Common& c) {
    Orchestrator::Options o;
    o.data_dir = c.data_dir;
    o.scenario_dir = c.scenario_dir;
    o.max_concurrent_runs = c.workers;
    if (!c.credentials.empty()) o.credentials = CredentialStore::load(c.credentials);
    if (const char* key = std::getenv("REDTEAM_AUDIT_KEY")) o.audit_key = key;
    return o;
}

void print_run(const RunDescriptor& d) {
    std::cout << d.run_id << "  " << to_string(d.state) << "  steps " << d.steps_completed << "/" << d.rubric_total
              << "  tool_calls " << d.totals.tool_calls << "  api reason/act/summarizer " << d.call_counts.reason
              << "/" << d.call_counts.act << "/" << d.call_counts.summarizer;
    if (!d.error.empty()) std::cout << "  error: " << d.error;
    std::cout << "\n";
}

int cmd_run(const Common& common, const std::string& task, const std::string& config_file, const json& cli,
            std::size_t repetitions, bool as_json) {
    json file = config_file.empty() ? json::object() : read_json_file(config_file);
    RunConfig config = RunConfig::layered(file, RunConfig::process_environment(), cli);
    if (config.scenario.empty()) throw Error(ErrorCode::ConfigError, "no scenario given (--scenario)");
    Orchestrator orch(orchestrator_options(common));
    auto session = orch.local_session();
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < repetitions; ++i) ids.push_back(orch.submit(task, config, session.session_id));
    int rc = 0;
    json out = json::array();
    for (const auto& id : ids) {
        RunDescriptor d = orch.wait(id);
        if (as_json) out.push_back(d);
        else print_run(d);
        if (d.state != RunState::Completed && d.state != RunState::Failed) rc = 1;
    }
    if (as_json) std::cout << out.dump(2) << "\n";
    return rc;
}

int cmd_replay(const Common& common, const std::string& trace_path) {
    json trace = read_json_file(trace_path);
    if (trace.value("format", std::string()) != "rtl-trace/1") throw Error(ErrorCode::ParseError, "not a run trace");
    RunConfig config = trace.at("config").get<RunConfig>();
    fs::create_directories(common.data_dir);
    const fs::path script = fs::absolute(fs::path(common.data_dir) / ("replay-" + trace.value("run_id", std::string("run")) +
                                                                      ".script.json"));
    {
        std::ofstream out(script);
        out << trace.at("script").dump(2) << "\n";
    }
    config.provider = ProviderKind::Scripted;
    config.script = script.string();
    Orchestrator orch(orchestrator_options(common));
    auto session = orch.local_session();
    RunDescriptor d = orch.wait(orch.submit(trace.value("task", std::string()), config, session.session_id));
    print_run(d);

    const fs::path original = fs::path(trace_path).parent_path() / "descriptor.json";
    if (!fs::exists(original)) return 0;
    RunDescriptor o = read_json_file(original.string()).get<RunDescriptor>();
    const bool same = o.state == d.state && o.totals.tool_calls == d.totals.tool_calls &&
                      o.call_counts.reason == d.call_counts.reason && o.call_counts.act == d.call_counts.act &&
                      o.call_counts.summarizer == d.call_counts.summarizer && o.credits == d.credits;
    std::cout << (same ? "replay matches " : "replay differs from ") << o.run_id << "\n";
    return same ? 0 : 1;
}

int cmd_bench(const Common& common, const std::string& suite, const std::string& out_dir, std::size_t repetitions) {
    Orchestrator orch(orchestrator_options(common));
    BenchmarkOptions opts = load_suite(suite, orch.options().scenario_dir);
    if (repetitions > 0) opts.repetitions = repetitions;
    auto session = orch.local_session();
    MetricsReport report = run_benchmark(orch, opts, session.session_id);
    write_report(report, out_dir);
    std::cout << aggregates_json(report.aggregates).dump(2) << "\n";
    for (const auto& r : report.rows)
        if (!r.error.empty()) return 1;
    return 0;
}

int cmd_verify_audit(const std::string& path, const std::string& key) {
    AuditVerification v = AuditLog::verify_file(path, key);
    if (v.valid) {
        std::cout << "valid: " << v.events << " events\n";
        return 0;
    }
    std::cout << "INVALID";
    if (v.first_invalid_seq) std::cout << " at seq " << *v.first_invalid_seq;
    std::cout << ": " << v.reason << "\n";
    return 2;
}

std::string login(httplib::Client& client, const std::string& principal, const std::string& password) {
    auto res = client.Post("/sessions", json{{"principal", principal}, {"password", password}}.dump(),
                           "application/json");
    if (!res) throw Error(ErrorCode::ConfigError, "service unreachable");
    if (res->status != 201) throw Error(ErrorCode::InvalidCredentials, "login failed: " + res->body);
    return json::parse(res->body).at("session_id").get<std::string>();
}

int cmd_kill(const std::string& url, const std::string& principal, const std::string& password) {
    httplib::Client client(url);
    const std::string sid = login(client, principal, password);
    auto res = client.Post("/kill-switch", httplib::Headers{{"Authorization", "Bearer " + sid}}, "",
                           "application/json");
    if (!res) throw Error(ErrorCode::ConfigError, "service unreachable");
    std::cout << res->status << " " << res->body << "\n";
    return res->status == 200 ? 0 : 1;
}

volatile std::sig_atomic_t g_stop = 0;

int cmd_serve(const Common& common, const std::string& host, int port) {
    Orchestrator orch(orchestrator_options(common));
    for (const auto& id : orch.recovered_runs()) std::cerr << "recovered " << id << " as Aborted\n";
    ServiceServer::Options so;
    so.host = host;
    so.port = port;
    ServiceServer server(orch, so);
    std::signal(SIGINT, [](int) { g_stop = 1; });
    std::signal(SIGTERM, [](int) { g_stop = 1; });
    const int bound = server.start();
    std::cout << "listening on " << host << ":" << bound << std::endl;
    while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(200));
    server.stop();
    return 0;
}

int cmd_add_operator(const std::string& path, const std::string& principal, const std::string& role) {
    CredentialStore store = fs::exists(path) ? CredentialStore::load(path) : CredentialStore{};
    const char* pw = std::getenv("REDTEAM_OPERATOR_PASSWORD");
    if (!pw || !*pw) throw Error(ErrorCode::ConfigError, "set REDTEAM_OPERATOR_PASSWORD");
    store.add(principal, pw, parse_operator_role(role));
    store.save(path);
    std::cout << "stored " << principal << " (" << role << ") in " << path << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Autonomous offensive-security agent runner"};
    app.require_subcommand(1);
    Common common;
    app.add_option("--data-dir", common.data_dir, "Run artifacts, audit log and memory")->capture_default_str();
    app.add_option("--scenario-dir", common.scenario_dir, "Directory of bundled scenarios");
    app.add_option("--credentials", common.credentials, "Operator credential store");
    app.add_option("--workers", common.workers, "Concurrent runs")->capture_default_str();

    auto* run = app.add_subcommand("run", "Run one scenario");
    std::string task, scenario, provider, policy, config_file, script;
    std::size_t max_depth = 0, repetitions = 1;
    bool no_reasoning = false, as_json = false;
    run->add_option("task", task, "Task description (defaults to the scenario's)");
    run->add_option("--scenario", scenario, "Scenario name or path");
    run->add_option("--provider", provider, "scripted or live");
    run->add_option("--script", script, "Scripted provider file");
    run->add_flag("--no-reasoning", no_reasoning, "Act-only ablation");
    run->add_option("--max-depth", max_depth, "Plan depth limit");
    run->add_option("--approval-policy", policy, "interactive, allowlist or auto_approve");
    run->add_option("--repetitions", repetitions, "Independent runs")->capture_default_str();
    run->add_option("--config", config_file, "JSON config file");
    run->add_flag("--json", as_json, "Print descriptors as JSON");

    auto* replay = app.add_subcommand("replay", "Re-run a recorded trace");
    std::string trace;
    replay->add_option("trace", trace, "trace.json")->required();

    auto* bench = app.add_subcommand("bench", "Run a benchmark suite");
    std::string suite, out_dir = "bench-out";
    std::size_t bench_reps = 0;
    bench->add_option("suite", suite, "Suite name or path")->required();
    bench->add_option("--out", out_dir, "Report directory")->capture_default_str();
    bench->add_option("--repetitions", bench_reps, "Override the suite's repetitions");

    auto* verify = app.add_subcommand("verify-audit", "Check an audit log's hash chain");
    std::string log_path, key;
    verify->add_option("log", log_path, "audit.log")->required();
    verify->add_option("--key", key, "Checkpoint HMAC key")->envname("REDTEAM_AUDIT_KEY");

    auto* kill = app.add_subcommand("kill", "Trip the kill switch of a running service");
    std::string url = "http://127.0.0.1:8420", principal, password;
    kill->add_option("--url", url, "Service base URL")->capture_default_str();
    kill->add_option("--principal", principal)->required();
    kill->add_option("--password", password)->envname("REDTEAM_OPERATOR_PASSWORD")->required();

    auto* serve = app.add_subcommand("serve", "Serve the operator API");
    std::string host = "127.0.0.1";
    int port = 8420;
    serve->add_option("--host", host)->capture_default_str();
    serve->add_option("--port", port)->capture_default_str();

    auto* add_op = app.add_subcommand("add-operator", "Add an operator to a credential store");
    std::string store_path, op_name, op_role = "Operator";
    add_op->add_option("store", store_path)->required();
    add_op->add_option("principal", op_name)->required();
    add_op->add_option("--role", op_role, "Viewer or Operator")->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*run) {
            json cli = json::object();
            if (!scenario.empty()) cli["scenario"] = scenario;
            if (!provider.empty()) cli["provider"] = provider;
            if (!script.empty()) cli["script"] = script;
            if (no_reasoning) cli["reasoning"] = false;
            if (max_depth > 0) cli["max_depth"] = max_depth;
            if (!policy.empty()) cli["approval_policy"] = policy;
            return cmd_run(common, task, config_file, cli, repetitions, as_json);
        }
        if (*replay) return cmd_replay(common, trace);
        if (*bench) return cmd_bench(common, suite, out_dir, bench_reps);
        if (*verify) return cmd_verify_audit(log_path, key);
        if (*kill) return cmd_kill(url, principal, password);
        if (*serve) return cmd_serve(common, host, port);
        if (*add_op) return cmd_add_operator(store_path, op_name, op_role);
    } catch (const Error& e) {
        std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
