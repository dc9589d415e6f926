#include "redteam/orchestrator.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "redteam/error.hpp"
#include "redteam/eval_harness.hpp"
#include "redteam/planner.hpp"

#ifndef REDTEAM_DEFAULT_SCENARIO_DIR
#define REDTEAM_DEFAULT_SCENARIO_DIR "scenarios"
#endif

namespace fs = std::filesystem;

namespace redteam {

namespace {

constexpr std::string_view kRunStateNames[] = {"Queued",     "Planning",  "Executing", "AwaitingApproval",
                                               "Correcting", "Completed", "Failed",    "Aborted"};

void write_atomic(const fs::path& path, const std::string& content) {
    fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error(ErrorCode::StorageError, "cannot write " + tmp.string());
        out << content;
        if (!out.flush()) throw Error(ErrorCode::StorageError, "short write to " + tmp.string());
    }
    fs::rename(tmp, path);
}

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::StorageError, "cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string_view to_key(ProviderKind k) { return k == ProviderKind::Live ? "live" : "scripted"; }

ProviderKind parse_provider(std::string_view s) {
    if (s == "scripted") return ProviderKind::Scripted;
    if (s == "live") return ProviderKind::Live;
    throw Error(ErrorCode::ConfigError, "unknown provider " + std::string(s) + " (scripted|live)");
}

std::string_view policy_key(ApprovalPolicy p) {
    switch (p) {
        case ApprovalPolicy::Interactive: return "interactive";
        case ApprovalPolicy::Allowlist: return "allowlist";
        case ApprovalPolicy::AutoApprove: return "auto_approve";
    }
    return "interactive";
}

SandboxMode parse_sandbox(std::string_view s) {
    if (s == "simulated") return SandboxMode::Simulated;
    if (s == "container") return SandboxMode::Container;
    throw Error(ErrorCode::ConfigError, "unknown sandbox " + std::string(s) + " (simulated|container)");
}

// An environment string coerced to the JSON type of the value it overrides.
nlohmann::json coerce(const std::string& key, const std::string& text, const nlohmann::json& like) {
    try {
        if (like.is_boolean()) {
            if (text == "1" || text == "true" || text == "yes" || text == "on") return true;
            if (text == "0" || text == "false" || text == "no" || text == "off") return false;
            throw Error(ErrorCode::ConfigError, "not a boolean");
        }
        if (like.is_number_unsigned() || like.is_number_integer()) {
            std::size_t used = 0;
            const unsigned long long v = std::stoull(text, &used);
            if (used != text.size() || text.front() == '-') throw Error(ErrorCode::ConfigError, "not a count");
            return v;
        }
        if (like.is_array()) {
            nlohmann::json arr = nlohmann::json::array();
            std::stringstream ss(text);
            std::string item;
            while (std::getline(ss, item, ','))
                if (!item.empty()) arr.push_back(item);
            return arr;
        }
    } catch (const std::logic_error&) {
        throw Error(ErrorCode::ConfigError, "bad value for " + key + ": " + text);
    } catch (const Error&) {
        throw Error(ErrorCode::ConfigError, "bad value for " + key + ": " + text);
    }
    return text;
}

void merge_layer(nlohmann::json& into, const nlohmann::json& layer, std::string_view origin) {
    if (layer.is_null()) return;
    if (!layer.is_object()) throw Error(ErrorCode::ConfigError, std::string(origin) + " config is not an object");
    for (const auto& [k, v] : layer.items()) {
        if (!into.contains(k)) throw Error(ErrorCode::ConfigError, "unknown config key '" + k + "' in " + std::string(origin));
        into[k] = v;
    }
}

}  // namespace

std::string_view to_string(RunState s) noexcept { return kRunStateNames[static_cast<std::size_t>(s)]; }

std::optional<RunState> parse_run_state(std::string_view s) noexcept {
    for (std::size_t i = 0; i < std::size(kRunStateNames); ++i)
        if (kRunStateNames[i] == s) return static_cast<RunState>(i);
    return std::nullopt;
}

bool is_terminal(RunState s) noexcept {
    return s == RunState::Completed || s == RunState::Failed || s == RunState::Aborted;
}

bool is_legal_transition(RunState from, RunState to) noexcept {
    using S = RunState;
    if (is_terminal(from)) return false;
    if (to == S::Aborted || to == S::Failed) return true;
    switch (from) {
        case S::Queued: return to == S::Planning;
        case S::Planning: return to == S::Executing || to == S::Completed;
        case S::Executing:
            return to == S::AwaitingApproval || to == S::Correcting || to == S::Planning || to == S::Completed;
        case S::AwaitingApproval: return to == S::Executing;
        case S::Correcting: return to == S::Executing || to == S::Planning || to == S::Completed;
        default: return false;
    }
}

ApprovalPolicy RunConfig::effective_policy() const noexcept {
    if (approval_policy) return *approval_policy;
    return sandbox == SandboxMode::Simulated ? ApprovalPolicy::AutoApprove : ApprovalPolicy::Interactive;
}

void to_json(nlohmann::json& j, const RunConfig& c) {
    j = {{"scenario", c.scenario},
         {"provider", to_key(c.provider)},
         {"script", c.script},
         {"reasoning", c.reasoning},
         {"max_depth", c.max_depth},
         {"max_steps", c.max_steps},
         {"summarize_threshold", c.summarize_threshold},
         {"act_context_budget", c.act_context_budget},
         {"reason_context_budget", c.reason_context_budget},
         {"approval_policy", c.approval_policy ? std::string(policy_key(*c.approval_policy)) : std::string("default")},
         {"allowlist", c.allowlist},
         {"approval_timeout_ms", c.approval_timeout_ms},
         {"sandbox", to_string(c.sandbox)},
         {"network_scope", c.network_scope},
         {"launcher", c.launcher},
         {"command_timeout_ms", c.command_timeout_ms},
         {"grace_ms", c.grace_ms},
         {"capture_limit", c.capture_limit},
         {"corrector", c.corrector},
         {"correction_attempts_per_node", c.correction_attempts_per_node},
         {"correction_budget", c.correction_budget},
         {"use_memory", c.use_memory},
         {"memory_k", c.memory_k}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    nlohmann::json full = RunConfig{};
    merge_layer(full, j, "run");
    try {
        c.scenario = full.at("scenario").get<std::string>();
        c.provider = parse_provider(full.at("provider").get<std::string>());
        c.script = full.at("script").get<std::string>();
        c.reasoning = full.at("reasoning").get<bool>();
        c.max_depth = full.at("max_depth").get<std::size_t>();
        c.max_steps = full.at("max_steps").get<std::size_t>();
        c.summarize_threshold = full.at("summarize_threshold").get<std::size_t>();
        c.act_context_budget = full.at("act_context_budget").get<std::size_t>();
        c.reason_context_budget = full.at("reason_context_budget").get<std::size_t>();
        const auto policy = full.at("approval_policy").get<std::string>();
        c.approval_policy = policy == "default" ? std::nullopt : std::optional(parse_approval_policy(policy));
        c.allowlist = full.at("allowlist").get<std::vector<std::string>>();
        c.approval_timeout_ms = full.at("approval_timeout_ms").get<std::uint64_t>();
        c.sandbox = parse_sandbox(full.at("sandbox").get<std::string>());
        c.network_scope = full.at("network_scope").get<std::vector<std::string>>();
        c.launcher = full.at("launcher").get<std::vector<std::string>>();
        c.command_timeout_ms = full.at("command_timeout_ms").get<std::uint64_t>();
        c.grace_ms = full.at("grace_ms").get<std::uint64_t>();
        c.capture_limit = full.at("capture_limit").get<std::size_t>();
        c.corrector = full.at("corrector").get<bool>();
        c.correction_attempts_per_node = full.at("correction_attempts_per_node").get<std::size_t>();
        c.correction_budget = full.at("correction_budget").get<std::size_t>();
        c.use_memory = full.at("use_memory").get<bool>();
        c.memory_k = full.at("memory_k").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("bad config value: ") + e.what());
    }
    if (c.max_steps == 0) throw Error(ErrorCode::ConfigError, "max_steps must be positive");
    if (c.launcher.empty()) throw Error(ErrorCode::ConfigError, "launcher must not be empty");
}

std::string RunConfig::env_name(std::string_view key) {
    std::string name = "REDTEAM_";
    for (char ch : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    return name;
}

RunConfig::EnvLookup RunConfig::process_environment() {
    return [](const std::string& name) -> std::optional<std::string> {
        const char* v = std::getenv(name.c_str());
        if (!v) return std::nullopt;
        return std::string(v);
    };
}

RunConfig RunConfig::layered(const nlohmann::json& file, const EnvLookup& env, const nlohmann::json& cli) {
    nlohmann::json merged = RunConfig{};
    merge_layer(merged, file, "file");
    if (env) {
        nlohmann::json env_layer = nlohmann::json::object();
        for (const auto& [k, v] : merged.items())
            if (auto text = env(env_name(k))) env_layer[k] = coerce(k, *text, v);
        merge_layer(merged, env_layer, "environment");
    }
    merge_layer(merged, cli, "command line");
    return merged.get<RunConfig>();
}

void to_json(nlohmann::json& j, const RunDescriptor& d) {
    j = {{"run_id", d.run_id},
         {"task", d.task},
         {"state", to_string(d.state)},
         {"config", d.config},
         {"submitted_by", d.submitted_by},
         {"submitted_at", d.submitted_at},
         {"started_at", d.started_at},
         {"finished_at", d.finished_at},
         {"totals", d.totals},
         {"call_counts", d.call_counts},
         {"credits", d.credits},
         {"steps_completed", d.steps_completed},
         {"rubric_total", d.rubric_total},
         {"corrections", d.corrections},
         {"peak_act_tokens", d.peak_act_tokens},
         {"recovered", d.recovered},
         {"error", d.error}};
}

void from_json(const nlohmann::json& j, RunDescriptor& d) {
    d.run_id = j.at("run_id").get<std::string>();
    d.task = j.at("task").get<std::string>();
    auto state = parse_run_state(j.at("state").get<std::string>());
    if (!state) throw Error(ErrorCode::ParseError, "unknown run state in descriptor " + d.run_id);
    d.state = *state;
    d.config = j.at("config").get<RunConfig>();
    d.submitted_by = j.value("submitted_by", std::string());
    d.submitted_at = j.value("submitted_at", std::string());
    d.started_at = j.value("started_at", std::string());
    d.finished_at = j.value("finished_at", std::string());
    d.totals = j.value("totals", NodeMetrics{});
    d.call_counts = j.value("call_counts", CallCounts{});
    d.credits = j.value("credits", std::vector<std::string>{});
    d.steps_completed = j.value("steps_completed", 0.0);
    d.rubric_total = j.value("rubric_total", 0.0);
    d.corrections = j.value("corrections", std::size_t{0});
    d.peak_act_tokens = j.value("peak_act_tokens", std::size_t{0});
    d.recovered = j.value("recovered", false);
    d.error = j.value("error", std::string());
}

void to_json(nlohmann::json& j, const StateEvent& e) {
    j = {{"cursor", e.cursor}, {"run_id", e.run_id},   {"seq", e.seq},
         {"kind", e.kind},     {"payload", e.payload}, {"timestamp", e.timestamp}};
}

void from_json(const nlohmann::json& j, StateEvent& e) {
    e.cursor = j.value("cursor", std::uint64_t{0});
    e.run_id = j.at("run_id").get<std::string>();
    e.seq = j.at("seq").get<std::uint64_t>();
    e.kind = j.at("kind").get<std::string>();
    e.payload = j.value("payload", nlohmann::json::object());
    e.timestamp = j.value("timestamp", std::string());
}

// ---------------------------------------------------------------- EventBus

EventBus::EventBus(WallClock clock) : clock_(std::move(clock)) {
    if (!clock_) clock_ = [] { return std::chrono::system_clock::now(); };
}

StateEvent EventBus::publish(const std::string& run_id, std::string_view kind, nlohmann::json payload) {
    StateEvent e;
    std::vector<std::function<void(const StateEvent&)>> subs;
    {
        std::lock_guard lock(mutex_);
        e.cursor = events_.size() + 1;
        e.run_id = run_id;
        e.seq = ++run_seq_[run_id];
        e.kind = std::string(kind);
        e.payload = std::move(payload);
        e.timestamp = format_timestamp(clock_());
        events_.push_back(e);
        for (const auto& [id, s] : subscribers_) subs.push_back(s);
    }
    cv_.notify_all();
    for (const auto& s : subs) s(e);
    return e;
}

std::vector<StateEvent> EventBus::since(std::uint64_t cursor, const std::optional<std::string>& run_id,
                                        std::size_t max) const {
    std::lock_guard lock(mutex_);
    std::vector<StateEvent> out;
    for (std::size_t i = cursor; i < events_.size() && out.size() < max; ++i)
        if (!run_id || events_[i].run_id == *run_id) out.push_back(events_[i]);
    return out;
}

std::vector<StateEvent> EventBus::for_run(const std::string& run_id) const { return since(0, run_id); }

bool EventBus::wait(std::uint64_t cursor, std::chrono::milliseconds timeout) const {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return events_.size() > cursor; });
}

std::uint64_t EventBus::cursor() const {
    std::lock_guard lock(mutex_);
    return events_.size();
}

EventBus::SubscriberId EventBus::subscribe(std::function<void(const StateEvent&)> subscriber) {
    std::lock_guard lock(mutex_);
    const auto id = next_subscriber_++;
    subscribers_.emplace(id, std::move(subscriber));
    return id;
}

void EventBus::unsubscribe(SubscriberId id) {
    std::lock_guard lock(mutex_);
    subscribers_.erase(id);
}

std::map<NodeId, NodeStatus> project_tree_statuses(const std::vector<StateEvent>& events, const std::string& run_id) {
    std::vector<const StateEvent*> mine;
    std::set<std::uint64_t> seen;
    for (const auto& e : events)
        if (e.run_id == run_id && seen.insert(e.seq).second) mine.push_back(&e);
    std::sort(mine.begin(), mine.end(), [](const StateEvent* a, const StateEvent* b) { return a->seq < b->seq; });
    std::map<NodeId, NodeStatus> statuses;
    for (const StateEvent* e : mine) {
        if (e->kind != event_kind::NodeAdded && e->kind != event_kind::NodeStatus) continue;
        auto s = parse_node_status(e->payload.at("status").get<std::string>());
        if (s) statuses[e->payload.at("node_id").get<std::string>()] = *s;
    }
    return statuses;
}

// ------------------------------------------------------------ Orchestrator

struct Orchestrator::Run {
    mutable std::mutex m;
    RunDescriptor desc;
    std::shared_ptr<const Scenario> scenario;
    std::string script_path;
    std::vector<LeafRun> leaves;
    std::set<std::string> credit_set;

    std::mutex tree_mutex;
    std::optional<PlanTree> tree;

    std::atomic<bool> stop{false};
    std::atomic<bool> abandoned{false};
    std::atomic<bool> settled{false};  // terminal and its artifacts are on disk
};

Orchestrator::Orchestrator(Options options) : options_(std::move(options)), events_(options_.clock) {
    if (options_.data_dir.empty()) throw Error(ErrorCode::ConfigError, "data_dir is required");
    if (options_.scenario_dir.empty()) {
        const char* env = std::getenv("REDTEAM_SCENARIO_DIR");
        options_.scenario_dir = env ? env : REDTEAM_DEFAULT_SCENARIO_DIR;
    }
    if (options_.max_concurrent_runs == 0) options_.max_concurrent_runs = 1;
    if (!options_.clock) options_.clock = [] { return std::chrono::system_clock::now(); };
    if (!options_.embedder) options_.embedder = std::make_shared<HashEmbedder>(256);
    if (!options_.spawner) options_.spawner = std::make_shared<PosixSpawner>();
    fs::create_directories(fs::path(options_.data_dir) / "runs");

    kill_switch_ = std::make_shared<KillSwitch>();
    const fs::path audit_path = fs::path(options_.data_dir) / "audit.log";
    audit_ = std::make_unique<AuditLog>(
        AuditLog::Options{audit_path.string(), options_.audit_key, options_.durable, options_.clock, {}});
    Authenticator::Options auth_options;
    auth_options.clock = options_.clock;
    authenticator_ =
        std::make_unique<Authenticator>(options_.credentials.value_or(CredentialStore{}), audit_.get(), auth_options);
    approvals_ = std::make_unique<ApprovalGate>(*audit_, kill_switch_, authenticator_.get(), options_.clock);
    MemoryStore::Options mem;
    mem.path = (fs::path(options_.data_dir) / "memory.db").string();
    mem.dimension = options_.embedder->dimension();
    mem.durable = options_.durable;
    memory_ = std::make_unique<MemoryStore>(mem);

    approvals_->on_pending([this](const ApprovalRequest& r) {
        auto run = find(r.run_id);
        if (!run) return;
        {
            std::lock_guard lock(run->m);
            if (run->desc.state != RunState::Executing) return;
        }
        events_.publish(r.run_id, event_kind::ApprovalPending, nlohmann::json(r));
        set_state(*run, RunState::AwaitingApproval);
    });
    approvals_->on_resolved([this](const ApprovalRequest& r) {
        auto run = find(r.run_id);
        if (!run) return;
        events_.publish(r.run_id, event_kind::ApprovalResolved, nlohmann::json(r));
        bool waiting;
        {
            std::lock_guard lock(run->m);
            waiting = run->desc.state == RunState::AwaitingApproval;
        }
        if (waiting) set_state(*run, RunState::Executing);
    });

    recover();
    for (std::size_t i = 0; i < options_.max_concurrent_runs; ++i) workers_.emplace_back([this] { worker_loop(); });
}

Orchestrator::~Orchestrator() {
    std::vector<std::shared_ptr<Run>> queued;
    {
        std::lock_guard lock(mutex_);
        shutting_down_ = true;
        for (const auto& id : queue_) queued.push_back(runs_.at(id));
        queue_.clear();
        for (auto& [id, run] : runs_) run->stop = true;
    }
    for (const auto& [id, run] : runs_) approvals_->cancel_run(id);
    queue_cv_.notify_all();
    for (auto& w : workers_) w.join();
    for (const auto& run : queued) {
        try {
            finalize(run, true, "");
        } catch (...) {
        }
    }
}

std::string Orchestrator::now() const { return format_timestamp(options_.clock()); }

std::string Orchestrator::run_dir(const std::string& run_id) const {
    return (fs::path(options_.data_dir) / "runs" / run_id).string();
}

std::string Orchestrator::scenario_path(const std::string& scenario) const {
    if (scenario.find('/') != std::string::npos || (scenario.size() > 5 && scenario.ends_with(".json")))
        return scenario;
    return (fs::path(options_.scenario_dir) / (scenario + ".json")).string();
}

std::string Orchestrator::default_script_path(const RunConfig& config) const {
    std::string stem = config.scenario;
    if (stem.find('/') != std::string::npos || stem.ends_with(".json")) {
        fs::path p(stem);
        return (p.parent_path() / (p.stem().string() + (config.reasoning ? ".with" : ".without") + ".script.json"))
            .string();
    }
    return (fs::path(options_.scenario_dir) / (stem + (config.reasoning ? ".with" : ".without") + ".script.json"))
        .string();
}

std::shared_ptr<Orchestrator::Run> Orchestrator::find(const std::string& run_id) const {
    std::lock_guard lock(mutex_);
    auto it = runs_.find(run_id);
    return it == runs_.end() ? nullptr : it->second;
}

void Orchestrator::fault(std::string_view point, const std::string& run_id) {
    if (options_.fault_hook) options_.fault_hook(point, run_id);
}

OperatorSession Orchestrator::local_session(OperatorRole role) { return authenticator_->issue("local", role); }

void Orchestrator::persist_descriptor(const Run& run) {
    nlohmann::json doc;
    std::string id;
    {
        std::lock_guard lock(run.m);
        doc = run.desc;
        id = run.desc.run_id;
    }
    write_atomic(fs::path(run_dir(id)) / "descriptor.json", doc.dump(2) + "\n");
}

void Orchestrator::persist_tree(Run& run) {
    std::string doc;
    {
        std::lock_guard lock(run.tree_mutex);
        if (!run.tree) return;
        doc = run.tree->snapshot();
    }
    write_atomic(fs::path(run_dir(run.desc.run_id)) / "tree.json", doc + "\n");
}

void Orchestrator::set_state(Run& run, RunState to, const std::string& error) {
    std::string id;
    RunState from;
    {
        std::lock_guard lock(run.m);
        from = run.desc.state;
        if (from == to) return;
        if (!is_legal_transition(from, to))
            throw Error(ErrorCode::InvalidStatus, "run " + run.desc.run_id + ": " + std::string(to_string(from)) +
                                                      " -> " + std::string(to_string(to)));
        run.desc.state = to;
        if (!error.empty()) run.desc.error = error;
        if (from == RunState::Queued) run.desc.started_at = now();
        if (is_terminal(to)) run.desc.finished_at = now();
        id = run.desc.run_id;
    }
    events_.publish(id, event_kind::RunState, {{"from", to_string(from)}, {"to", to_string(to)}, {"error", error}});
    if (!run.abandoned) persist_descriptor(run);
    if (is_terminal(to)) {
        if (!run.abandoned) {
            std::string lines;
            for (const auto& e : events_.for_run(id)) lines += nlohmann::json(e).dump() + "\n";
            write_atomic(fs::path(run_dir(id)) / "events.jsonl", lines);
        }
        {
            std::lock_guard lock(mutex_);
            run.settled = true;
        }
        done_cv_.notify_all();
    }
}

std::string Orchestrator::submit(const std::string& description, const RunConfig& config,
                                 const std::string& session_id) {
    const OperatorSession session = authenticator_->require_operator(session_id, "submit_task");
    if (kill_switch_->active()) throw Error(ErrorCode::KillSwitchActive, "platform halted; no new runs");

    auto run = std::make_shared<Run>();
    if (!config.scenario.empty()) {
        const std::string path = scenario_path(config.scenario);
        if (!fs::exists(path)) throw Error(ErrorCode::ConfigError, "scenario not found: " + path);
        run->scenario = std::make_shared<const Scenario>(Scenario::load_file(path));
        validate_rubric(run->scenario->writeup);
    } else if (config.sandbox == SandboxMode::Simulated) {
        throw Error(ErrorCode::ConfigError, "a simulated run needs a scenario");
    }
    if (config.provider == ProviderKind::Scripted) {
        run->script_path = config.script.empty() ? default_script_path(config) : config.script;
        if (!options_.provider_factory && !fs::exists(run->script_path))
            throw Error(ErrorCode::ConfigError, "script not found: " + run->script_path);
    }
    ApprovalSettings approval{config.effective_policy(), config.allowlist,
                              std::chrono::milliseconds(config.approval_timeout_ms), config.sandbox};
    approval.validate();

    std::string task = description;
    if (task.empty() && run->scenario) task = run->scenario->task;
    run->tree.emplace(PlanTree::create_root(task));

    run->desc.task = task;
    run->desc.config = config;
    run->desc.submitted_by = session.principal;
    run->desc.submitted_at = now();
    run->desc.rubric_total = run->scenario ? run->scenario->total_steps() : 0;

    std::string id;
    {
        std::lock_guard lock(mutex_);
        if (shutting_down_) throw Error(ErrorCode::Aborted, "service shutting down");
        char buf[32];
        std::snprintf(buf, sizeof buf, "run-%06llu", static_cast<unsigned long long>(next_run_++));
        id = buf;
        run->desc.run_id = id;
    }
    {
        std::lock_guard lock(run->tree_mutex);
        run->tree->set_observer([this, r = run.get()](const TreeChange& c) {
            const std::string& rid = r->desc.run_id;
            switch (c.kind) {
                case TreeChange::Kind::NodeAdded:
                    events_.publish(rid, event_kind::NodeAdded,
                                    {{"node_id", c.node_id},
                                     {"parent", c.parent ? nlohmann::json(*c.parent) : nlohmann::json(nullptr)},
                                     {"status", to_string(c.status)},
                                     {"description", c.description}});
                    break;
                case TreeChange::Kind::StatusChanged: {
                    events_.publish(rid, event_kind::NodeStatus,
                                    {{"node_id", c.node_id}, {"status", to_string(c.status)}});
                    RunState current;
                    {
                        std::lock_guard lock(r->m);
                        current = r->desc.state;
                    }
                    if (c.status == NodeStatus::Executing &&
                        (current == RunState::Planning || current == RunState::Correcting))
                        set_state(*r, RunState::Executing);
                    else if (c.status == NodeStatus::Failed && current == RunState::Executing &&
                             r->desc.config.corrector && r->tree->node(c.node_id).is_leaf())
                        set_state(*r, RunState::Correcting);
                    break;
                }
                case TreeChange::Kind::DescriptionChanged:
                    events_.publish(rid, event_kind::NodeDescription,
                                    {{"node_id", c.node_id}, {"description", c.description}});
                    break;
            }
        });
    }
    events_.publish(id, event_kind::NodeAdded,
                    {{"node_id", run->tree->root_id()}, {"parent", nullptr}, {"status", "Pending"}, {"description", task}});
    persist_tree(*run);
    persist_descriptor(*run);
    audit_->append("operator:" + session.principal, audit_kind::RunStarted,
                   {{"run_id", id}, {"task", task}, {"config", config}});
    events_.publish(id, event_kind::RunState, {{"from", nullptr}, {"to", "Queued"}, {"error", ""}});
    {
        std::lock_guard lock(mutex_);
        runs_.emplace(id, run);
        queue_.push_back(id);
    }
    queue_cv_.notify_one();
    return id;
}

void Orchestrator::worker_loop() {
    for (;;) {
        std::shared_ptr<Run> run;
        {
            std::unique_lock lock(mutex_);
            queue_cv_.wait(lock, [&] { return shutting_down_ || !queue_.empty(); });
            if (shutting_down_) return;
            run = runs_.at(queue_.front());
            queue_.pop_front();
        }
        execute(run);
    }
}

void Orchestrator::execute(const std::shared_ptr<Run>& run) {
    const std::string id = run->desc.run_id;
    const RunConfig config = run->desc.config;
    bool aborted = false;
    std::string error;

    std::shared_ptr<RecordingProvider> recorder;
    std::unique_ptr<LlmGateway> gateway;
    try {
        fault(fault_point::Queued, id);
        if (run->stop || kill_switch_->active()) throw Error(ErrorCode::Aborted, "stopped before planning");
        set_state(*run, RunState::Planning);

        std::shared_ptr<LlmProvider> provider;
        if (options_.provider_factory)
            provider = options_.provider_factory(config, run->scenario.get(), run->script_path);
        else if (config.provider == ProviderKind::Live)
            provider = std::make_shared<LiveProvider>(LiveProviderConfig::from_environment());
        else
            provider = ScriptedProvider::load_file(run->script_path);
        recorder = std::make_shared<RecordingProvider>(provider);
        gateway = std::make_unique<LlmGateway>(recorder);

        SandboxPolicy policy;
        policy.mode = config.sandbox;
        policy.network_scope = config.network_scope;
        if (policy.network_scope.empty() && run->scenario && !run->scenario->target.empty())
            policy.network_scope.push_back(run->scenario->target);
        policy.timeout = std::chrono::milliseconds(config.command_timeout_ms);
        policy.grace = std::chrono::milliseconds(config.grace_ms);
        policy.capture_limit = config.capture_limit;
        policy.launcher = config.launcher;
        std::unique_ptr<Terminal> terminal;
        if (config.sandbox == SandboxMode::Simulated)
            terminal = std::make_unique<SimulatedTerminal>(run->scenario, policy, kill_switch_, "sim-" + id);
        else
            terminal = std::make_unique<ContainerTerminal>(policy, options_.spawner, kill_switch_, "ctr-" + id);

        ReactConfig rc;
        rc.reasoning_enabled = config.reasoning;
        rc.max_steps = config.max_steps;
        rc.summarize_threshold = config.summarize_threshold;
        rc.act_context_budget = config.act_context_budget;
        rc.reason_context_budget = config.reason_context_budget;
        rc.approval = ApprovalSettings{config.effective_policy(), config.allowlist,
                                       std::chrono::milliseconds(config.approval_timeout_ms), config.sandbox};
        ReactEngine engine(*gateway, *approvals_, *terminal, audit_.get(), kill_switch_, rc);
        engine.on_step([this, id](const LeafRun& leaf, const StepRecord& step) {
            nlohmann::json p{{"node_id", leaf.node_id},
                             {"index", step.index},
                             {"command", step.tool_call ? nlohmann::json(step.tool_call->command()) : nlohmann::json()},
                             {"decision", step.approval ? nlohmann::json(to_string(step.approval->decision))
                                                        : nlohmann::json()},
                             {"summarized", step.summarized}};
            if (step.execution) {
                p["exit_code"] = step.execution->exit_code;
                if (step.execution->credited_step) p["credited_step"] = *step.execution->credited_step;
            }
            events_.publish(id, event_kind::Step, std::move(p));
        });

        PlannerConfig pc;
        pc.max_depth = config.max_depth;
        pc.memory_k = config.memory_k;
        pc.use_memory = config.use_memory;
        Planner planner(*gateway, memory_.get(), options_.embedder.get(), pc);
        CorrectorConfig cc;
        cc.enabled = config.corrector;
        cc.max_attempts_per_node = config.correction_attempts_per_node;
        cc.global_budget = config.correction_budget;
        cc.memory_k = config.memory_k;
        PlanCorrector corrector(*gateway, config.use_memory ? memory_.get() : nullptr, options_.embedder.get(), cc);

        Traversal::Hooks hooks;
        hooks.execute_leaf = [&engine, run](const LeafContext& ctx) {
            return engine.run_leaf(ctx, [run] { return run->stop.load(); });
        };
        hooks.leaf_finished = [this, run, id](const NodeId& node, const LeafRun& leaf) {
            write_atomic(fs::path(run_dir(id)) / "transcripts" / (node + ".json"), nlohmann::json(leaf).dump(2) + "\n");
            NodeMetrics totals;
            {
                std::lock_guard lock(run->tree_mutex);
                totals = run->tree->totals();
            }
            totals += leaf.metrics;  // the leaf's metrics land on the tree right after this hook
            {
                std::lock_guard lock(run->m);
                run->leaves.push_back(leaf);
                for (const auto& step : leaf.steps)
                    if (step.execution && step.execution->credited_step &&
                        run->credit_set.insert(*step.execution->credited_step).second)
                        run->desc.credits.push_back(*step.execution->credited_step);
                if (run->scenario) run->desc.steps_completed = score_completion(run->desc.credits, run->scenario->writeup);
                run->desc.peak_act_tokens = std::max(run->desc.peak_act_tokens, leaf.peak_act_tokens);
                run->desc.totals = totals;
            }
            events_.publish(id, event_kind::Metrics, {{"node_id", node}, {"leaf", leaf.metrics}, {"totals", totals}});
            persist_tree(*run);
            persist_descriptor(*run);
            fault(fault_point::LeafFinished, id);
        };
        hooks.stop_requested = [run] { return run->stop.load(); };
        hooks.revision_applied = [this, run, id](const PlanRevision& r) {
            {
                std::lock_guard lock(run->m);
                ++run->desc.corrections;
            }
            events_.publish(id, event_kind::Revision, {{"by", "corrector"}, {"revision", r}});
        };

        Traversal traversal(*run->tree, run->tree_mutex, planner, config.corrector ? &corrector : nullptr, hooks, id,
                            audit_.get(), kill_switch_);
        try {
            traversal.run();
        } catch (...) {
            std::lock_guard lock(run->m);
            run->desc.call_counts = gateway->counters().snapshot();
            throw;
        }
        std::lock_guard lock(run->m);
        run->desc.call_counts = gateway->counters().snapshot();
    } catch (const SimulatedCrash&) {
        run->abandoned = true;
        { std::lock_guard lock(mutex_); }
        done_cv_.notify_all();
        return;
    } catch (const Error& e) {
        if (e.code() == ErrorCode::Aborted || e.code() == ErrorCode::KillSwitchActive)
            aborted = true;
        else
            error = e.what();
    } catch (const std::exception& e) {
        error = e.what();
    }

    if (recorder) {
        nlohmann::json trace{{"format", "rtl-trace/1"},
                             {"run_id", id},
                             {"task", run->desc.task},
                             {"config", config},
                             {"script", recorder->script()}};
        try {
            write_atomic(fs::path(run_dir(id)) / "trace.json", trace.dump(2) + "\n");
        } catch (const std::exception&) {
        }
    }
    try {
        finalize(run, aborted, error);
    } catch (const SimulatedCrash&) {
        run->abandoned = true;
        { std::lock_guard lock(mutex_); }
        done_cv_.notify_all();
    } catch (const std::exception& e) {
        try {
            set_state(*run, RunState::Failed, std::string("finalize failed: ") + e.what());
        } catch (...) {
            done_cv_.notify_all();
        }
    }
}

void Orchestrator::finalize(const std::shared_ptr<Run>& run, bool aborted, const std::string& error) {
    const std::string id = run->desc.run_id;
    NodeStatus root_status;
    PlanTree final_tree = [&] {
        std::lock_guard lock(run->tree_mutex);
        {
            auto hold = run->tree->hold_derivation();
            for (const auto& node : run->tree->preorder()) {
                const auto& n = run->tree->node(node);
                if (n.status == NodeStatus::Executing)
                    run->tree->transition(node, NodeStatus::Cancelled,
                                          OutcomeSummary::failed("interrupted", aborted ? "Aborted" : "run ended"));
                else if (n.status == NodeStatus::Pending && n.is_leaf())
                    run->tree->transition(node, NodeStatus::Cancelled);
            }
        }
        root_status = run->tree->root().status;
        return *run->tree;
    }();
    persist_tree(*run);
    fault(fault_point::BeforeFinalize, id);

    const std::size_t stored = memory_->store_tree(final_tree, id, *options_.embedder);
    audit_->append("orchestrator", audit_kind::MemoryStored, {{"run_id", id}, {"records", stored}});

    RunState final_state = RunState::Failed;
    if (aborted)
        final_state = RunState::Aborted;
    else if (error.empty() && root_status == NodeStatus::Succeeded)
        final_state = RunState::Completed;

    nlohmann::json metrics;
    {
        std::lock_guard lock(run->m);
        run->desc.totals = final_tree.totals();
        metrics = {{"run_id", id},
                   {"totals", run->desc.totals},
                   {"call_counts", run->desc.call_counts},
                   {"tool_calls", run->desc.totals.tool_calls},
                   {"credits", run->desc.credits},
                   {"steps_completed", run->desc.steps_completed},
                   {"rubric_total", run->desc.rubric_total},
                   {"corrections", run->desc.corrections},
                   {"peak_act_tokens", run->desc.peak_act_tokens}};
        const auto& t = run->desc.totals;
        if (t.api_calls_reason + t.api_calls_act + t.api_calls_summarizer > 0) {
            CallCounts c{t.api_calls_reason, t.api_calls_act, t.api_calls_summarizer, 0, 0};
            auto s = component_shares(c);
            metrics["shares"] = {{"reason", format_tenths(s.reason_tenths)},
                                 {"act", format_tenths(s.act_tenths)},
                                 {"summarizer", format_tenths(s.summarizer_tenths)}};
        }
    }
    const fs::path dir = run_dir(id);
    write_atomic(dir / "metrics.json", metrics.dump(2) + "\n");

    std::string slice;
    for (const auto& e : audit_->events()) {
        const bool mine = e.actor == "agent:" + id ||
                          (e.payload.is_object() && e.payload.contains("run_id") && e.payload["run_id"] == id);
        if (mine) slice += nlohmann::json{{"seq", e.seq}, {"timestamp", e.timestamp}, {"actor", e.actor},
                                          {"kind", e.kind}, {"payload", e.payload}, {"hash", e.hash}}
                               .dump() +
                           "\n";
    }
    write_atomic(dir / "audit.jsonl", slice);

    audit_->append("orchestrator", audit_kind::RunFinished,
                   {{"run_id", id},
                    {"state", to_string(final_state)},
                    {"steps_completed", metrics["steps_completed"]},
                    {"totals", metrics["totals"]},
                    {"error", error}});
    set_state(*run, final_state, error);
}

void Orchestrator::recover() {
    const fs::path runs_dir = fs::path(options_.data_dir) / "runs";
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(runs_dir))
        if (entry.is_directory() && fs::exists(entry.path() / "descriptor.json")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& dir : dirs) {
        auto run = std::make_shared<Run>();
        run->desc = nlohmann::json::parse(read_text(dir / "descriptor.json")).get<RunDescriptor>();
        const std::string& id = run->desc.run_id;
        unsigned long long n = 0;
        if (std::sscanf(id.c_str(), "run-%llu", &n) == 1) next_run_ = std::max<std::uint64_t>(next_run_, n + 1);
        if (fs::exists(dir / "tree.json"))
            run->tree.emplace(PlanTree::restore(read_text(dir / "tree.json")));
        else if (!run->desc.task.empty())
            run->tree.emplace(PlanTree::create_root(run->desc.task));
        for (const auto& c : run->desc.credits) run->credit_set.insert(c);

        if (!is_terminal(run->desc.state) && run->tree) {
            {
                auto hold = run->tree->hold_derivation();
                for (const auto& node : run->tree->preorder()) {
                    const auto& tn = run->tree->node(node);
                    if (tn.status == NodeStatus::Executing)
                        run->tree->transition(node, NodeStatus::Cancelled,
                                              OutcomeSummary::failed("interrupted", "service restart"));
                    else if (tn.status == NodeStatus::Pending && tn.is_leaf())
                        run->tree->transition(node, NodeStatus::Cancelled);
                }
            }
            const std::size_t stored = memory_->store_tree(*run->tree, id, *options_.embedder);
            audit_->append("orchestrator", audit_kind::MemoryStored, {{"run_id", id}, {"records", stored}});
            const RunState from = run->desc.state;
            run->desc.state = RunState::Aborted;
            run->desc.recovered = true;
            run->desc.error = "interrupted by service restart in state " + std::string(to_string(from));
            run->desc.finished_at = now();
            run->desc.totals = run->tree->totals();
            audit_->append("orchestrator", audit_kind::RunFinished,
                           {{"run_id", id}, {"state", "Aborted"}, {"recovered", true}, {"from", to_string(from)}});
            write_atomic(dir / "tree.json", run->tree->snapshot() + "\n");
            persist_descriptor(*run);
            recovered_.push_back(id);
        }
        run->settled = is_terminal(run->desc.state);
        runs_.emplace(id, run);
    }
}

RunDescriptor Orchestrator::get_state(const std::string& run_id) const {
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    std::lock_guard lock(run->m);
    return run->desc;
}

std::vector<RunDescriptor> Orchestrator::list_runs() const {
    std::vector<std::shared_ptr<Run>> all;
    {
        std::lock_guard lock(mutex_);
        for (const auto& [id, r] : runs_) all.push_back(r);
    }
    std::vector<RunDescriptor> out;
    for (const auto& r : all) {
        std::lock_guard lock(r->m);
        out.push_back(r->desc);
    }
    return out;
}

PlanTree Orchestrator::tree(const std::string& run_id) const {
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    std::lock_guard lock(run->tree_mutex);
    if (!run->tree) throw Error(ErrorCode::UnknownRun, run_id + " has no plan tree");
    PlanTree copy = *run->tree;
    copy.set_observer({});
    return copy;
}

nlohmann::json Orchestrator::metrics(const std::string& run_id) const {
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    NodeMetrics totals;
    nlohmann::json nodes = nlohmann::json::object();
    {
        std::lock_guard lock(run->tree_mutex);
        if (run->tree) {
            totals = run->tree->totals();
            for (const auto& [id, n] : run->tree->nodes()) nodes[id] = n.metrics;
        }
    }
    std::lock_guard lock(run->m);
    nlohmann::json j{{"run_id", run_id},
                     {"state", to_string(run->desc.state)},
                     {"totals", totals},
                     {"nodes", nodes},
                     {"call_counts", run->desc.call_counts},
                     {"tool_calls", totals.tool_calls},
                     {"steps_completed", run->desc.steps_completed},
                     {"rubric_total", run->desc.rubric_total},
                     {"credits", run->desc.credits}};
    if (totals.api_calls_reason + totals.api_calls_act + totals.api_calls_summarizer > 0) {
        auto s = component_shares({totals.api_calls_reason, totals.api_calls_act, totals.api_calls_summarizer, 0, 0});
        j["shares"] = {{"reason", format_tenths(s.reason_tenths)},
                       {"act", format_tenths(s.act_tenths)},
                       {"summarizer", format_tenths(s.summarizer_tenths)}};
    }
    return j;
}

std::vector<LeafRun> Orchestrator::leaf_runs(const std::string& run_id) const {
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    std::lock_guard lock(run->m);
    return run->leaves;
}

void Orchestrator::stop(const std::string& run_id, const std::string& session_id) {
    const OperatorSession session = authenticator_->require_operator(session_id, "stop_run");
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    {
        std::lock_guard lock(run->m);
        if (is_terminal(run->desc.state)) throw Error(ErrorCode::RunTerminal, run_id + " already finished");
    }
    audit_->append("operator:" + session.principal, audit_kind::Intervention, {{"run_id", run_id}, {"action", "Stop"}});
    bool was_queued = false;
    {
        std::lock_guard lock(mutex_);
        auto it = std::find(queue_.begin(), queue_.end(), run_id);
        if (it != queue_.end()) {
            queue_.erase(it);
            was_queued = true;
        }
    }
    run->stop = true;
    if (was_queued) {
        finalize(run, true, "");
        return;
    }
    approvals_->cancel_run(run_id);
}

std::uint64_t Orchestrator::modify_plan(const std::string& run_id, PlanRevision edits, const std::string& session_id) {
    const OperatorSession session = authenticator_->require_operator(session_id, "modify_plan");
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    {
        std::lock_guard lock(run->m);
        if (is_terminal(run->desc.state)) throw Error(ErrorCode::RunTerminal, run_id + " already finished");
    }
    if (edits.empty()) throw Error(ErrorCode::StaleRevision, "plan edit changes nothing");
    std::uint64_t version;
    {
        std::lock_guard lock(run->tree_mutex);
        if (edits.base_version == 0) edits.base_version = run->tree->version();
        apply_revision(*run->tree, edits);
        version = run->tree->version();
    }
    nlohmann::json payload{{"run_id", run_id}, {"action", "ModifyPlan"}, {"revision", edits}, {"version", version}};
    audit_->append("operator:" + session.principal, audit_kind::Intervention, payload);
    events_.publish(run_id, event_kind::Revision, {{"by", "operator:" + session.principal}, {"revision", edits}});
    persist_tree(*run);
    return version;
}

void Orchestrator::kill(const std::string& session_id) {
    const OperatorSession session = authenticator_->require_operator(session_id, "kill_switch");
    const bool first = kill_switch_->activate();
    audit_->append("operator:" + session.principal, audit_kind::KillSwitch, {{"first_activation", first}});
    std::vector<std::shared_ptr<Run>> queued;
    {
        std::lock_guard lock(mutex_);
        for (const auto& id : queue_) queued.push_back(runs_.at(id));
        queue_.clear();
    }
    for (const auto& r : queued) finalize(r, true, "");
}

RunDescriptor Orchestrator::wait(const std::string& run_id, std::chrono::milliseconds timeout) const {
    auto run = find(run_id);
    if (!run) throw Error(ErrorCode::UnknownRun, run_id);
    std::unique_lock lock(mutex_);
    const bool done = done_cv_.wait_for(lock, timeout, [&] {
        std::lock_guard rl(run->m);
        return run->settled.load() || run->abandoned.load();
    });
    if (!done) throw Error(ErrorCode::Timeout, "run " + run_id + " still " + std::string(to_string(run->desc.state)));
    std::lock_guard rl(run->m);
    return run->desc;
}

}  // namespace redteam
