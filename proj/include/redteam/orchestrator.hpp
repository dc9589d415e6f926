#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/audit_log.hpp"
#include "redteam/kill_switch.hpp"
#include "redteam/llm_gateway.hpp"
#include "redteam/memory.hpp"
#include "redteam/plan_corrector.hpp"
#include "redteam/react_engine.hpp"
#include "redteam/scenario.hpp"
#include "redteam/security.hpp"
#include "redteam/task_graph.hpp"
#include "redteam/terminal.hpp"

namespace redteam {

enum class RunState : std::uint8_t { Queued, Planning, Executing, AwaitingApproval, Correcting, Completed, Failed, Aborted };

std::string_view to_string(RunState s) noexcept;
std::optional<RunState> parse_run_state(std::string_view s) noexcept;
bool is_terminal(RunState s) noexcept;
bool is_legal_transition(RunState from, RunState to) noexcept;

/// Every knob of a run. Keys of the JSON form double as config-file keys,
/// REDTEAM_<KEY> environment variables and CLI flags.
struct RunConfig {
    std::string scenario;  // bundled name or path to a scenario file
    ProviderKind provider = ProviderKind::Scripted;
    std::string script;  // empty: <scenario_dir>/<scenario>.<with|without>.script.json
    bool reasoning = true;
    std::size_t max_depth = 3;
    std::size_t max_steps = 30;
    std::size_t summarize_threshold = 4096;
    std::size_t act_context_budget = 24000;
    std::size_t reason_context_budget = 24000;
    std::optional<ApprovalPolicy> approval_policy;  // unset: AutoApprove when simulated, else Interactive
    std::vector<std::string> allowlist;
    std::uint64_t approval_timeout_ms = 300000;
    SandboxMode sandbox = SandboxMode::Simulated;
    std::vector<std::string> network_scope;  // empty: the scenario target
    std::vector<std::string> launcher{"/bin/sh", "-c"};
    std::uint64_t command_timeout_ms = 30000;
    std::uint64_t grace_ms = 500;
    std::size_t capture_limit = 64 * 1024;
    bool corrector = true;
    std::size_t correction_attempts_per_node = 2;
    std::size_t correction_budget = 10;
    bool use_memory = true;
    std::size_t memory_k = 5;

    [[nodiscard]] ApprovalPolicy effective_policy() const noexcept;

    /// default < file < environment < cli. Unknown keys and bad values throw ConfigError.
    using EnvLookup = std::function<std::optional<std::string>(const std::string&)>;
    static RunConfig layered(const nlohmann::json& file, const EnvLookup& env, const nlohmann::json& cli);
    static EnvLookup process_environment();
    static std::string env_name(std::string_view key);
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

struct RunDescriptor {
    std::string run_id;
    std::string task;
    RunState state = RunState::Queued;
    RunConfig config;
    std::string submitted_by;
    std::string submitted_at;
    std::string started_at;
    std::string finished_at;
    NodeMetrics totals;
    CallCounts call_counts;
    std::vector<std::string> credits;  // distinct, in first-credit order
    double steps_completed = 0;
    double rubric_total = 0;
    std::size_t corrections = 0;
    std::size_t peak_act_tokens = 0;
    bool recovered = false;
    std::string error;
};

void to_json(nlohmann::json& j, const RunDescriptor& d);
void from_json(const nlohmann::json& j, RunDescriptor& d);

namespace event_kind {
inline constexpr std::string_view RunState = "run_state";
inline constexpr std::string_view NodeAdded = "node_added";
inline constexpr std::string_view NodeStatus = "node_status";
inline constexpr std::string_view NodeDescription = "node_description";
inline constexpr std::string_view ApprovalPending = "approval_pending";
inline constexpr std::string_view ApprovalResolved = "approval_resolved";
inline constexpr std::string_view Step = "step";
inline constexpr std::string_view Metrics = "metrics";
inline constexpr std::string_view Revision = "revision";
inline constexpr std::string_view Log = "log";
}  // namespace event_kind

struct StateEvent {
    std::uint64_t cursor = 0;  // position in the global feed, from 1
    std::string run_id;
    std::uint64_t seq = 0;  // per run, from 1
    std::string kind;
    nlohmann::json payload;
    std::string timestamp;
};

void to_json(nlohmann::json& j, const StateEvent& e);
void from_json(const nlohmann::json& j, StateEvent& e);

/// In-process event feed. Each run's events carry a gap-free seq; the global
/// cursor orders all events. Consumers dedupe on (run_id, seq).
class EventBus {
public:
    explicit EventBus(WallClock clock = {});

    StateEvent publish(const std::string& run_id, std::string_view kind, nlohmann::json payload);

    /// Events with cursor > `cursor`, optionally for one run.
    [[nodiscard]] std::vector<StateEvent> since(std::uint64_t cursor,
                                                const std::optional<std::string>& run_id = std::nullopt,
                                                std::size_t max = SIZE_MAX) const;
    [[nodiscard]] std::vector<StateEvent> for_run(const std::string& run_id) const;

    /// Waits until an event past `cursor` exists; false on timeout.
    bool wait(std::uint64_t cursor, std::chrono::milliseconds timeout) const;
    [[nodiscard]] std::uint64_t cursor() const;

    using SubscriberId = std::uint64_t;
    SubscriberId subscribe(std::function<void(const StateEvent&)> subscriber);
    void unsubscribe(SubscriberId id);

private:
    WallClock clock_;
    mutable std::mutex mutex_;
    mutable std::condition_variable cv_;
    std::vector<StateEvent> events_;
    std::map<std::string, std::uint64_t> run_seq_;
    std::map<SubscriberId, std::function<void(const StateEvent&)>> subscribers_;
    SubscriberId next_subscriber_ = 1;
};

/// Node statuses of one run rebuilt from its events. Duplicates and
/// out-of-order redelivery are absorbed by tracking the highest seq applied.
std::map<NodeId, NodeStatus> project_tree_statuses(const std::vector<StateEvent>& events, const std::string& run_id);

/// Thrown by a fault hook to emulate a process crash at an injection point.
struct SimulatedCrash {
    std::string point;
};

namespace fault_point {
inline constexpr std::string_view Queued = "queued";
inline constexpr std::string_view LeafFinished = "leaf_finished";
inline constexpr std::string_view BeforeFinalize = "before_finalize";
}  // namespace fault_point

/// Launcher: owns run lifecycles, shared services and run artifacts.
///
/// Layout under data_dir:
///   audit.log, audit.log.head        shared hash-chained audit log
///   memory.db                        task-tree memory
///   runs/<run_id>/descriptor.json    RunDescriptor
///   runs/<run_id>/tree.json          plan tree snapshot
///   runs/<run_id>/transcripts/<node>.json
///   runs/<run_id>/metrics.json       totals, call counts, shares, steps
///   runs/<run_id>/events.jsonl       the run's StateEvents
///   runs/<run_id>/audit.jsonl        audit events of the run
///   runs/<run_id>/trace.json         replayable trace (config + recorded script)
class Orchestrator {
public:
    using ProviderFactory =
        std::function<std::shared_ptr<LlmProvider>(const RunConfig&, const Scenario*, const std::string& script_path)>;
    using FaultHook = std::function<void(std::string_view point, const std::string& run_id)>;

    struct Options {
        std::string data_dir;
        std::string scenario_dir;
        std::size_t max_concurrent_runs = 4;
        std::shared_ptr<Embedder> embedder;  // default: HashEmbedder(256)
        ProviderFactory provider_factory;    // default: scripted file or live from the environment
        std::shared_ptr<ProcessSpawner> spawner;
        std::optional<CredentialStore> credentials;
        std::string audit_key;  // signs the audit head checkpoint when set
        bool durable = false;   // fsync audit and memory writes
        WallClock clock;
        FaultHook fault_hook;
    };

    explicit Orchestrator(Options options);
    ~Orchestrator();
    Orchestrator(const Orchestrator&) = delete;
    Orchestrator& operator=(const Orchestrator&) = delete;

    /// Throws Unauthorized, SessionExpired, KillSwitchActive, ConfigError, PolicyViolation.
    std::string submit(const std::string& description, const RunConfig& config, const std::string& session_id);

    [[nodiscard]] RunDescriptor get_state(const std::string& run_id) const;
    [[nodiscard]] std::vector<RunDescriptor> list_runs() const;
    [[nodiscard]] PlanTree tree(const std::string& run_id) const;
    [[nodiscard]] nlohmann::json metrics(const std::string& run_id) const;
    [[nodiscard]] std::vector<LeafRun> leaf_runs(const std::string& run_id) const;

    /// Operator stop; a queued run is aborted without planning.
    void stop(const std::string& run_id, const std::string& session_id);

    /// Operator plan edit (renames and cancellations of Pending nodes).
    /// base_version 0 means "the current version". Returns the new version.
    std::uint64_t modify_plan(const std::string& run_id, PlanRevision edits, const std::string& session_id);

    /// Platform-wide halt.
    void kill(const std::string& session_id);

    /// Blocks until the run is terminal; throws Timeout.
    RunDescriptor wait(const std::string& run_id,
                       std::chrono::milliseconds timeout = std::chrono::milliseconds(600000)) const;

    /// Session for the local operator (CLI on the service host).
    OperatorSession local_session(OperatorRole role = OperatorRole::Operator);

    [[nodiscard]] Authenticator& authenticator() noexcept { return *authenticator_; }
    [[nodiscard]] ApprovalGate& approvals() noexcept { return *approvals_; }
    [[nodiscard]] AuditLog& audit() noexcept { return *audit_; }
    [[nodiscard]] MemoryStore& memory() noexcept { return *memory_; }
    [[nodiscard]] EventBus& events() noexcept { return events_; }
    [[nodiscard]] const KillSwitch& kill_switch() const noexcept { return *kill_switch_; }
    [[nodiscard]] const std::vector<std::string>& recovered_runs() const noexcept { return recovered_; }
    [[nodiscard]] std::string run_dir(const std::string& run_id) const;
    [[nodiscard]] const Options& options() const noexcept { return options_; }

    /// Resolves a scenario name or path against the scenario directory.
    [[nodiscard]] std::string scenario_path(const std::string& scenario) const;
    [[nodiscard]] std::string default_script_path(const RunConfig& config) const;

private:
    struct Run;

    void worker_loop();
    void execute(const std::shared_ptr<Run>& run);
    void finalize(const std::shared_ptr<Run>& run, bool aborted, const std::string& error);
    void set_state(Run& run, RunState to, const std::string& error = {});
    void persist_descriptor(const Run& run);
    void persist_tree(Run& run);
    void recover();
    void fault(std::string_view point, const std::string& run_id);
    std::shared_ptr<Run> find(const std::string& run_id) const;
    std::string now() const;

    Options options_;
    std::shared_ptr<KillSwitch> kill_switch_;
    std::unique_ptr<AuditLog> audit_;
    std::unique_ptr<Authenticator> authenticator_;
    std::unique_ptr<ApprovalGate> approvals_;
    std::unique_ptr<MemoryStore> memory_;
    EventBus events_;

    mutable std::mutex mutex_;
    mutable std::condition_variable done_cv_;
    std::condition_variable queue_cv_;
    std::map<std::string, std::shared_ptr<Run>> runs_;
    std::deque<std::string> queue_;
    std::uint64_t next_run_ = 1;
    bool shutting_down_ = false;
    std::vector<std::string> recovered_;
    std::vector<std::thread> workers_;
};

}  // namespace redteam
