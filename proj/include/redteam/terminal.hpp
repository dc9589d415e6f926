#pragma once

#include <sys/types.h>

#include <atomic>
#include <chrono>
#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/kill_switch.hpp"
#include "redteam/scenario.hpp"

namespace redteam {

enum class SandboxMode : std::uint8_t { Simulated, Container };
enum class AwaitingInput : std::uint8_t { No, Yes, Unknown };
enum class TruncationMode : std::uint8_t { Head, HeadTail };

std::string_view to_string(SandboxMode mode) noexcept;
std::string_view to_string(AwaitingInput state) noexcept;

struct ExecutionRecord {
    std::string command;
    std::string output;  // interleaved stdout/stderr in arrival order
    int exit_code = 0;
    std::optional<std::string> signal;  // e.g. "KILL" when terminated
    std::uint64_t duration_ms = 0;
    bool truncated = false;
    std::size_t original_length = 0;
    AwaitingInput awaiting_input = AwaitingInput::No;
    bool probe_available = true;  // false: input-wait detection ran heuristic-only
    bool timed_out = false;
    bool interrupted = false;  // killed by the kill switch
    std::string sandbox_id;
    std::optional<std::string> credited_step;  // simulated targets only
};

void to_json(nlohmann::json& j, const ExecutionRecord& r);

struct ResourceLimits {
    std::uint64_t cpu_seconds = 120;
    std::uint64_t memory_bytes = 2ull << 30;
    std::uint64_t max_processes = 0;  // 0: inherit
};

struct SandboxPolicy {
    SandboxMode mode = SandboxMode::Simulated;
    std::vector<std::string> network_scope;  // IPv4 addresses or CIDR blocks
    std::string filesystem_scope = "/tmp";
    ResourceLimits limits;
    std::chrono::milliseconds timeout{30'000};
    std::chrono::milliseconds grace{500};
    std::size_t capture_limit = 64 * 1024;
    TruncationMode truncation = TruncationMode::Head;
    std::chrono::milliseconds idle_window{2'000};
    // Prefix the wrapped command is appended to, e.g. {"docker","exec","-i","sbx","sh","-c"}.
    std::vector<std::string> launcher{"/bin/sh", "-c"};

    /// Throws PolicyViolation when the policy is not admissible.
    void validate() const;
    /// All IPv4 literals in `command` fall inside network_scope.
    [[nodiscard]] bool permits_network(std::string_view command) const;
};

struct CaptureResult {
    std::string text;
    bool truncated = false;
};

/// Keeps at most `limit` bytes of `stream` plus a truncation marker.
CaptureResult capture(std::string_view stream, std::size_t limit, TruncationMode mode = TruncationMode::Head);

struct InputProbe {
    AwaitingInput state = AwaitingInput::No;
    bool available = true;
};

/// Inspects the blocking syscall of `pid` and its descendants via /proc.
/// Yes: a blocking read on descriptor 0. Unknown: a read or multiplexed wait
/// on other descriptors. No: running or blocked elsewhere.
InputProbe detect_awaiting_input(pid_t pid);

struct SpawnRequest {
    std::vector<std::string> argv;
    std::string cwd;
    ResourceLimits limits;
};

/// A spawned child in its own process group. Output is one pipe carrying
/// both stdout and stderr; stdin is a pipe held open so reads block.
class ChildProcess {
public:
    ChildProcess(pid_t pid, int output_fd, int input_fd) noexcept;
    ~ChildProcess();
    ChildProcess(ChildProcess&& other) noexcept;
    ChildProcess& operator=(ChildProcess&&) = delete;
    ChildProcess(const ChildProcess&) = delete;
    ChildProcess& operator=(const ChildProcess&) = delete;

    [[nodiscard]] pid_t pid() const noexcept { return pid_; }
    [[nodiscard]] int output_fd() const noexcept { return output_fd_; }
    void kill_group(int signal) const noexcept;
    /// Blocks until exit; returns the raw wait status.
    int wait();

private:
    pid_t pid_;
    int output_fd_;
    int input_fd_;
    bool reaped_ = false;
};

class ProcessSpawner {
public:
    virtual ~ProcessSpawner() = default;
    virtual ChildProcess spawn(const SpawnRequest& request) = 0;
};

class PosixSpawner final : public ProcessSpawner {
public:
    ChildProcess spawn(const SpawnRequest& request) override;
};

class Terminal {
public:
    virtual ~Terminal() = default;
    /// The command must already be approved. Throws KillSwitchActive or SandboxViolation.
    virtual ExecutionRecord execute(const std::string& command) = 0;
    [[nodiscard]] virtual SandboxMode mode() const noexcept = 0;
    [[nodiscard]] virtual const std::string& sandbox_id() const noexcept = 0;
};

/// Scenario-backed terminal; never spawns a process.
class SimulatedTerminal final : public Terminal {
public:
    SimulatedTerminal(std::shared_ptr<const Scenario> scenario, SandboxPolicy policy,
                      std::shared_ptr<const KillSwitch> kill_switch, std::string sandbox_id);

    ExecutionRecord execute(const std::string& command) override;
    [[nodiscard]] SandboxMode mode() const noexcept override { return SandboxMode::Simulated; }
    [[nodiscard]] const std::string& sandbox_id() const noexcept override { return sandbox_id_; }

    [[nodiscard]] std::string current_state() const;
    [[nodiscard]] std::vector<std::string> credits() const;

private:
    mutable std::mutex mutex_;
    ScenarioShell shell_;
    SandboxPolicy policy_;
    std::shared_ptr<const KillSwitch> kill_switch_;
    std::string sandbox_id_;
    std::vector<std::string> credits_;
};

/// Process-backed terminal. The launcher decides where commands run (a
/// container exec in deployments); the working directory persists across calls.
class ContainerTerminal final : public Terminal {
public:
    ContainerTerminal(SandboxPolicy policy, std::shared_ptr<ProcessSpawner> spawner,
                      std::shared_ptr<const KillSwitch> kill_switch, std::string sandbox_id);

    ExecutionRecord execute(const std::string& command) override;
    [[nodiscard]] SandboxMode mode() const noexcept override { return SandboxMode::Container; }
    [[nodiscard]] const std::string& sandbox_id() const noexcept override { return sandbox_id_; }
    [[nodiscard]] std::string working_directory() const;

private:
    SandboxPolicy policy_;
    std::shared_ptr<ProcessSpawner> spawner_;
    std::shared_ptr<const KillSwitch> kill_switch_;
    std::string sandbox_id_;
    mutable std::mutex mutex_;
    std::string cwd_;
};

}  // namespace redteam
