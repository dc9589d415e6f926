#include "redteam/terminal.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/wait.h>
#include <unistd.h>

#include <arpa/inet.h>

#include <algorithm>
#include <cerrno>
#include <thread>
#include <cstring>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include "redteam/error.hpp"

namespace redteam {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::string_view kCwdMarker = "__RTL_CWD__";

std::uint64_t elapsed_ms(Clock::time_point since) {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - since).count());
}

std::string signal_name(int sig) {
    switch (sig) {
        case SIGKILL: return "KILL";
        case SIGTERM: return "TERM";
        case SIGINT: return "INT";
        case SIGSEGV: return "SEGV";
        case SIGABRT: return "ABRT";
        case SIGPIPE: return "PIPE";
        case SIGHUP: return "HUP";
        case SIGXCPU: return "XCPU";
        default: return "SIG" + std::to_string(sig);
    }
}

std::string shell_quote(std::string_view s) {
    std::string out = "'";
    for (char c : s) {
        if (c == '\'') {
            out += "'\\''";
        } else {
            out += c;
        }
    }
    return out + "'";
}

std::optional<std::uint32_t> parse_ipv4(const std::string& text) {
    in_addr addr{};
    if (::inet_pton(AF_INET, text.c_str(), &addr) != 1) return std::nullopt;
    return ntohl(addr.s_addr);
}

bool scope_contains(const std::string& entry, std::uint32_t ip) {
    auto slash = entry.find('/');
    auto base = parse_ipv4(entry.substr(0, slash));
    if (!base) return false;
    int bits = 32;
    if (slash != std::string::npos) bits = std::stoi(entry.substr(slash + 1));
    if (bits <= 0) return true;
    const std::uint32_t mask = bits >= 32 ? 0xffffffffu : ~((1u << (32 - bits)) - 1u);
    return (ip & mask) == (*base & mask);
}

// Syscall numbers of interest, per architecture.
struct SyscallTable {
    std::vector<long> reads;        // fd is the first argument
    std::vector<long> multiplexed;  // poll/select/epoll: descriptors not readable from registers
    std::vector<long> socket_reads;
};

const SyscallTable& syscall_table() {
#if defined(__x86_64__)
    static const SyscallTable t{{0, 17, 19, 295}, {7, 23, 232, 270, 271, 281}, {45, 47}};
#elif defined(__aarch64__)
    static const SyscallTable t{{63, 65, 67, 69}, {22, 72, 73}, {207, 212}};
#else
    static const SyscallTable t{{}, {}, {}};
#endif
    return t;
}

bool contains(const std::vector<long>& v, long x) { return std::find(v.begin(), v.end(), x) != v.end(); }

std::map<pid_t, std::vector<pid_t>> process_children() {
    std::map<pid_t, std::vector<pid_t>> children;
    DIR* dir = ::opendir("/proc");
    if (!dir) return children;
    while (dirent* e = ::readdir(dir)) {
        char* end = nullptr;
        long pid = std::strtol(e->d_name, &end, 10);
        if (*end != '\0' || pid <= 0) continue;
        std::ifstream stat("/proc/" + std::string(e->d_name) + "/stat");
        std::string line;
        if (!std::getline(stat, line)) continue;
        auto close_paren = line.rfind(')');
        if (close_paren == std::string::npos) continue;
        std::istringstream rest(line.substr(close_paren + 2));
        char state = 0;
        pid_t ppid = 0;
        rest >> state >> ppid;
        children[ppid].push_back(static_cast<pid_t>(pid));
    }
    ::closedir(dir);
    return children;
}

}  // namespace

std::string_view to_string(SandboxMode mode) noexcept {
    return mode == SandboxMode::Simulated ? "simulated" : "container";
}

std::string_view to_string(AwaitingInput state) noexcept {
    switch (state) {
        case AwaitingInput::No: return "no";
        case AwaitingInput::Yes: return "yes";
        case AwaitingInput::Unknown: return "unknown";
    }
    return "?";
}

void to_json(nlohmann::json& j, const ExecutionRecord& r) {
    j = nlohmann::json{{"command", r.command},
                       {"output", r.output},
                       {"exit_code", r.exit_code},
                       {"signal", r.signal ? nlohmann::json(*r.signal) : nlohmann::json()},
                       {"duration_ms", r.duration_ms},
                       {"truncated", r.truncated},
                       {"original_length", r.original_length},
                       {"awaiting_input", to_string(r.awaiting_input)},
                       {"probe_available", r.probe_available},
                       {"timed_out", r.timed_out},
                       {"interrupted", r.interrupted},
                       {"sandbox_id", r.sandbox_id},
                       {"credited_step", r.credited_step ? nlohmann::json(*r.credited_step) : nlohmann::json()}};
}

void SandboxPolicy::validate() const {
    if (mode == SandboxMode::Container && network_scope.empty()) {
        throw Error(ErrorCode::PolicyViolation, "container sandbox requires a non-empty network allowlist");
    }
    for (const auto& entry : network_scope) {
        if (!parse_ipv4(entry.substr(0, entry.find('/')))) {
            throw Error(ErrorCode::PolicyViolation, "network scope entry is not IPv4/CIDR: " + entry);
        }
    }
    if (mode == SandboxMode::Container && launcher.empty()) {
        throw Error(ErrorCode::PolicyViolation, "container sandbox requires a launcher");
    }
}

bool SandboxPolicy::permits_network(std::string_view command) const {
    static const std::regex ipv4(R"((^|[^0-9.])((25[0-5]|2[0-4]\d|1?\d?\d)(\.(25[0-5]|2[0-4]\d|1?\d?\d)){3})(?![0-9.]))");
    const std::string cmd(command);
    for (auto it = std::sregex_iterator(cmd.begin(), cmd.end(), ipv4); it != std::sregex_iterator(); ++it) {
        auto ip = parse_ipv4((*it)[2].str());
        if (!ip) continue;
        bool allowed = false;
        for (const auto& entry : network_scope) allowed = allowed || scope_contains(entry, *ip);
        if (!allowed) return false;
    }
    return true;
}

CaptureResult capture(std::string_view stream, std::size_t limit, TruncationMode mode) {
    if (stream.size() <= limit) return {std::string(stream), false};
    const std::string marker =
        "\n[output truncated: kept " + std::to_string(limit) + " of " + std::to_string(stream.size()) + " bytes]\n";
    CaptureResult r;
    r.truncated = true;
    if (mode == TruncationMode::Head) {
        r.text.reserve(limit + marker.size());
        r.text.append(stream.substr(0, limit));
        r.text += marker;
    } else {
        const std::size_t head = limit - limit / 2;
        const std::size_t tail = limit / 2;
        r.text.reserve(limit + marker.size());
        r.text.append(stream.substr(0, head));
        r.text += marker;
        r.text.append(stream.substr(stream.size() - tail));
    }
    return r;
}

InputProbe detect_awaiting_input(pid_t pid) {
    const SyscallTable& table = syscall_table();
    if (table.reads.empty()) return {AwaitingInput::Unknown, false};

    auto children = process_children();
    std::vector<pid_t> frontier{pid};
    bool any_readable = false;
    bool unknown = false;
    while (!frontier.empty()) {
        pid_t p = frontier.back();
        frontier.pop_back();
        if (auto it = children.find(p); it != children.end()) {
            frontier.insert(frontier.end(), it->second.begin(), it->second.end());
        }
        std::ifstream in("/proc/" + std::to_string(p) + "/syscall");
        std::string line;
        if (!in || !std::getline(in, line)) continue;
        any_readable = true;
        if (line.rfind("running", 0) == 0) continue;
        std::istringstream fields(line);
        long nr = -1;
        std::string arg0;
        fields >> nr >> arg0;
        if (nr < 0) continue;
        if (contains(table.reads, nr)) {
            const long fd = std::strtol(arg0.c_str(), nullptr, 16);
            if (fd == 0) return {AwaitingInput::Yes, true};
            unknown = true;
        } else if (contains(table.multiplexed, nr) || contains(table.socket_reads, nr)) {
            unknown = true;
        }
    }
    if (!any_readable) {
        // Either the process has exited or /proc/<pid>/syscall is not accessible.
        const bool exists = ::kill(pid, 0) == 0;
        return {AwaitingInput::No, !exists};
    }
    return {unknown ? AwaitingInput::Unknown : AwaitingInput::No, true};
}

ChildProcess::ChildProcess(pid_t pid, int output_fd, int input_fd) noexcept
    : pid_(pid), output_fd_(output_fd), input_fd_(input_fd) {}

ChildProcess::ChildProcess(ChildProcess&& other) noexcept
    : pid_(other.pid_), output_fd_(other.output_fd_), input_fd_(other.input_fd_), reaped_(other.reaped_) {
    other.pid_ = -1;
    other.output_fd_ = -1;
    other.input_fd_ = -1;
    other.reaped_ = true;
}

ChildProcess::~ChildProcess() {
    if (!reaped_ && pid_ > 0) {
        kill_group(SIGKILL);
        int status = 0;
        ::waitpid(pid_, &status, 0);
    }
    if (output_fd_ >= 0) ::close(output_fd_);
    if (input_fd_ >= 0) ::close(input_fd_);
}

void ChildProcess::kill_group(int signal) const noexcept {
    if (pid_ > 0) ::kill(-pid_, signal);
}

int ChildProcess::wait() {
    int status = 0;
    while (::waitpid(pid_, &status, 0) < 0 && errno == EINTR) {
    }
    reaped_ = true;
    return status;
}

ChildProcess PosixSpawner::spawn(const SpawnRequest& request) {
    if (request.argv.empty()) throw Error(ErrorCode::ConfigError, "empty argv");
    std::vector<char*> argv;
    for (const auto& a : request.argv) argv.push_back(const_cast<char*>(a.c_str()));
    argv.push_back(nullptr);

    int out[2];
    int in[2];
    if (::pipe2(out, O_CLOEXEC) != 0) throw Error(ErrorCode::SandboxViolation, "pipe failed");
    if (::pipe2(in, O_CLOEXEC) != 0) {
        ::close(out[0]);
        ::close(out[1]);
        throw Error(ErrorCode::SandboxViolation, "pipe failed");
    }
    const char* cwd = request.cwd.empty() ? nullptr : request.cwd.c_str();
    const ResourceLimits limits = request.limits;

    pid_t pid = ::fork();
    if (pid < 0) {
        for (int fd : {out[0], out[1], in[0], in[1]}) ::close(fd);
        throw Error(ErrorCode::SandboxViolation, "fork failed");
    }
    if (pid == 0) {
        ::setpgid(0, 0);
        ::dup2(in[0], STDIN_FILENO);
        ::dup2(out[1], STDOUT_FILENO);
        ::dup2(out[1], STDERR_FILENO);
        if (cwd && ::chdir(cwd) != 0) ::_exit(126);
        if (limits.cpu_seconds) {
            rlimit r{limits.cpu_seconds, limits.cpu_seconds};
            ::setrlimit(RLIMIT_CPU, &r);
        }
        if (limits.memory_bytes) {
            rlimit r{limits.memory_bytes, limits.memory_bytes};
            ::setrlimit(RLIMIT_AS, &r);
        }
        if (limits.max_processes) {
            rlimit r{limits.max_processes, limits.max_processes};
            ::setrlimit(RLIMIT_NPROC, &r);
        }
        ::execvp(argv[0], argv.data());
        ::_exit(127);
    }
    ::setpgid(pid, pid);
    ::close(out[1]);
    ::close(in[0]);
    ::fcntl(out[0], F_SETFL, ::fcntl(out[0], F_GETFL) | O_NONBLOCK);
    return ChildProcess(pid, out[0], in[1]);
}

SimulatedTerminal::SimulatedTerminal(std::shared_ptr<const Scenario> scenario, SandboxPolicy policy,
                                     std::shared_ptr<const KillSwitch> kill_switch, std::string sandbox_id)
    : shell_(std::move(scenario)),
      policy_(std::move(policy)),
      kill_switch_(std::move(kill_switch)),
      sandbox_id_(std::move(sandbox_id)) {
    policy_.validate();
}

ExecutionRecord SimulatedTerminal::execute(const std::string& command) {
    std::lock_guard lock(mutex_);
    if (kill_switch_ && kill_switch_->active()) throw Error(ErrorCode::KillSwitchActive, "execute refused");
    if (!policy_.network_scope.empty() && !policy_.permits_network(command)) {
        throw Error(ErrorCode::SandboxViolation, "address outside network scope in: " + command);
    }
    const auto start = Clock::now();
    ExecutionRecord rec;
    rec.command = command;
    rec.sandbox_id = sandbox_id_;

    ShellReply reply = shell_.peek(command);
    if (reply.duration_ms > 0) {
        const auto budget = std::min<std::chrono::milliseconds>(std::chrono::milliseconds(reply.duration_ms),
                                                                policy_.timeout);
        const bool fired = kill_switch_ ? kill_switch_->wait_for(budget) : (std::this_thread::sleep_for(budget), false);
        if (fired) {
            rec.interrupted = true;
        } else if (std::chrono::milliseconds(reply.duration_ms) > policy_.timeout) {
            rec.timed_out = true;
        }
    }
    rec.duration_ms = elapsed_ms(start);
    if (rec.interrupted || rec.timed_out) {
        rec.signal = "KILL";
        rec.exit_code = 128 + SIGKILL;
        rec.output = rec.timed_out ? "[command timed out]\n" : "[terminated by kill switch]\n";
        rec.original_length = rec.output.size();
        return rec;
    }
    reply = shell_.feed(command);
    rec.exit_code = reply.exit_code;
    rec.original_length = reply.output.size();
    auto cap = capture(reply.output, policy_.capture_limit, policy_.truncation);
    rec.output = std::move(cap.text);
    rec.truncated = cap.truncated;
    rec.credited_step = reply.credit;
    if (reply.credit) credits_.push_back(*reply.credit);
    return rec;
}

std::string SimulatedTerminal::current_state() const {
    std::lock_guard lock(mutex_);
    return shell_.current_state();
}

std::vector<std::string> SimulatedTerminal::credits() const {
    std::lock_guard lock(mutex_);
    return credits_;
}

ContainerTerminal::ContainerTerminal(SandboxPolicy policy, std::shared_ptr<ProcessSpawner> spawner,
                                     std::shared_ptr<const KillSwitch> kill_switch, std::string sandbox_id)
    : policy_(std::move(policy)),
      spawner_(std::move(spawner)),
      kill_switch_(std::move(kill_switch)),
      sandbox_id_(std::move(sandbox_id)),
      cwd_(policy_.filesystem_scope) {
    policy_.validate();
}

std::string ContainerTerminal::working_directory() const {
    std::lock_guard lock(mutex_);
    return cwd_;
}

ExecutionRecord ContainerTerminal::execute(const std::string& command) {
    std::lock_guard lock(mutex_);
    if (kill_switch_ && kill_switch_->active()) throw Error(ErrorCode::KillSwitchActive, "execute refused");
    if (!policy_.permits_network(command)) {
        throw Error(ErrorCode::SandboxViolation, "address outside network scope in: " + command);
    }

    const std::string env_file = shell_quote(policy_.filesystem_scope + "/.rtl-env-" + sandbox_id_);
    const std::string script = "[ -f " + env_file + " ] && . " + env_file + " 2>/dev/null\ncd " + shell_quote(cwd_) +
                               " 2>/dev/null\n" + command + "\n__rtl_rc=$?\nexport -p > " + env_file +
                               " 2>/dev/null\nprintf '\\n" + std::string(kCwdMarker) +
                               "%s\\n' \"$PWD\"\nexit $__rtl_rc\n";
    SpawnRequest req;
    req.argv = policy_.launcher;
    req.argv.push_back(script);
    req.cwd = policy_.filesystem_scope;
    req.limits = policy_.limits;

    ExecutionRecord rec;
    rec.command = command;
    rec.sandbox_id = sandbox_id_;
    const auto start = Clock::now();
    ChildProcess child = spawner_->spawn(req);

    std::string raw;
    auto last_output = Clock::now();
    auto last_probe = Clock::time_point{};
    bool eof = false;
    char buf[8192];
    while (!eof) {
        pollfd pfd{child.output_fd(), POLLIN, 0};
        const int ready = ::poll(&pfd, 1, 50);
        if (ready > 0) {
            for (;;) {
                const ssize_t n = ::read(child.output_fd(), buf, sizeof buf);
                if (n > 0) {
                    raw.append(buf, static_cast<std::size_t>(n));
                    last_output = Clock::now();
                    continue;
                }
                if (n == 0) eof = true;
                break;
            }
        }
        if (eof) break;
        if (kill_switch_ && kill_switch_->active()) {
            rec.interrupted = true;
            break;
        }
        if (Clock::now() - start >= policy_.timeout) {
            rec.timed_out = true;
            break;
        }
        const auto idle = Clock::now() - last_output;
        if (idle >= std::chrono::milliseconds(200) && Clock::now() - last_probe >= std::chrono::milliseconds(200)) {
            last_probe = Clock::now();
            InputProbe probe = detect_awaiting_input(child.pid());
            rec.probe_available = rec.probe_available && probe.available;
            AwaitingInput state = probe.state;
            if (!probe.available) {
                state = idle >= 2 * policy_.idle_window ? AwaitingInput::Yes
                        : idle >= policy_.idle_window   ? AwaitingInput::Unknown
                                                        : AwaitingInput::No;
            } else if (state == AwaitingInput::Unknown && idle >= policy_.idle_window) {
                state = AwaitingInput::Yes;
            }
            if (state != AwaitingInput::No) rec.awaiting_input = state;
            if (state == AwaitingInput::Yes) break;
        }
    }

    int status = 0;
    if (!eof) {
        child.kill_group(SIGKILL);
        status = child.wait();
        // Drain whatever was written before the kill.
        for (;;) {
            const ssize_t n = ::read(child.output_fd(), buf, sizeof buf);
            if (n <= 0) break;
            raw.append(buf, static_cast<std::size_t>(n));
        }
    } else {
        status = child.wait();
        child.kill_group(SIGKILL);  // stray background jobs
    }
    rec.duration_ms = elapsed_ms(start);
    if (WIFEXITED(status)) {
        rec.exit_code = WEXITSTATUS(status);
    } else if (WIFSIGNALED(status)) {
        rec.signal = signal_name(WTERMSIG(status));
        rec.exit_code = 128 + WTERMSIG(status);
    }

    const std::string marker = "\n" + std::string(kCwdMarker);
    if (auto pos = raw.rfind(marker); pos != std::string::npos) {
        auto end = raw.find('\n', pos + marker.size());
        std::string dir = raw.substr(pos + marker.size(), end == std::string::npos ? std::string::npos : end - pos - marker.size());
        raw.erase(pos);
        const std::string& scope = policy_.filesystem_scope;
        if (dir.rfind(scope, 0) == 0 && (dir.size() == scope.size() || scope.back() == '/' || dir[scope.size()] == '/')) {
            cwd_ = dir;
        } else {
            cwd_ = scope;
            raw += "\n[sandbox: working directory outside filesystem scope, reset to " + scope + "]";
        }
    }
    if (rec.awaiting_input == AwaitingInput::Yes && !eof) {
        raw += "\n[process is waiting for input; terminated]";
    }
    rec.original_length = raw.size();
    auto cap = capture(raw, policy_.capture_limit, policy_.truncation);
    rec.output = std::move(cap.text);
    rec.truncated = cap.truncated;
    return rec;
}

}  // namespace redteam
