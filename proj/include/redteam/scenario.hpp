#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace redteam {

enum class StepCategory : std::uint8_t { Recon, GeneralTechnique, Exploit, PrivilegeEscalation };

std::string_view to_string(StepCategory category) noexcept;
std::optional<StepCategory> parse_step_category(std::string_view text) noexcept;

struct WriteupStep {
    std::string id;
    StepCategory category = StepCategory::Recon;
    std::string description;
    double weight = 1.0;  // 0.5 for half-credit steps
};

struct ScenarioTransition {
    std::string state;
    std::string pattern;  // glob, matched against the whole command line
    std::string output;
    std::optional<std::string> next_state;  // stays in `state` when absent
    std::optional<std::string> step_credit;
    int exit_code = 0;
    std::uint32_t duration_ms = 0;  // simulated run time
    std::uint32_t repeat_output = 1;  // output repeated this many times (large-output scenarios)
};

/// A simulated target: a command -> output state machine with write-up credits.
struct Scenario {
    std::string name;
    std::string task;    // the operator task that starts a run against this target
    std::string target;  // address the network allowlist must contain
    std::vector<WriteupStep> writeup;
    std::vector<std::string> states;
    std::vector<ScenarioTransition> transitions;
    std::string initial_state;

    [[nodiscard]] double total_steps() const noexcept;
    [[nodiscard]] const WriteupStep* step(std::string_view id) const noexcept;

    static Scenario from_json(const nlohmann::json& doc);
    static Scenario load_file(const std::string& path);
    [[nodiscard]] nlohmann::json to_json() const;
};

/// One step of the simulated shell: first transition (declaration order) of
/// the current state whose pattern matches, else a "command not found" reply.
struct ShellReply {
    std::string output;
    int exit_code = 0;
    std::string next_state;
    std::optional<std::string> credit;
    std::uint32_t duration_ms = 0;
    bool matched = false;
};

class ScenarioShell {
public:
    explicit ScenarioShell(std::shared_ptr<const Scenario> scenario);

    [[nodiscard]] ShellReply peek(std::string_view command) const;
    ShellReply feed(std::string_view command);  // peek + commit state

    [[nodiscard]] const std::string& current_state() const noexcept { return state_; }
    [[nodiscard]] const Scenario& scenario() const noexcept { return *scenario_; }

private:
    std::shared_ptr<const Scenario> scenario_;
    std::string state_;
};

bool glob_match(std::string_view pattern, std::string_view text);

}  // namespace redteam
