#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "redteam/llm_gateway.hpp"
#include "redteam/orchestrator.hpp"
#include "redteam/scenario.hpp"

namespace redteam {

/// Throws ConfigError for duplicate ids or non-positive weights.
void validate_rubric(const std::vector<WriteupStep>& rubric);

/// Sum of weights of the distinct credited steps. Throws UnknownRubricStep.
double score_completion(const std::vector<std::string>& credits, const std::vector<WriteupStep>& rubric);

/// (without - with) / without, as a percentage in tenths rounded half-up.
/// Positive tenths are drops, negative ones increases.
struct DropResult {
    bool defined = false;  // false when without == 0
    std::int64_t tenths = 0;

    [[nodiscard]] bool increase() const noexcept { return defined && tenths < 0; }
    [[nodiscard]] double percent() const noexcept { return static_cast<double>(tenths) / 10.0; }
    /// "37.0% drop", "increase of 291.0%", "no change" or "undefined".
    [[nodiscard]] std::string render() const;
};

DropResult tool_call_drop(std::uint64_t with_reasoning, std::uint64_t without_reasoning);

enum class Ablation : std::uint8_t { With, Without, Both };
std::string_view to_string(Ablation a) noexcept;
Ablation parse_ablation(std::string_view s);

struct MetricsRow {
    std::string scenario;
    std::size_t repetition = 0;
    bool reasoning_enabled = true;
    CallCounts api_calls;
    std::uint64_t tool_calls = 0;
    double steps_completed = 0;
    double rubric_total = 0;
    std::string state;
    std::string run_id;
    std::string error;  // non-empty: the cell failed and is left out of aggregates

    bool operator==(const MetricsRow&) const = default;
};

void to_json(nlohmann::json& j, const MetricsRow& r);
void from_json(const nlohmann::json& j, MetricsRow& r);

struct ConditionAggregate {
    std::size_t runs = 0;
    double max_steps = 0;
    double rubric_total = 0;
    std::uint64_t total_tool_calls = 0;
    CallCounts api_calls;  // summed over runs
    std::optional<ComponentShares> shares;

    bool operator==(const ConditionAggregate& o) const noexcept;
};

struct ScenarioDelta {
    DropResult tool_call_drop;
    double step_delta = 0;  // max steps with reasoning minus without
};

/// Every aggregate is a pure function of the rows.
struct Aggregates {
    std::map<std::string, ConditionAggregate> with_reasoning;
    std::map<std::string, ConditionAggregate> without_reasoning;
    std::map<std::string, ScenarioDelta> deltas;  // scenarios present in both conditions
};

Aggregates aggregate(const std::vector<MetricsRow>& rows);

/// Deltas for scenarios present in both maps.
std::map<std::string, ScenarioDelta> ablation_delta(const std::map<std::string, ConditionAggregate>& with_reasoning,
                                                    const std::map<std::string, ConditionAggregate>& without_reasoning);

nlohmann::json aggregates_json(const Aggregates& a);

struct MetricsReport {
    std::vector<MetricsRow> rows;
    Aggregates aggregates;
};

/// Columns: scenario,repetition,reasoning,api_reason,api_act,api_summarizer,
/// api_planner,api_corrector,tool_calls,steps_completed,rubric_total,state,run_id,error
std::string rows_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_rows_csv(const std::string& csv);

/// Series for the component-share, tool-call and step-completion plots.
nlohmann::json plot_data(const std::vector<MetricsRow>& rows);

struct BenchmarkOptions {
    std::vector<std::string> scenarios;
    std::size_t repetitions = 5;
    Ablation ablation = Ablation::Both;
    RunConfig base;  // scenario, reasoning and script are set per cell
    std::optional<std::string> script_dir;  // overrides the scenario directory for scripts
};

/// A suite file: {"name": ..., "scenarios": [...], "repetitions": N, "ablation": "both"}.
BenchmarkOptions load_suite(const std::string& path_or_name, const std::string& scenario_dir);

/// Runs repetitions x conditions cells through the orchestrator's pool.
MetricsReport run_benchmark(Orchestrator& orchestrator, const BenchmarkOptions& options,
                            const std::string& session_id);

/// rows.csv, aggregates.json, plotdata.json.
void write_report(const MetricsReport& report, const std::string& directory);

}  // namespace redteam
