#include "redteam/eval_harness.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "redteam/error.hpp"

namespace fs = std::filesystem;

namespace redteam {

namespace {

std::string format_number(double v) {
    std::ostringstream ss;
    ss << std::setprecision(15) << v;
    return ss.str();
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
                field += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n') {
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
            any = false;
        } else if (c != '\r') {
            field += c;
            any = true;
        }
    }
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

constexpr std::string_view kCsvHeader =
    "scenario,repetition,reasoning,api_reason,api_act,api_summarizer,api_planner,api_corrector,tool_calls,"
    "steps_completed,rubric_total,state,run_id,error";

nlohmann::json condition_json(const ConditionAggregate& c) {
    nlohmann::json j{{"runs", c.runs},
                     {"max_steps", c.max_steps},
                     {"rubric_total", c.rubric_total},
                     {"total_tool_calls", c.total_tool_calls},
                     {"api_calls", c.api_calls}};
    if (c.shares)
        j["shares"] = {{"reason", format_tenths(c.shares->reason_tenths)},
                       {"act", format_tenths(c.shares->act_tenths)},
                       {"summarizer", format_tenths(c.shares->summarizer_tenths)}};
    else
        j["shares"] = nullptr;
    return j;
}

void write_file(const fs::path& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::StorageError, "cannot write " + path.string());
    out << content;
}

}  // namespace

void validate_rubric(const std::vector<WriteupStep>& rubric) {
    std::set<std::string> ids;
    for (const auto& s : rubric) {
        if (s.id.empty()) throw Error(ErrorCode::ConfigError, "rubric step without id");
        if (!ids.insert(s.id).second) throw Error(ErrorCode::ConfigError, "duplicate rubric step id " + s.id);
        if (!(s.weight > 0)) throw Error(ErrorCode::ConfigError, "rubric step " + s.id + " has no positive weight");
    }
}

double score_completion(const std::vector<std::string>& credits, const std::vector<WriteupStep>& rubric) {
    std::set<std::string> seen;
    double total = 0;
    for (const auto& id : credits) {
        auto it = std::find_if(rubric.begin(), rubric.end(), [&](const WriteupStep& s) { return s.id == id; });
        if (it == rubric.end()) throw Error(ErrorCode::UnknownRubricStep, "credit for unknown rubric step " + id);
        if (seen.insert(id).second) total += it->weight;
    }
    return total;
}

std::string DropResult::render() const {
    if (!defined) return "undefined";
    if (tenths == 0) return "no change";
    if (tenths > 0) return format_tenths(tenths) + "% drop";
    return "increase of " + format_tenths(-tenths) + "%";
}

DropResult tool_call_drop(std::uint64_t with_reasoning, std::uint64_t without_reasoning) {
    DropResult r;
    if (without_reasoning == 0) return r;
    r.defined = true;
    r.tenths = percent_tenths_half_up(static_cast<std::int64_t>(without_reasoning) -
                                          static_cast<std::int64_t>(with_reasoning),
                                      static_cast<std::int64_t>(without_reasoning));
    return r;
}

std::string_view to_string(Ablation a) noexcept {
    switch (a) {
        case Ablation::With: return "with";
        case Ablation::Without: return "without";
        case Ablation::Both: return "both";
    }
    return "both";
}

Ablation parse_ablation(std::string_view s) {
    if (s == "with") return Ablation::With;
    if (s == "without") return Ablation::Without;
    if (s == "both") return Ablation::Both;
    throw Error(ErrorCode::ConfigError, "ablation must be with, without or both");
}

void to_json(nlohmann::json& j, const MetricsRow& r) {
    j = {{"scenario", r.scenario},
         {"repetition", r.repetition},
         {"reasoning_enabled", r.reasoning_enabled},
         {"api_calls", r.api_calls},
         {"tool_calls", r.tool_calls},
         {"steps_completed", r.steps_completed},
         {"rubric_total", r.rubric_total},
         {"state", r.state},
         {"run_id", r.run_id},
         {"error", r.error}};
}

void from_json(const nlohmann::json& j, MetricsRow& r) {
    r.scenario = j.at("scenario").get<std::string>();
    r.repetition = j.at("repetition").get<std::size_t>();
    r.reasoning_enabled = j.at("reasoning_enabled").get<bool>();
    r.api_calls = j.at("api_calls").get<CallCounts>();
    r.tool_calls = j.at("tool_calls").get<std::uint64_t>();
    r.steps_completed = j.at("steps_completed").get<double>();
    r.rubric_total = j.value("rubric_total", 0.0);
    r.state = j.value("state", std::string());
    r.run_id = j.value("run_id", std::string());
    r.error = j.value("error", std::string());
}

bool ConditionAggregate::operator==(const ConditionAggregate& o) const noexcept {
    const bool shares_equal =
        shares.has_value() == o.shares.has_value() &&
        (!shares || (shares->reason_tenths == o.shares->reason_tenths && shares->act_tenths == o.shares->act_tenths &&
                     shares->summarizer_tenths == o.shares->summarizer_tenths));
    return runs == o.runs && max_steps == o.max_steps && rubric_total == o.rubric_total &&
           total_tool_calls == o.total_tool_calls && api_calls == o.api_calls && shares_equal;
}

std::map<std::string, ScenarioDelta> ablation_delta(const std::map<std::string, ConditionAggregate>& with_reasoning,
                                                    const std::map<std::string, ConditionAggregate>& without_reasoning) {
    std::map<std::string, ScenarioDelta> out;
    for (const auto& [name, w] : with_reasoning) {
        auto it = without_reasoning.find(name);
        if (it == without_reasoning.end()) continue;
        out[name] = ScenarioDelta{tool_call_drop(w.total_tool_calls, it->second.total_tool_calls),
                                  w.max_steps - it->second.max_steps};
    }
    return out;
}

Aggregates aggregate(const std::vector<MetricsRow>& rows) {
    Aggregates a;
    for (const auto& r : rows) {
        if (!r.error.empty()) continue;
        auto& c = (r.reasoning_enabled ? a.with_reasoning : a.without_reasoning)[r.scenario];
        ++c.runs;
        c.max_steps = std::max(c.max_steps, r.steps_completed);
        c.rubric_total = std::max(c.rubric_total, r.rubric_total);
        c.total_tool_calls += r.tool_calls;
        c.api_calls.reason += r.api_calls.reason;
        c.api_calls.act += r.api_calls.act;
        c.api_calls.summarizer += r.api_calls.summarizer;
        c.api_calls.planner += r.api_calls.planner;
        c.api_calls.corrector += r.api_calls.corrector;
    }
    for (auto* side : {&a.with_reasoning, &a.without_reasoning})
        for (auto& [name, c] : *side)
            if (c.api_calls.reason + c.api_calls.act + c.api_calls.summarizer > 0)
                c.shares = component_shares(c.api_calls);
    a.deltas = ablation_delta(a.with_reasoning, a.without_reasoning);
    return a;
}

nlohmann::json aggregates_json(const Aggregates& a) {
    nlohmann::json j{{"with_reasoning", nlohmann::json::object()},
                     {"without_reasoning", nlohmann::json::object()},
                     {"ablation", nlohmann::json::object()}};
    for (const auto& [n, c] : a.with_reasoning) j["with_reasoning"][n] = condition_json(c);
    for (const auto& [n, c] : a.without_reasoning) j["without_reasoning"][n] = condition_json(c);
    std::size_t fewer = 0, more_steps = 0;
    for (const auto& [n, d] : a.deltas) {
        j["ablation"][n] = {{"tool_call_drop_pct",
                             d.tool_call_drop.defined ? nlohmann::json(format_tenths(d.tool_call_drop.tenths))
                                                      : nlohmann::json("undefined")},
                            {"tool_call_change", d.tool_call_drop.render()},
                            {"step_delta", d.step_delta}};
        if (d.tool_call_drop.defined && d.tool_call_drop.tenths > 0) ++fewer;
        if (d.step_delta > 0) ++more_steps;
    }
    j["summary"] = {{"scenarios_compared", a.deltas.size()},
                    {"fewer_tool_calls_with_reasoning", fewer},
                    {"more_steps_with_reasoning", more_steps}};
    return j;
}

std::string rows_csv(const std::vector<MetricsRow>& rows) {
    std::string out(kCsvHeader);
    out += "\n";
    for (const auto& r : rows) {
        out += csv_field(r.scenario) + "," + std::to_string(r.repetition) + "," + (r.reasoning_enabled ? "1" : "0") +
               "," + std::to_string(r.api_calls.reason) + "," + std::to_string(r.api_calls.act) + "," +
               std::to_string(r.api_calls.summarizer) + "," + std::to_string(r.api_calls.planner) + "," +
               std::to_string(r.api_calls.corrector) + "," + std::to_string(r.tool_calls) + "," +
               format_number(r.steps_completed) + "," + format_number(r.rubric_total) + "," + csv_field(r.state) +
               "," + csv_field(r.run_id) + "," + csv_field(r.error) + "\n";
    }
    return out;
}

std::vector<MetricsRow> parse_rows_csv(const std::string& csv) {
    auto table = parse_csv(csv);
    if (table.empty()) throw Error(ErrorCode::ParseError, "empty rows file");
    std::vector<MetricsRow> rows;
    for (std::size_t i = 1; i < table.size(); ++i) {
        const auto& f = table[i];
        if (f.size() == 1 && f[0].empty()) continue;
        if (f.size() != 14) throw Error(ErrorCode::ParseError, "row " + std::to_string(i) + " has wrong column count");
        try {
            MetricsRow r;
            r.scenario = f[0];
            r.repetition = std::stoul(f[1]);
            r.reasoning_enabled = f[2] == "1";
            r.api_calls = {std::stoull(f[3]), std::stoull(f[4]), std::stoull(f[5]), std::stoull(f[6]),
                           std::stoull(f[7])};
            r.tool_calls = std::stoull(f[8]);
            r.steps_completed = std::stod(f[9]);
            r.rubric_total = std::stod(f[10]);
            r.state = f[11];
            r.run_id = f[12];
            r.error = f[13];
            rows.push_back(std::move(r));
        } catch (const std::logic_error&) {
            throw Error(ErrorCode::ParseError, "bad number in row " + std::to_string(i));
        }
    }
    return rows;
}

nlohmann::json plot_data(const std::vector<MetricsRow>& rows) {
    const Aggregates a = aggregate(rows);
    std::set<std::string> names;
    for (const auto& [n, c] : a.with_reasoning) names.insert(n);
    for (const auto& [n, c] : a.without_reasoning) names.insert(n);
    nlohmann::json shares = nlohmann::json::array(), tools = nlohmann::json::array(), steps = nlohmann::json::array();
    for (const auto& n : names) {
        for (const auto& [label, side] : {std::pair{"with", &a.with_reasoning}, std::pair{"without", &a.without_reasoning}}) {
            auto it = side->find(n);
            if (it == side->end() || !it->second.shares) continue;
            shares.push_back({{"scenario", n},
                              {"condition", label},
                              {"reason_pct", it->second.shares->reason_tenths / 10.0},
                              {"act_pct", it->second.shares->act_tenths / 10.0},
                              {"summarizer_pct", it->second.shares->summarizer_tenths / 10.0}});
        }
        auto w = a.with_reasoning.find(n);
        auto wo = a.without_reasoning.find(n);
        const nlohmann::json wt = w == a.with_reasoning.end() ? nlohmann::json() : nlohmann::json(w->second.total_tool_calls);
        const nlohmann::json wot =
            wo == a.without_reasoning.end() ? nlohmann::json() : nlohmann::json(wo->second.total_tool_calls);
        tools.push_back({{"scenario", n}, {"with", wt}, {"without", wot}});
        steps.push_back({{"scenario", n},
                         {"with_max", w == a.with_reasoning.end() ? nlohmann::json() : nlohmann::json(w->second.max_steps)},
                         {"without_max",
                          wo == a.without_reasoning.end() ? nlohmann::json() : nlohmann::json(wo->second.max_steps)},
                         {"rubric_total", std::max(w == a.with_reasoning.end() ? 0.0 : w->second.rubric_total,
                                                   wo == a.without_reasoning.end() ? 0.0 : wo->second.rubric_total)}});
    }
    return {{"component_shares", shares}, {"tool_calls", tools}, {"steps_completed", steps}};
}

BenchmarkOptions load_suite(const std::string& path_or_name, const std::string& scenario_dir) {
    fs::path path(path_or_name);
    if (!fs::exists(path)) path = fs::path(scenario_dir) / "suites" / (path_or_name + ".json");
    if (!fs::exists(path)) throw Error(ErrorCode::ConfigError, "no suite named " + path_or_name);
    std::ifstream in(path);
    auto doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw Error(ErrorCode::ConfigError, "suite is not a JSON object");
    BenchmarkOptions o;
    try {
        o.scenarios = doc.at("scenarios").get<std::vector<std::string>>();
        o.repetitions = doc.value("repetitions", std::size_t{5});
        o.ablation = parse_ablation(doc.value("ablation", std::string("both")));
        if (doc.contains("config")) o.base = doc["config"].get<RunConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigError, std::string("bad suite: ") + e.what());
    }
    if (o.scenarios.empty() || o.repetitions == 0) throw Error(ErrorCode::ConfigError, "suite has no cells");
    return o;
}

MetricsReport run_benchmark(Orchestrator& orchestrator, const BenchmarkOptions& options,
                            const std::string& session_id) {
    std::vector<bool> conditions;
    if (options.ablation != Ablation::Without) conditions.push_back(true);
    if (options.ablation != Ablation::With) conditions.push_back(false);

    struct Cell {
        MetricsRow row;
        std::string run_id;
    };
    std::vector<Cell> cells;
    for (const auto& scenario : options.scenarios)
        for (bool reasoning : conditions)
            for (std::size_t rep = 1; rep <= options.repetitions; ++rep) {
                Cell cell;
                cell.row.scenario = scenario;
                cell.row.repetition = rep;
                cell.row.reasoning_enabled = reasoning;
                RunConfig config = options.base;
                config.scenario = scenario;
                config.reasoning = reasoning;
                if (options.script_dir)
                    config.script = (fs::path(*options.script_dir) /
                                     (scenario + (reasoning ? ".with" : ".without") + ".script.json"))
                                        .string();
                else
                    config.script.clear();
                try {
                    cell.run_id = orchestrator.submit("", config, session_id);
                } catch (const Error& e) {
                    cell.row.error = e.what();
                    cell.row.state = "NotStarted";
                }
                cells.push_back(std::move(cell));
            }

    MetricsReport report;
    for (auto& cell : cells) {
        if (!cell.run_id.empty()) {
            const RunDescriptor d = orchestrator.wait(cell.run_id);
            cell.row.run_id = d.run_id;
            cell.row.state = std::string(to_string(d.state));
            cell.row.api_calls = {d.totals.api_calls_reason, d.totals.api_calls_act, d.totals.api_calls_summarizer,
                                  d.totals.api_calls_planner, d.totals.api_calls_corrector};
            cell.row.tool_calls = d.totals.tool_calls;
            cell.row.steps_completed = d.steps_completed;
            cell.row.rubric_total = d.rubric_total;
            cell.row.error = d.error;
        }
        report.rows.push_back(cell.row);
    }
    report.aggregates = aggregate(report.rows);
    return report;
}

void write_report(const MetricsReport& report, const std::string& directory) {
    fs::create_directories(directory);
    write_file(fs::path(directory) / "rows.csv", rows_csv(report.rows));
    write_file(fs::path(directory) / "aggregates.json", aggregates_json(report.aggregates).dump(2) + "\n");
    write_file(fs::path(directory) / "plotdata.json", plot_data(report.rows).dump(2) + "\n");
}

}  // namespace redteam
