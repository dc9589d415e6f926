#include "redteam/scenario.hpp"

#include <fnmatch.h>

#include <array>
#include <fstream>
#include <set>
#include <sstream>

#include "redteam/error.hpp"

namespace redteam {

namespace {

constexpr std::array<std::pair<StepCategory, std::string_view>, 4> kCategoryNames{{
    {StepCategory::Recon, "recon"},
    {StepCategory::GeneralTechnique, "general_technique"},
    {StepCategory::Exploit, "exploit"},
    {StepCategory::PrivilegeEscalation, "privilege_escalation"},
}};

[[noreturn]] void bad(const std::string& pointer, const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, "scenario at " + pointer + ": " + what);
}

std::string required_string(const nlohmann::json& j, const char* key, const std::string& pointer) {
    if (!j.contains(key) || !j[key].is_string()) bad(pointer + "/" + key, "string required");
    return j[key].get<std::string>();
}

}  // namespace

std::string_view to_string(StepCategory category) noexcept {
    for (const auto& [c, name] : kCategoryNames) {
        if (c == category) return name;
    }
    return "?";
}

std::optional<StepCategory> parse_step_category(std::string_view text) noexcept {
    for (const auto& [c, name] : kCategoryNames) {
        if (name == text) return c;
    }
    return std::nullopt;
}

bool glob_match(std::string_view pattern, std::string_view text) {
    const std::string p(pattern);
    const std::string t(text);
    return ::fnmatch(p.c_str(), t.c_str(), 0) == 0;
}

double Scenario::total_steps() const noexcept {
    double total = 0;
    for (const auto& s : writeup) total += s.weight;
    return total;
}

const WriteupStep* Scenario::step(std::string_view id) const noexcept {
    for (const auto& s : writeup) {
        if (s.id == id) return &s;
    }
    return nullptr;
}

Scenario Scenario::from_json(const nlohmann::json& doc) {
    if (!doc.is_object()) bad("/", "object required");
    Scenario s;
    s.name = required_string(doc, "name", "");
    s.task = required_string(doc, "task", "");
    s.target = doc.value("target", std::string());
    s.initial_state = required_string(doc, "initial_state", "");

    if (!doc.contains("writeup") || !doc["writeup"].is_array()) bad("/writeup", "array required");
    std::set<std::string> step_ids;
    for (std::size_t i = 0; i < doc["writeup"].size(); ++i) {
        const auto& w = doc["writeup"][i];
        const std::string pointer = "/writeup/" + std::to_string(i);
        WriteupStep step;
        step.id = required_string(w, "id", pointer);
        auto cat = parse_step_category(required_string(w, "category", pointer));
        if (!cat) bad(pointer + "/category", "unknown category");
        step.category = *cat;
        step.description = w.value("description", std::string());
        step.weight = w.value("weight", 1.0);
        if (step.weight <= 0) bad(pointer + "/weight", "must be positive");
        if (!step_ids.insert(step.id).second) bad(pointer + "/id", "duplicate step id " + step.id);
        s.writeup.push_back(std::move(step));
    }

    if (!doc.contains("states") || !doc["states"].is_array()) bad("/states", "array required");
    s.states = doc["states"].get<std::vector<std::string>>();
    const std::set<std::string> states(s.states.begin(), s.states.end());
    if (states.size() != s.states.size()) bad("/states", "duplicate state");
    if (!states.contains(s.initial_state)) bad("/initial_state", "undeclared state " + s.initial_state);

    if (!doc.contains("transitions") || !doc["transitions"].is_array()) bad("/transitions", "array required");
    for (std::size_t i = 0; i < doc["transitions"].size(); ++i) {
        const auto& t = doc["transitions"][i];
        const std::string pointer = "/transitions/" + std::to_string(i);
        ScenarioTransition tr;
        tr.state = required_string(t, "state", pointer);
        tr.pattern = required_string(t, "pattern", pointer);
        tr.output = t.value("output", std::string());
        if (t.contains("next_state") && !t["next_state"].is_null()) tr.next_state = t["next_state"].get<std::string>();
        if (t.contains("step_credit") && !t["step_credit"].is_null()) {
            tr.step_credit = t["step_credit"].get<std::string>();
        }
        tr.exit_code = t.value("exit_code", 0);
        tr.duration_ms = t.value("duration_ms", std::uint32_t{0});
        tr.repeat_output = t.value("repeat_output", std::uint32_t{1});
        if (!states.contains(tr.state)) bad(pointer + "/state", "undeclared state " + tr.state);
        if (tr.next_state && !states.contains(*tr.next_state)) {
            bad(pointer + "/next_state", "undeclared state " + *tr.next_state);
        }
        if (tr.step_credit && !step_ids.contains(*tr.step_credit)) {
            bad(pointer + "/step_credit", "unknown write-up step " + *tr.step_credit);
        }
        s.transitions.push_back(std::move(tr));
    }
    return s;
}

Scenario Scenario::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::ConfigError, "cannot open scenario " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    auto doc = nlohmann::json::parse(buf.str(), nullptr, false);
    if (doc.is_discarded()) throw Error(ErrorCode::SchemaViolation, "scenario " + path + " is not valid JSON");
    return from_json(doc);
}

nlohmann::json Scenario::to_json() const {
    nlohmann::json w = nlohmann::json::array();
    for (const auto& s : writeup) {
        w.push_back({{"id", s.id}, {"category", to_string(s.category)}, {"description", s.description},
                     {"weight", s.weight}});
    }
    nlohmann::json t = nlohmann::json::array();
    for (const auto& tr : transitions) {
        nlohmann::json j{{"state", tr.state}, {"pattern", tr.pattern}, {"output", tr.output}};
        if (tr.next_state) j["next_state"] = *tr.next_state;
        if (tr.step_credit) j["step_credit"] = *tr.step_credit;
        if (tr.exit_code != 0) j["exit_code"] = tr.exit_code;
        if (tr.duration_ms != 0) j["duration_ms"] = tr.duration_ms;
        if (tr.repeat_output != 1) j["repeat_output"] = tr.repeat_output;
        t.push_back(std::move(j));
    }
    return {{"name", name}, {"task", task}, {"target", target}, {"writeup", std::move(w)},
            {"states", states}, {"initial_state", initial_state}, {"transitions", std::move(t)}};
}

ScenarioShell::ScenarioShell(std::shared_ptr<const Scenario> scenario)
    : scenario_(std::move(scenario)), state_(scenario_->initial_state) {}

ShellReply ScenarioShell::peek(std::string_view command) const {
    for (const auto& tr : scenario_->transitions) {
        if (tr.state != state_ || !glob_match(tr.pattern, command)) continue;
        ShellReply r;
        r.output.reserve(tr.output.size() * tr.repeat_output);
        for (std::uint32_t i = 0; i < tr.repeat_output; ++i) r.output += tr.output;
        r.exit_code = tr.exit_code;
        r.next_state = tr.next_state.value_or(state_);
        r.credit = tr.step_credit;
        r.duration_ms = tr.duration_ms;
        r.matched = true;
        return r;
    }
    std::string program(command.substr(0, command.find(' ')));
    return ShellReply{"sh: 1: " + program + ": command not found\n", 127, state_, std::nullopt, 0, false};
}

ShellReply ScenarioShell::feed(std::string_view command) {
    ShellReply r = peek(command);
    state_ = r.next_state;
    return r;
}

}  // namespace redteam
