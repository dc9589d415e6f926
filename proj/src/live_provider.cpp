#include <httplib.h>

#include <cstdlib>
#include <thread>

#include "redteam/error.hpp"
#include "redteam/llm_gateway.hpp"
#include "redteam/memory.hpp"

namespace redteam {

namespace {

std::string env_or_empty(const char* name) {
    const char* v = std::getenv(name);
    return v ? std::string(v) : std::string();
}

// "https://host:port/v1" -> {"https://host:port", "/v1"}
std::pair<std::string, std::string> split_endpoint(const std::string& endpoint) {
    auto scheme_end = endpoint.find("://");
    auto path_start = endpoint.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
    if (path_start == std::string::npos) return {endpoint, ""};
    std::string path = endpoint.substr(path_start);
    while (!path.empty() && path.back() == '/') path.pop_back();
    return {endpoint.substr(0, path_start), path};
}

const nlohmann::json& terminal_tool_schema() {
    static const nlohmann::json schema = {
        {"type", "function"},
        {"function",
         {{"name", "terminal"},
          {"description", "Run one shell command in the persistent sandboxed terminal and return its output."},
          {"parameters",
           {{"type", "object"},
            {"properties", {{"command", {{"type", "string"}}}}},
            {"required", {"command"}}}}}}};
    return schema;
}

}  // namespace

LiveProviderConfig LiveProviderConfig::from_environment() {
    LiveProviderConfig c;
    c.endpoint = env_or_empty("REDTEAM_LLM_ENDPOINT");
    c.api_key = env_or_empty("REDTEAM_LLM_API_KEY");
    c.model = env_or_empty("REDTEAM_LLM_MODEL");
    if (c.endpoint.empty()) c.endpoint = "https://api.openai.com/v1";
    if (c.model.empty()) c.model = "gpt-4o";
    return c;
}

LiveProvider::LiveProvider(LiveProviderConfig config) : config_(std::move(config)) {
    if (config_.max_attempts < 1) config_.max_attempts = 1;
}

nlohmann::json LiveProvider::request_body(const ChatTranscript& transcript) const {
    nlohmann::json messages = nlohmann::json::array();
    int call_index = 0;
    std::string last_call_id;
    for (const auto& m : transcript.messages()) {
        if (m.role != Role::ToolResult && !last_call_id.empty()) {
            // unanswered tool call: close it with a placeholder tool message
            messages.push_back({{"role", "tool"}, {"tool_call_id", last_call_id}, {"content", "[result follows]"}});
            last_call_id.clear();
        }
        nlohmann::json jm{{"role", to_string(m.role)}, {"content", m.content}};
        if (m.role == Role::Assistant && m.tool_call) {
            last_call_id = "call_" + std::to_string(call_index++);
            jm["tool_calls"] = nlohmann::json::array(
                {{{"id", last_call_id},
                  {"type", "function"},
                  {"function", {{"name", m.tool_call->tool_name}, {"arguments", m.tool_call->arguments}}}}});
        }
        if (m.role == Role::ToolResult) {
            if (last_call_id.empty()) {
                jm["role"] = "user";
            } else {
                jm["tool_call_id"] = last_call_id;
                last_call_id.clear();
            }
        }
        messages.push_back(std::move(jm));
    }
    nlohmann::json body{{"model", config_.model}, {"messages", std::move(messages)}};
    if (transcript.kind() == SessionKind::Act) body["tools"] = nlohmann::json::array({terminal_tool_schema()});
    return body;
}

Completion LiveProvider::parse_response(const nlohmann::json& body) {
    try {
        const auto& message = body.at("choices").at(0).at("message");
        Completion c;
        if (message.contains("content") && message["content"].is_string()) c.text = message["content"];
        if (message.contains("tool_calls") && message["tool_calls"].is_array() && !message["tool_calls"].empty()) {
            const auto& fn = message["tool_calls"][0].at("function");
            c.tool_call = ToolCall{fn.at("name").get<std::string>(), fn.at("arguments").get<std::string>()};
        }
        if (body.contains("usage")) {
            c.usage.prompt_tokens = body["usage"].value("prompt_tokens", std::uint64_t{0});
            c.usage.completion_tokens = body["usage"].value("completion_tokens", std::uint64_t{0});
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ProviderError, std::string("malformed completion response: ") + e.what(), false);
    }
}

Completion LiveProvider::generate(const ChatTranscript& transcript, std::size_t) {
    auto [host, prefix] = split_endpoint(config_.endpoint);
    const std::string body = request_body(transcript).dump();
    auto backoff = config_.initial_backoff;
    std::string last_error;
    for (int attempt = 1; attempt <= config_.max_attempts; ++attempt) {
        httplib::Client client(host);
        client.set_connection_timeout(config_.timeout);
        client.set_read_timeout(config_.timeout);
        httplib::Headers headers;
        if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
        auto res = client.Post(prefix + "/chat/completions", headers, body, "application/json");
        bool retriable = true;
        if (!res) {
            last_error = "transport: " + httplib::to_string(res.error());
        } else if (res->status == 200) {
            auto parsed = nlohmann::json::parse(res->body, nullptr, false);
            if (parsed.is_discarded()) throw Error(ErrorCode::ProviderError, "response is not JSON", false);
            return parse_response(parsed);
        } else {
            last_error = "HTTP " + std::to_string(res->status);
            retriable = res->status == 429 || res->status >= 500;
        }
        if (!retriable) throw Error(ErrorCode::ProviderError, last_error, false);
        if (attempt < config_.max_attempts) {
            std::this_thread::sleep_for(backoff);
            backoff *= 2;
        }
    }
    throw Error(ErrorCode::ProviderError,
                last_error + " after " + std::to_string(config_.max_attempts) + " attempts", true);
}


LiveEmbedderConfig LiveEmbedderConfig::from_environment() {
    LiveEmbedderConfig c;
    c.endpoint = env_or_empty("REDTEAM_LLM_ENDPOINT");
    c.api_key = env_or_empty("REDTEAM_LLM_API_KEY");
    if (c.endpoint.empty()) c.endpoint = "https://api.openai.com/v1";
    if (auto m = env_or_empty("REDTEAM_EMBEDDING_MODEL"); !m.empty()) c.model = m;
    if (auto d = env_or_empty("REDTEAM_EMBEDDING_DIM"); !d.empty()) c.dimension = std::stoul(d);
    return c;
}

Embedding LiveEmbedder::embed_raw(std::string_view text) {
    auto [host, prefix] = split_endpoint(config_.endpoint);
    httplib::Client client(host);
    httplib::Headers headers;
    if (!config_.api_key.empty()) headers.emplace("Authorization", "Bearer " + config_.api_key);
    const std::string body = nlohmann::json{{"model", config_.model}, {"input", text}}.dump();
    auto res = client.Post(prefix + "/embeddings", headers, body, "application/json");
    if (!res) throw Error(ErrorCode::EmbedderError, "transport: " + httplib::to_string(res.error()));
    if (res->status != 200) throw Error(ErrorCode::EmbedderError, "HTTP " + std::to_string(res->status));
    auto j = nlohmann::json::parse(res->body, nullptr, false);
    try {
        return j.at("data").at(0).at("embedding").get<Embedding>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::EmbedderError, std::string("malformed embedding response: ") + e.what());
    }
}

}  // namespace redteam
