#include "redteam/service.hpp"

#include <httplib.h>

#include "redteam/error.hpp"
#include "redteam/prompts.hpp"

namespace redteam {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
    send_json(res, status, {{"error", code}, {"message", message}});
}

std::string bearer(const httplib::Request& req) {
    const std::string h = req.get_header_value("Authorization");
    constexpr std::string_view prefix = "Bearer ";
    if (h.size() > prefix.size() && h.compare(0, prefix.size(), prefix) == 0) return h.substr(prefix.size());
    return {};
}

nlohmann::json body_json(const httplib::Request& req) {
    if (req.body.empty()) return nlohmann::json::object();
    auto j = nlohmann::json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::ParseError, "request body is not a JSON object");
    return j;
}

}  // namespace

int ServiceServer::status_for(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::InvalidCredentials:
        case ErrorCode::SessionExpired: return 401;
        case ErrorCode::Unauthorized: return 403;
        case ErrorCode::LockedOut: return 429;
        case ErrorCode::UnknownRun:
        case ErrorCode::UnknownRequest:
        case ErrorCode::UnknownNode: return 404;
        case ErrorCode::AlreadyDecided:
        case ErrorCode::RunTerminal:
        case ErrorCode::StaleRevision:
        case ErrorCode::KillSwitchActive:
        case ErrorCode::IllegalTransition:
        case ErrorCode::InvalidStatus: return 409;
        case ErrorCode::ConfigError:
        case ErrorCode::PolicyViolation:
        case ErrorCode::ParseError:
        case ErrorCode::EmptyDescription:
        case ErrorCode::SchemaViolation: return 400;
        case ErrorCode::Timeout: return 504;
        default: return 500;
    }
}

struct ServiceServer::Impl {
    httplib::Server server;
};

ServiceServer::ServiceServer(Orchestrator& orchestrator, Options options)
    : orchestrator_(orchestrator), options_(std::move(options)), impl_(std::make_unique<Impl>()) {
    auto& svr = impl_->server;
    Orchestrator& orch = orchestrator_;

    // Wraps a handler with session validation and error mapping.
    auto guarded = [&orch](auto fn) {
        return [&orch, fn](const httplib::Request& req, httplib::Response& res) {
            try {
                const std::string sid = bearer(req);
                if (sid.empty()) {
                    send_error(res, 401, "Unauthorized", "missing bearer session");
                    return;
                }
                OperatorSession session;
                try {
                    session = orch.authenticator().validate(sid);
                } catch (const Error& e) {
                    send_error(res, 401, to_string(e.code()), e.what());
                    return;
                }
                fn(req, res, session);
            } catch (const Error& e) {
                send_error(res, status_for(e.code()), to_string(e.code()), e.what());
            } catch (const nlohmann::json::exception& e) {
                send_error(res, 400, "ParseError", e.what());
            } catch (const std::exception& e) {
                send_error(res, 500, "InternalError", e.what());
            }
        };
    };

    svr.Get("/version", [](const httplib::Request&, httplib::Response& res) {
        send_json(res, 200, {{"api", kApiVersion}, {"prompts", prompts::kVersion}});
    });

    svr.Post("/sessions", [&orch](const httplib::Request& req, httplib::Response& res) {
        try {
            auto body = body_json(req);
            auto s = orch.authenticator().authenticate(body.at("principal").get<std::string>(),
                                                       body.at("password").get<std::string>());
            send_json(res, 201, s);
        } catch (const Error& e) {
            send_error(res, status_for(e.code()), to_string(e.code()), e.what());
        } catch (const nlohmann::json::exception& e) {
            send_error(res, 400, "ParseError", e.what());
        }
    });

    svr.Post("/runs", guarded([&orch](const httplib::Request& req, httplib::Response& res, const OperatorSession& s) {
        auto body = body_json(req);
        RunConfig config = body.contains("config") ? body["config"].get<RunConfig>() : RunConfig{};
        const std::string id = orch.submit(body.value("task", std::string()), config, s.session_id);
        send_json(res, 201, {{"run_id", id}, {"state", to_string(orch.get_state(id).state)}});
    }));

    svr.Get("/runs", guarded([&orch](const httplib::Request&, httplib::Response& res, const OperatorSession&) {
        send_json(res, 200, orch.list_runs());
    }));

    svr.Get(R"(/runs/([^/]+))", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                const OperatorSession&) {
        send_json(res, 200, orch.get_state(req.matches[1]));
    }));

    svr.Get(R"(/runs/([^/]+)/tree)", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                     const OperatorSession&) {
        const std::string id = req.matches[1];
        PlanTree t = orch.tree(id);
        send_json(res, 200, {{"run_id", id}, {"version", t.version()}, {"tree", t.to_json()}});
    }));

    svr.Post(R"(/runs/([^/]+)/stop)", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                      const OperatorSession& s) {
        orch.stop(req.matches[1], s.session_id);
        send_json(res, 202, {{"run_id", std::string(req.matches[1])}, {"stop_requested", true}});
    }));

    svr.Post(R"(/runs/([^/]+)/plan-edits)", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                            const OperatorSession& s) {
        auto body = body_json(req);
        PlanRevision r;
        r.base_version = body.value("base_version", std::uint64_t{0});
        r.rationale = body.value("rationale", std::string("operator edit"));
        if (body.contains("edits"))
            for (const auto& e : body["edits"])
                r.description_edits.emplace_back(e.at("node_id").get<std::string>(),
                                                 e.at("description").get<std::string>());
        r.affected_siblings = body.value("cancel", std::vector<std::string>{});
        const auto version = orch.modify_plan(req.matches[1], r, s.session_id);
        send_json(res, 200, {{"run_id", std::string(req.matches[1])}, {"version", version}});
    }));

    svr.Get("/approvals/pending", guarded([&orch](const httplib::Request&, httplib::Response& res,
                                                  const OperatorSession&) {
        send_json(res, 200, orch.approvals().pending());
    }));

    svr.Post(R"(/approvals/([^/]+)/decision)", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                               const OperatorSession& s) {
        auto body = body_json(req);
        const std::string decision = body.at("decision").get<std::string>();
        if (decision != "Approved" && decision != "Denied")
            throw Error(ErrorCode::ParseError, "decision must be Approved or Denied");
        orch.approvals().decide(req.matches[1], decision == "Approved", s.session_id);
        send_json(res, 200, {{"request_id", std::string(req.matches[1])}, {"decision", decision}});
    }));

    svr.Post("/kill-switch", guarded([&orch](const httplib::Request&, httplib::Response& res,
                                             const OperatorSession& s) {
        orch.kill(s.session_id);
        send_json(res, 200, {{"active", true}});
    }));

    svr.Get(R"(/metrics/([^/]+))", guarded([&orch](const httplib::Request& req, httplib::Response& res,
                                                   const OperatorSession&) {
        send_json(res, 200, orch.metrics(req.matches[1]));
    }));

    svr.Get("/events", guarded([this, &orch](const httplib::Request& req, httplib::Response& res,
                                             const OperatorSession&) {
        std::uint64_t cursor = 0;
        if (req.has_param("since")) cursor = std::stoull(req.get_param_value("since"));
        else if (req.has_header("Last-Event-ID")) cursor = std::stoull(req.get_header_value("Last-Event-ID"));
        std::optional<std::string> run;
        if (req.has_param("run_id")) run = req.get_param_value("run_id");
        const bool follow = !req.has_param("follow") || req.get_param_value("follow") != "0";
        res.set_header("Cache-Control", "no-cache");
        auto position = std::make_shared<std::uint64_t>(cursor);
        res.set_chunked_content_provider(
            "text/event-stream", [this, &orch, position, run, follow](std::size_t, httplib::DataSink& sink) {
                auto batch = orch.events().since(*position, std::nullopt, 512);
                for (const auto& e : batch) {
                    *position = e.cursor;
                    if (run && e.run_id != *run) continue;
                    std::string frame = "id: " + std::to_string(e.cursor) + "\nevent: " + e.kind +
                                        "\ndata: " + nlohmann::json(e).dump() + "\n\n";
                    if (!sink.write(frame.data(), frame.size())) return false;
                }
                if (batch.empty()) {
                    if (!follow || stopping_) {
                        sink.done();
                        return true;
                    }
                    orch.events().wait(*position, options_.event_poll);
                    if (!sink.is_writable()) return false;
                }
                return true;
            });
    }));
}

ServiceServer::~ServiceServer() { stop(); }

int ServiceServer::start() {
    auto& svr = impl_->server;
    port_ = options_.port == 0 ? svr.bind_to_any_port(options_.host) : options_.port;
    if (options_.port != 0 && !svr.bind_to_port(options_.host, options_.port))
        throw Error(ErrorCode::ConfigError, "cannot bind " + options_.host + ":" + std::to_string(options_.port));
    if (port_ <= 0) throw Error(ErrorCode::ConfigError, "cannot bind " + options_.host);
    thread_ = std::thread([&svr] { svr.listen_after_bind(); });
    return port_;
}

void ServiceServer::serve_forever() {
    if (!thread_.joinable()) start();
    thread_.join();
}

void ServiceServer::stop() {
    stopping_ = true;
    impl_->server.stop();
    if (thread_.joinable()) thread_.join();
}

}  // namespace redteam
