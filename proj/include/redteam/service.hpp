#pragma once

#include <atomic>
#include <chrono>
#include <memory>
#include <string>
#include <thread>

#include "redteam/error.hpp"
#include "redteam/orchestrator.hpp"

namespace redteam {

/// HTTP front door over an Orchestrator.
///
///   GET  /version                       {"api": "rtl-service/1"}
///   POST /sessions                      {"principal","password"} -> session
///   POST /runs                          {"task","config"} -> {"run_id","state"}
///   GET  /runs                          [descriptor]
///   GET  /runs/{id}                     descriptor
///   GET  /runs/{id}/tree                {"run_id","version","tree"}
///   POST /runs/{id}/stop
///   POST /runs/{id}/plan-edits          {"base_version","edits":[{"node_id","description"}],"cancel":[id]}
///   GET  /approvals/pending             [request]
///   POST /approvals/{id}/decision       {"decision": "Approved"|"Denied"}
///   POST /kill-switch
///   GET  /metrics/{run_id}
///   GET  /events?since=N&run_id=R&follow=0|1   text/event-stream
///
/// Every call except /version and /sessions carries "Authorization: Bearer <session_id>".
/// Errors come back as {"error": <code>, "message": <text>}.
class ServiceServer {
public:
    static constexpr std::string_view kApiVersion = "rtl-service/1";

    struct Options {
        std::string host = "127.0.0.1";
        int port = 0;  // 0: pick a free port
        std::chrono::milliseconds event_poll{250};
    };

    ServiceServer(Orchestrator& orchestrator, Options options);
    explicit ServiceServer(Orchestrator& orchestrator) : ServiceServer(orchestrator, Options{}) {}
    ~ServiceServer();
    ServiceServer(const ServiceServer&) = delete;
    ServiceServer& operator=(const ServiceServer&) = delete;

    /// Binds and serves on a background thread. Returns the bound port.
    int start();
    /// Blocks serving on the calling thread.
    void serve_forever();
    void stop();

    [[nodiscard]] int port() const noexcept { return port_; }

    /// HTTP status for a library error code.
    static int status_for(ErrorCode code) noexcept;

private:
    struct Impl;
    Orchestrator& orchestrator_;
    Options options_;
    std::unique_ptr<Impl> impl_;
    std::thread thread_;
    std::atomic<bool> stopping_{false};
    int port_ = 0;
};

}  // namespace redteam
