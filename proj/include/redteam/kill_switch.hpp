#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>

namespace redteam {

/// Platform-wide halt flag. Once activated it stays active for the lifetime
/// of the platform; waiters are woken immediately.
class KillSwitch {
public:
    [[nodiscard]] bool active() const noexcept { return active_.load(std::memory_order_acquire); }

    /// Returns false if it was already active.
    bool activate();

    /// Interruptible sleep; returns true when the switch fired before `duration` elapsed.
    bool wait_for(std::chrono::milliseconds duration) const;

    using ListenerId = std::uint64_t;
    /// Callback fires once on activation (or immediately if already active).
    ListenerId on_activate(std::function<void()> callback);
    void remove_listener(ListenerId id);

private:
    std::atomic<bool> active_{false};
    mutable std::mutex mutex_;
    mutable std::condition_variable cv_;
    std::map<ListenerId, std::function<void()>> listeners_;
    ListenerId next_listener_ = 1;
};

}  // namespace redteam
