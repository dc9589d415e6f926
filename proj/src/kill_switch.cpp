#include "redteam/kill_switch.hpp"

#include <vector>

namespace redteam {

bool KillSwitch::activate() {
    std::vector<std::function<void()>> callbacks;
    {
        std::lock_guard lock(mutex_);
        if (active_.exchange(true, std::memory_order_acq_rel)) return false;
        for (auto& [_, cb] : listeners_) callbacks.push_back(cb);
    }
    cv_.notify_all();
    for (auto& cb : callbacks) cb();
    return true;
}

bool KillSwitch::wait_for(std::chrono::milliseconds duration) const {
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, duration, [this] { return active_.load(std::memory_order_acquire); });
}

KillSwitch::ListenerId KillSwitch::on_activate(std::function<void()> callback) {
    std::unique_lock lock(mutex_);
    if (active_.load(std::memory_order_acquire)) {
        lock.unlock();
        callback();
        return 0;
    }
    const ListenerId id = next_listener_++;
    listeners_.emplace(id, std::move(callback));
    return id;
}

void KillSwitch::remove_listener(ListenerId id) {
    std::lock_guard lock(mutex_);
    listeners_.erase(id);
}

}  // namespace redteam
