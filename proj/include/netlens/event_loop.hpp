#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <unordered_map>
#include <vector>

#include "netlens/clock.hpp"

namespace netlens {

using TimerId = uint64_t;

// Single-threaded timer + fd dispatcher. Under a VirtualClock the loop jumps
// straight to the next timer deadline, so runs are deterministic and instant.
// Under a real clock it sleeps in ppoll() with nanosecond-resolution timeouts
// and additionally dispatches fd readiness (sockets, tunnel device).
//
// Ordering is strict: tasks and timers fire in (deadline, creation order).
// Handlers may schedule, cancel, and watch/unwatch freely from within
// callbacks.
class EventLoop {
public:
    using FdHandler = std::function<void(short revents)>;

    explicit EventLoop(Clock& clock);
    ~EventLoop();

    EventLoop(const EventLoop&) = delete;
    EventLoop& operator=(const EventLoop&) = delete;

    Clock& clock() { return clock_; }
    uint64_t now_ns() const { return clock_.now_ns(); }

    TimerId schedule_at(uint64_t deadline_ns, std::function<void()> fn);
    TimerId schedule_after(uint64_t delay_ns, std::function<void()> fn);
    void cancel_timer(TimerId id);

    // Runs fn on the next loop iteration, before due timers.
    void post(std::function<void()> fn);

    // fd watching is rejected under a virtual clock (nothing real to poll).
    void watch_fd(int fd, short events, FdHandler handler);
    void modify_fd(int fd, short events);
    void unwatch_fd(int fd);

    // Processes one batch of work. Returns false when there is nothing left
    // (no tasks, no timers, no watched fds) or the loop was stopped.
    bool run_one();

    // Runs until stopped or idle.
    void run();

    // Runs until `pred` holds, the loop goes idle, or stop() is called.
    void run_until(const std::function<bool()>& pred);

    // Advances through `duration_ns` of clock time, processing everything
    // due in between. Virtual: ends exactly at now+duration.
    void run_for(uint64_t duration_ns);

    void stop() { stopped_ = true; }
    void clear_stop() { stopped_ = false; }
    bool stopped() const { return stopped_; }

    size_t pending_timers() const { return timers_.size(); }

private:
    bool run_one_virtual(uint64_t limit_ns, bool has_limit);
    bool run_one_real(uint64_t limit_ns, bool has_limit);
    void fire_due_timers();
    bool drain_posted();

    Clock& clock_;
    bool stopped_ = false;
    uint64_t next_timer_id_ = 1;
    std::map<std::pair<uint64_t, TimerId>, std::function<void()>> timers_;
    std::unordered_map<TimerId, uint64_t> timer_deadlines_;
    std::deque<std::function<void()>> posted_;

    struct FdEntry {
        short events;
        FdHandler handler;
        uint64_t generation;
    };
    std::unordered_map<int, FdEntry> fds_;
    uint64_t fd_generation_ = 0;
    bool fds_dirty_ = false;
};

}  // namespace netlens
