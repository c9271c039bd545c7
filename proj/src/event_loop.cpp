#include "netlens/event_loop.hpp"

#include <poll.h>

#include <cerrno>
#include <limits>
#include <stdexcept>

namespace netlens {

EventLoop::EventLoop(Clock& clock) : clock_(clock) {}

EventLoop::~EventLoop() = default;

TimerId EventLoop::schedule_at(uint64_t deadline_ns, std::function<void()> fn) {
    TimerId id = next_timer_id_++;
    timers_.emplace(std::make_pair(deadline_ns, id), std::move(fn));
    timer_deadlines_.emplace(id, deadline_ns);
    return id;
}

TimerId EventLoop::schedule_after(uint64_t delay_ns, std::function<void()> fn) {
    return schedule_at(clock_.now_ns() + delay_ns, std::move(fn));
}

void EventLoop::cancel_timer(TimerId id) {
    auto it = timer_deadlines_.find(id);
    if (it == timer_deadlines_.end()) return;
    timers_.erase(std::make_pair(it->second, id));
    timer_deadlines_.erase(it);
}

void EventLoop::post(std::function<void()> fn) { posted_.push_back(std::move(fn)); }

void EventLoop::watch_fd(int fd, short events, FdHandler handler) {
    if (clock_.is_virtual()) throw std::logic_error("cannot watch fds under a virtual clock");
    fds_[fd] = FdEntry{events, std::move(handler), ++fd_generation_};
    fds_dirty_ = true;
}

void EventLoop::modify_fd(int fd, short events) {
    auto it = fds_.find(fd);
    if (it == fds_.end()) return;
    it->second.events = events;
    fds_dirty_ = true;
}

void EventLoop::unwatch_fd(int fd) {
    fds_.erase(fd);
    fds_dirty_ = true;
}

bool EventLoop::drain_posted() {
    if (posted_.empty()) return false;
    // Tasks posted by tasks run in the same batch, FIFO.
    while (!posted_.empty()) {
        auto fn = std::move(posted_.front());
        posted_.pop_front();
        fn();
        if (stopped_) break;
    }
    return true;
}

void EventLoop::fire_due_timers() {
    const uint64_t now = clock_.now_ns();
    while (!timers_.empty() && !stopped_) {
        auto it = timers_.begin();
        if (it->first.first > now) break;
        auto fn = std::move(it->second);
        timer_deadlines_.erase(it->first.second);
        timers_.erase(it);
        fn();
    }
}

bool EventLoop::run_one_virtual(uint64_t limit_ns, bool has_limit) {
    if (drain_posted()) return true;
    if (timers_.empty()) return false;
    auto it = timers_.begin();
    const uint64_t deadline = it->first.first;
    if (has_limit && deadline > limit_ns) return false;
    auto fn = std::move(it->second);
    timer_deadlines_.erase(it->first.second);
    timers_.erase(it);
    auto& vc = static_cast<VirtualClock&>(clock_);
    if (deadline > vc.now_ns()) vc.advance_to(deadline);
    fn();
    return true;
}

bool EventLoop::run_one_real(uint64_t limit_ns, bool has_limit) {
    if (drain_posted()) return true;

    const uint64_t now = clock_.now_ns();
    bool have_deadline = false;
    uint64_t wake = std::numeric_limits<uint64_t>::max();
    if (!timers_.empty()) {
        wake = timers_.begin()->first.first;
        have_deadline = true;
    }
    if (has_limit && limit_ns < wake) {
        wake = limit_ns;
        have_deadline = true;
    }

    if (!have_deadline && fds_.empty()) return false;

    std::vector<pollfd> pfds;
    std::vector<std::pair<int, uint64_t>> order;  // fd + generation at snapshot
    pfds.reserve(fds_.size());
    for (const auto& [fd, entry] : fds_) {
        pfds.push_back(pollfd{fd, entry.events, 0});
        order.emplace_back(fd, entry.generation);
    }

    timespec ts{};
    timespec* tsp = nullptr;
    if (have_deadline) {
        uint64_t delta = wake > now ? wake - now : 0;
        ts.tv_sec = static_cast<time_t>(delta / kSecond);
        ts.tv_nsec = static_cast<long>(delta % kSecond);
        tsp = &ts;
    }

    int rc = ppoll(pfds.empty() ? nullptr : pfds.data(), pfds.size(), tsp, nullptr);
    if (rc < 0 && errno != EINTR) throw std::runtime_error("ppoll failed");

    fds_dirty_ = false;
    if (rc > 0) {
        for (size_t i = 0; i < pfds.size(); ++i) {
            if (pfds[i].revents == 0) continue;
            // A handler may have unwatched this fd (or the fd number may have
            // been reused by a fresh watch) while we were dispatching.
            auto it = fds_.find(order[i].first);
            if (it == fds_.end() || it->second.generation != order[i].second) continue;
            it->second.handler(pfds[i].revents);
            if (stopped_) break;
        }
    }
    fire_due_timers();
    return true;
}

bool EventLoop::run_one() {
    if (stopped_) return false;
    return clock_.is_virtual() ? run_one_virtual(0, false) : run_one_real(0, false);
}

void EventLoop::run() {
    while (!stopped_ && run_one()) {
    }
}

void EventLoop::run_until(const std::function<bool()>& pred) {
    while (!stopped_ && !pred()) {
        if (!run_one()) break;
    }
}

void EventLoop::run_for(uint64_t duration_ns) {
    const uint64_t limit = clock_.now_ns() + duration_ns;
    if (clock_.is_virtual()) {
        while (!stopped_ && run_one_virtual(limit, true)) {
        }
        auto& vc = static_cast<VirtualClock&>(clock_);
        if (!stopped_ && limit > vc.now_ns()) vc.advance_to(limit);
    } else {
        while (!stopped_ && clock_.now_ns() < limit) {
            run_one_real(limit, true);
        }
    }
}

}  // namespace netlens
