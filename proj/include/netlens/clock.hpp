#pragma once

#include <cstdint>
#include <stdexcept>

namespace netlens {

// Nanosecond duration constants for readable configs.
inline constexpr uint64_t kMicrosecond = 1'000ull;
inline constexpr uint64_t kMillisecond = 1'000'000ull;
inline constexpr uint64_t kSecond = 1'000'000'000ull;

// Time source seen by everything that measures or schedules. now_ns() is
// monotonic; wall_ns() is a calendar timestamp used only for reporting.
class Clock {
public:
    virtual ~Clock() = default;
    virtual uint64_t now_ns() const = 0;
    virtual uint64_t wall_ns() const = 0;
    virtual bool is_virtual() const { return false; }
};

// Real clocks: CLOCK_MONOTONIC for measurement, CLOCK_REALTIME for wall time.
class MonotonicClock final : public Clock {
public:
    uint64_t now_ns() const override;
    uint64_t wall_ns() const override;
};

// Simulated time. Advances only when told to; never on its own. Scenario
// runs under this clock are exactly reproducible.
class VirtualClock final : public Clock {
public:
    explicit VirtualClock(uint64_t wall_base_ns = 0) : wall_base_(wall_base_ns) {}

    uint64_t now_ns() const override { return now_; }
    uint64_t wall_ns() const override { return wall_base_ + now_; }
    bool is_virtual() const override { return true; }

    void advance_to(uint64_t t_ns) {
        if (t_ns < now_) throw std::logic_error("virtual clock cannot move backwards");
        now_ = t_ns;
    }
    void advance_by(uint64_t d_ns) { now_ += d_ns; }

private:
    uint64_t now_ = 0;
    uint64_t wall_base_ = 0;
};

}  // namespace netlens
