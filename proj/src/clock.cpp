#include "netlens/clock.hpp"

#include <ctime>

namespace netlens {

namespace {

uint64_t read_clock(clockid_t id) {
    timespec ts{};
    clock_gettime(id, &ts);
    return static_cast<uint64_t>(ts.tv_sec) * kSecond + static_cast<uint64_t>(ts.tv_nsec);
}

}  // namespace

uint64_t MonotonicClock::now_ns() const { return read_clock(CLOCK_MONOTONIC); }
uint64_t MonotonicClock::wall_ns() const { return read_clock(CLOCK_REALTIME); }

}  // namespace netlens
