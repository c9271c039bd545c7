#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "netlens/clock.hpp"
#include "netlens/packet.hpp"

namespace netlens {

enum class ConnectOutcome : uint8_t { Success, Timeout, Refused, Unreachable, Canceled };

const char* outcome_name(ConnectOutcome o);

// One timed connection establishment. rtt_ns is meaningful for every
// outcome (time until failure/timeout), but only SUCCESS samples enter the
// RTT aggregates.
struct RttSample {
    FlowKey key;
    std::string app = "unknown";
    uint64_t t_start_ns = 0;
    uint64_t t_end_ns = 0;
    uint64_t rtt_ns = 0;
    ConnectOutcome outcome = ConnectOutcome::Success;
    std::string network_tag = "unlabeled";
    uint64_t wall_ns = 0;
};

// Display rounding to the nearest half millisecond, ties away from zero.
// Raw nanoseconds are always what gets persisted; this is presentation only.
double round_display_ms(uint64_t rtt_ns);

// "37", "38.5" -- half-steps keep one decimal, whole numbers drop it.
std::string format_half_ms(double half_ms);

// Brackets an asynchronous establishment: arm() immediately before the
// connect is initiated, complete() at readiness. Nothing else belongs
// between those two points.
class ConnectTimer {
public:
    explicit ConnectTimer(const Clock& clock) : clock_(&clock) {}

    void arm() { t_start_ = clock_->now_ns(); }
    bool armed() const { return t_start_ != 0; }
    uint64_t started_at() const { return t_start_; }

    RttSample complete(ConnectOutcome outcome) const {
        const uint64_t t_end = clock_->now_ns();
        if (t_end < t_start_) throw std::runtime_error("monotonic clock regressed");
        RttSample s;
        s.t_start_ns = t_start_;
        s.t_end_ns = t_end;
        s.rtt_ns = t_end - t_start_;
        s.outcome = outcome;
        s.wall_ns = clock_->wall_ns();
        return s;
    }

private:
    const Clock* clock_;
    uint64_t t_start_ = 0;
};

// Times a real connect() against dst. The timed window contains only the
// establishment call and its readiness wait.
RttSample time_connect_socket(Ipv4Addr dst, uint16_t port, uint64_t timeout_ns,
                              const Clock& clock);

// Deliberately degraded meter reproducing the three accuracy-loss factors of
// HTTP-level pinging: (1) connection-manager work inside the timed window,
// (2) timestamps taken before that work begins, (3) millisecond quantization
// of both timestamps.
RttSample baseline_coarse_connect_socket(Ipv4Addr dst, uint16_t port, uint64_t timeout_ns,
                                         const Clock& clock, uint64_t prework_ns);

// Millisecond quantization used by the baseline meter: both endpoints are
// floored to whole milliseconds before subtracting.
uint64_t quantize_ms_delta_ns(uint64_t t_start_ns, uint64_t t_end_ns);

struct ComparisonRow {
    std::string destination;
    double reference_ms = 0;
    double meter_ms = 0;
    double delta_ms = 0;  // |meter - reference|
    int runs = 0;
};

struct CompareDestination {
    std::string label;
    Ipv4Addr addr;
    uint16_t port = 0;
    double reference_ms = 0;  // oracle (sim) or capture-derived
};

using MeterFn = std::function<RttSample(const CompareDestination&)>;

// Mean-of-n meter value per destination against its reference.
std::vector<ComparisonRow> compare_accuracy(const std::vector<CompareDestination>& dsts, int runs,
                                            const MeterFn& meter);

std::string comparison_csv(const std::vector<ComparisonRow>& rows);
std::string comparison_table(const std::vector<ComparisonRow>& rows);

}  // namespace netlens
