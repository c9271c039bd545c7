#include "netlens/rtt.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace netlens {

const char* outcome_name(ConnectOutcome o) {
    switch (o) {
        case ConnectOutcome::Success: return "success";
        case ConnectOutcome::Timeout: return "timeout";
        case ConnectOutcome::Refused: return "refused";
        case ConnectOutcome::Unreachable: return "unreachable";
        case ConnectOutcome::Canceled: return "canceled";
    }
    return "?";
}

double round_display_ms(uint64_t rtt_ns) {
    const double half_steps = static_cast<double>(rtt_ns) / 500000.0;  // 0.5 ms units
    return std::round(half_steps) * 0.5;
}

std::string format_half_ms(double half_ms) {
    char buf[32];
    if (half_ms == static_cast<double>(static_cast<long long>(half_ms))) {
        std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(half_ms));
    } else {
        std::snprintf(buf, sizeof(buf), "%.1f", half_ms);
    }
    return buf;
}

uint64_t quantize_ms_delta_ns(uint64_t t_start_ns, uint64_t t_end_ns) {
    const uint64_t start_ms = t_start_ns / kMillisecond;
    const uint64_t end_ms = t_end_ns / kMillisecond;
    return (end_ms - start_ms) * kMillisecond;
}

namespace {

struct ScopedFd {
    int fd = -1;
    ~ScopedFd() {
        if (fd >= 0) ::close(fd);
    }
};

ConnectOutcome outcome_from_errno(int err) {
    switch (err) {
        case ECONNREFUSED: return ConnectOutcome::Refused;
        case EHOSTUNREACH:
        case ENETUNREACH: return ConnectOutcome::Unreachable;
        case ETIMEDOUT: return ConnectOutcome::Timeout;
        default: return ConnectOutcome::Unreachable;
    }
}

sockaddr_in make_sockaddr(Ipv4Addr dst, uint16_t port) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr.s_addr = htonl(dst.value);
    return sa;
}

// Nonblocking connect with readiness wait. Returns the outcome; the caller
// owns the timestamps around this call.
ConnectOutcome run_connect(int fd, Ipv4Addr dst, uint16_t port, uint64_t timeout_ns) {
    const sockaddr_in sa = make_sockaddr(dst, port);
    int rc = ::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa));
    if (rc == 0) return ConnectOutcome::Success;
    if (errno != EINPROGRESS) return outcome_from_errno(errno);

    pollfd pfd{fd, POLLOUT, 0};
    const int timeout_ms = static_cast<int>(timeout_ns / kMillisecond);
    rc = ::poll(&pfd, 1, timeout_ms);
    if (rc == 0) return ConnectOutcome::Timeout;
    if (rc < 0) return ConnectOutcome::Unreachable;

    int err = 0;
    socklen_t len = sizeof(err);
    getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    return err == 0 ? ConnectOutcome::Success : outcome_from_errno(err);
}

}  // namespace

RttSample time_connect_socket(Ipv4Addr dst, uint16_t port, uint64_t timeout_ns,
                              const Clock& clock) {
    ScopedFd sock{::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0)};
    if (sock.fd < 0) {
        RttSample s;
        s.outcome = ConnectOutcome::Unreachable;
        s.wall_ns = clock.wall_ns();
        return s;
    }

    const uint64_t t_start = clock.now_ns();
    const ConnectOutcome outcome = run_connect(sock.fd, dst, port, timeout_ns);
    const uint64_t t_end = clock.now_ns();

    if (t_end < t_start) throw std::runtime_error("monotonic clock regressed");

    RttSample s;
    s.key = FlowKey{Proto::Tcp, Ipv4Addr{}, 0, dst, port};
    s.t_start_ns = t_start;
    s.t_end_ns = t_end;
    s.rtt_ns = t_end - t_start;
    s.outcome = outcome;
    s.wall_ns = clock.wall_ns();
    return s;
}

RttSample baseline_coarse_connect_socket(Ipv4Addr dst, uint16_t port, uint64_t timeout_ns,
                                         const Clock& clock, uint64_t prework_ns) {
    ScopedFd sock{::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0)};

    // Degradation (2): the clock starts before the pre-connect work.
    const uint64_t t_start = clock.now_ns();

    // Degradation (1): connection-manager style setup inside the window.
    const uint64_t work_until = t_start + prework_ns;
    while (clock.now_ns() < work_until) {
        int opt = 1;
        setsockopt(sock.fd, SOL_SOCKET, SO_KEEPALIVE, &opt, sizeof(opt));
    }

    ConnectOutcome outcome = ConnectOutcome::Unreachable;
    if (sock.fd >= 0) outcome = run_connect(sock.fd, dst, port, timeout_ns);
    const uint64_t t_end = clock.now_ns();

    RttSample s;
    s.key = FlowKey{Proto::Tcp, Ipv4Addr{}, 0, dst, port};
    s.t_start_ns = t_start;
    s.t_end_ns = t_end;
    // Degradation (3): millisecond-quantized timestamps.
    s.rtt_ns = quantize_ms_delta_ns(t_start, t_end);
    s.outcome = outcome;
    s.wall_ns = clock.wall_ns();
    return s;
}

std::vector<ComparisonRow> compare_accuracy(const std::vector<CompareDestination>& dsts, int runs,
                                            const MeterFn& meter) {
    std::vector<ComparisonRow> rows;
    rows.reserve(dsts.size());
    for (const auto& dst : dsts) {
        double sum_ms = 0;
        int counted = 0;
        for (int i = 0; i < runs; ++i) {
            const RttSample s = meter(dst);
            if (s.outcome == ConnectOutcome::Success) {
                sum_ms += static_cast<double>(s.rtt_ns) / 1e6;
                ++counted;
            }
        }
        ComparisonRow row;
        row.destination = dst.label;
        row.reference_ms = dst.reference_ms;
        row.meter_ms = counted > 0 ? sum_ms / counted : 0.0;
        row.delta_ms = std::abs(row.meter_ms - row.reference_ms);
        row.runs = counted;
        rows.push_back(row);
    }
    return rows;
}

std::string comparison_csv(const std::vector<ComparisonRow>& rows) {
    std::string out = "destination,reference_ms,meter_ms,delta_ms,runs\n";
    char line[256];
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%s,%.3f,%.3f,%.3f,%d\n", r.destination.c_str(),
                      r.reference_ms, r.meter_ms, r.delta_ms, r.runs);
        out += line;
    }
    return out;
}

std::string comparison_table(const std::vector<ComparisonRow>& rows) {
    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-24s %12s %12s %10s %6s\n", "destination", "reference_ms",
                  "meter_ms", "delta_ms", "runs");
    out += line;
    for (const auto& r : rows) {
        std::snprintf(line, sizeof(line), "%-24s %12.3f %12.3f %10.3f %6d\n",
                      r.destination.c_str(), r.reference_ms, r.meter_ms, r.delta_ms, r.runs);
        out += line;
    }
    return out;
}

}  // namespace netlens
