#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "netlens/rtt.hpp"

using namespace netlens;

TEST_CASE("display rounding to the nearest half millisecond") {
    CHECK(round_display_ms(4135000) == 4.0);    // 4.135 ms -> 4
    CHECK(round_display_ms(5490000) == 5.5);    // 5.49 ms -> 5.5
    CHECK(round_display_ms(0) == 0.0);
    CHECK(round_display_ms(37000000) == 37.0);
    CHECK(round_display_ms(38500000) == 38.5);
    CHECK(round_display_ms(284500000) == 284.5);
    CHECK(round_display_ms(4250000) == 4.5);  // tie goes away from zero
}

TEST_CASE("rounding stays within a quarter millisecond and lands on half-steps") {
    for (uint64_t ns = 0; ns < 20 * kMillisecond; ns += 12347) {
        const double rounded = round_display_ms(ns);
        const double exact = static_cast<double>(ns) / 1e6;
        CHECK(std::abs(rounded - exact) <= 0.25 + 1e-9);
        const double steps = rounded * 2.0;
        CHECK(steps == static_cast<double>(static_cast<long long>(steps)));
    }
}

TEST_CASE("half-ms formatting") {
    CHECK(format_half_ms(37.0) == "37");
    CHECK(format_half_ms(38.5) == "38.5");
    CHECK(format_half_ms(0.0) == "0");
    CHECK(format_half_ms(284.5) == "284.5");
}

TEST_CASE("millisecond quantization has at most 1 ms error") {
    // Quantized delta vs. exact delta for assorted start phases.
    for (uint64_t start = 0; start < 3 * kMillisecond; start += 97 * kMicrosecond) {
        const uint64_t exact = 4260 * kMicrosecond;  // 4.26 ms
        const uint64_t q = quantize_ms_delta_ns(start, start + exact);
        const int64_t err = static_cast<int64_t>(q) - static_cast<int64_t>(exact);
        CHECK(err > -static_cast<int64_t>(kMillisecond));
        CHECK(err < static_cast<int64_t>(kMillisecond));
    }
}

TEST_CASE("ConnectTimer brackets with a virtual clock exactly") {
    VirtualClock clock;
    ConnectTimer timer(clock);
    timer.arm();
    clock.advance_by(4260 * kMicrosecond);
    const RttSample s = timer.complete(ConnectOutcome::Success);
    CHECK(s.rtt_ns == 4260 * kMicrosecond);
    CHECK(s.t_end_ns - s.t_start_ns == s.rtt_ns);
}

TEST_CASE("time_connect_socket on a loopback listener") {
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    REQUIRE(listener >= 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    REQUIRE(bind(listener, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) == 0);
    REQUIRE(listen(listener, 8) == 0);
    socklen_t len = sizeof(sa);
    getsockname(listener, reinterpret_cast<sockaddr*>(&sa), &len);
    const uint16_t port = ntohs(sa.sin_port);

    MonotonicClock clock;
    const RttSample s = time_connect_socket(Ipv4Addr(127, 0, 0, 1), port, kSecond, clock);
    CHECK(s.outcome == ConnectOutcome::Success);
    CHECK(s.rtt_ns < 5 * kMillisecond);  // loopback with no added delay
    close(listener);
}

TEST_CASE("time_connect_socket classifies refusal") {
    // Port 1 on loopback: nothing listens there in this sandbox.
    MonotonicClock clock;
    const RttSample s = time_connect_socket(Ipv4Addr(127, 0, 0, 1), 1, kSecond, clock);
    CHECK(s.outcome == ConnectOutcome::Refused);
}

TEST_CASE("compare_accuracy aggregates mean per destination") {
    std::vector<CompareDestination> dsts = {
        {"a", Ipv4Addr(10, 0, 0, 1), 80, 10.0},
        {"b", Ipv4Addr(10, 0, 0, 2), 80, 20.0},
    };
    int calls = 0;
    auto meter = [&calls](const CompareDestination& d) {
        RttSample s;
        s.outcome = ConnectOutcome::Success;
        // alternate +1 / -1 ms around the reference: mean == reference
        const double ms = d.reference_ms + ((calls++ % 2) ? 1.0 : -1.0);
        s.rtt_ns = static_cast<uint64_t>(ms * 1e6);
        return s;
    };
    const auto rows = compare_accuracy(dsts, 10, meter);
    REQUIRE(rows.size() == 2);
    for (const auto& row : rows) {
        CHECK(row.runs == 10);
        CHECK(row.delta_ms < 1e-9);
    }

    // Degenerate single run: delta is the single difference.
    calls = 0;
    const auto single = compare_accuracy({dsts[0]}, 1, meter);
    CHECK(single[0].runs == 1);
    CHECK(single[0].delta_ms == doctest::Approx(1.0));
}

TEST_CASE("comparison output formats") {
    std::vector<ComparisonRow> rows = {{"google", 4.26, 4.26, 0.0, 10}};
    const std::string csv = comparison_csv(rows);
    CHECK(csv.find("destination,reference_ms,meter_ms,delta_ms,runs") == 0);
    CHECK(csv.find("google,4.260,4.260,0.000,10") != std::string::npos);
    const std::string table = comparison_table(rows);
    CHECK(table.find("google") != std::string::npos);
}
