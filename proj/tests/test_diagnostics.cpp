#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "netlens/diagnostics.hpp"
#include "support/reference.hpp"

using namespace netlens;
using namespace netlens::testing;

namespace {

FlowKey dns_key() {
    return FlowKey{Proto::Udp, Ipv4Addr(10, 0, 0, 2), 40123, Ipv4Addr(8, 8, 8, 8), 53};
}

}  // namespace

TEST_CASE("misconfigured answer is detected") {
    const auto msg = DnsBuilder()
                         .question("hkminorshort.weixin.qq.com")
                         .answer_a("hkminorshort.weixin.qq.com", 0x01010101)
                         .build();
    const auto summary = inspect_dns(msg);
    REQUIRE(summary.valid);
    CHECK(summary.query_name == "hkminorshort.weixin.qq.com");
    REQUIRE(summary.answer_addresses.size() == 1);
    CHECK(summary.answer_addresses[0] == Ipv4Addr(1, 1, 1, 1));

    const auto record = flag_misconfig(summary, default_bogus_set(), dns_key(), "wechat", 42);
    REQUIRE(record.has_value());
    CHECK(record->cls == FailureClass::DnsMisconfig);
    CHECK(record->app == "wechat");
    CHECK(record->evidence.find("hkminorshort.weixin.qq.com") != std::string::npos);
    CHECK(record->evidence.find("1.1.1.1") != std::string::npos);
}

TEST_CASE("legitimate answers produce no record") {
    const auto msg = DnsBuilder()
                         .question("www.facebook.com")
                         .answer_a("www.facebook.com", Ipv4Addr(31, 13, 79, 251).value)
                         .build();
    const auto summary = inspect_dns(msg);
    REQUIRE(summary.valid);
    CHECK_FALSE(flag_misconfig(summary, default_bogus_set(), dns_key(), "facebook", 0).has_value());
}

TEST_CASE("NXDOMAIN passes the rcode through with no answers") {
    const auto msg = DnsBuilder().question("nope.example").rcode(3).build();
    const auto summary = inspect_dns(msg);
    REQUIRE(summary.valid);
    CHECK(summary.response_code == 3);
    CHECK(summary.answer_addresses.empty());
    CHECK_FALSE(flag_misconfig(summary, default_bogus_set(), dns_key(), "x", 0).has_value());
}

TEST_CASE("compressed names decode like the reference builder wrote them") {
    // Question at offset 12; answers point back at it.
    const auto msg = DnsBuilder()
                         .question("cdn.weixin.qq.com")
                         .answer_a("", 0x01010101, /*name_ptr=*/12)
                         .answer_a("", 0x08080808, /*name_ptr=*/12)
                         .build();
    const auto summary = inspect_dns(msg);
    REQUIRE(summary.valid);
    CHECK(summary.query_name == "cdn.weixin.qq.com");
    REQUIRE(summary.answer_addresses.size() == 2);
    CHECK(summary.answer_addresses[0] == Ipv4Addr(1, 1, 1, 1));
    CHECK(summary.answer_addresses[1] == Ipv4Addr(8, 8, 8, 8));
}

TEST_CASE("non-A records are skipped by length") {
    const auto msg = DnsBuilder()
                         .question("mixed.example")
                         .answer_raw("mixed.example", 5, 1, {3, 'f', 'o', 'o', 0})  // CNAME-ish
                         .answer_a("mixed.example", 0x7f000001)
                         .build();
    const auto summary = inspect_dns(msg);
    REQUIRE(summary.valid);
    REQUIRE(summary.answer_addresses.size() == 1);
    CHECK(summary.answer_addresses[0] == Ipv4Addr(127, 0, 0, 1));
}

TEST_CASE("malformed messages yield an invalid summary, never a crash") {
    CHECK_FALSE(inspect_dns({}).valid);

    std::vector<uint8_t> tiny(8, 0);
    CHECK_FALSE(inspect_dns(tiny).valid);

    // Pointer loop: name at 12 points to itself.
    std::vector<uint8_t> loop = DnsBuilder().question("x.example").build();
    loop[12] = 0xc0;
    loop[13] = 12;
    CHECK_FALSE(inspect_dns(loop).valid);

    // Truncated answer section.
    auto truncated = DnsBuilder().question("y.example").answer_a("y.example", 1).build();
    truncated.resize(truncated.size() - 3);
    CHECK_FALSE(inspect_dns(truncated).valid);

    // Label runs past the end.
    std::vector<uint8_t> overrun = {0, 1, 0x81, 0x80, 0, 1, 0, 0, 0, 0, 0, 0, 63, 'a'};
    CHECK_FALSE(inspect_dns(overrun).valid);
}

TEST_CASE("failure classification") {
    const uint64_t timeout = 3000 * kMillisecond;
    CHECK(classify_failure(ConnectOutcome::Timeout, 3000 * kMillisecond, timeout) ==
          FailureClass::Timeout);
    CHECK(classify_failure(ConnectOutcome::Refused, 2 * kMillisecond, timeout) ==
          FailureClass::Refused);
    CHECK(classify_failure(ConnectOutcome::Unreachable, 5 * kMillisecond, timeout) ==
          FailureClass::Unreachable);
    CHECK(classify_failure(ConnectOutcome::Canceled, 10 * kMillisecond, timeout) ==
          FailureClass::Canceled);
    // Elapsed at or past the limit is a timeout regardless of the raw outcome.
    CHECK(classify_failure(ConnectOutcome::Refused, timeout, timeout) == FailureClass::Timeout);
}

TEST_CASE("bogus set is configuration, not hardcoded") {
    const auto msg = DnsBuilder().question("z.example").answer_a("z.example", 0x01010101).build();
    const auto summary = inspect_dns(msg);
    const std::set<Ipv4Addr> other_bogus = {Ipv4Addr(9, 9, 9, 9)};
    CHECK_FALSE(flag_misconfig(summary, other_bogus, dns_key(), "z", 0).has_value());
}
