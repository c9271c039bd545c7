#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "netlens/bytes.hpp"
#include "netlens/packet.hpp"
#include "support/reference.hpp"

using namespace netlens;
using namespace netlens::testing;

namespace {

// 60-byte SYN as the Linux stack emits it on loopback (MSS, SACK-perm,
// timestamps, NOP, window scale). Checksums were computed by an independent
// implementation when the fixture was generated.
const char* kLoopbackSyn60 =
    "4500003c9a3b40004006a27e7f0000017f000001a9f81f901f2e3d4c00000000a002ffd707bb"
    "00000204ffd70402080a001122330000000001030307";

Ipv4Packet random_packet(std::mt19937& rng) {
    std::uniform_int_distribution<int> byte(0, 255);
    std::uniform_int_distribution<int> opt_words(0, 10);
    std::uniform_int_distribution<int> payload_len(0, 1200);

    Ipv4Packet p;
    p.dscp_ecn = static_cast<uint8_t>(byte(rng));
    p.identification = static_cast<uint16_t>(byte(rng) << 8 | byte(rng));
    p.flags_fragment = static_cast<uint16_t>((byte(rng) << 8 | byte(rng)) & 0x5fff);
    p.ttl = static_cast<uint8_t>(byte(rng));
    p.protocol = static_cast<uint8_t>(byte(rng));
    p.src_addr = Ipv4Addr(static_cast<uint32_t>(rng()));
    p.dst_addr = Ipv4Addr(static_cast<uint32_t>(rng()));
    p.options.resize(static_cast<size_t>(opt_words(rng)) * 4);
    for (auto& b : p.options) b = static_cast<uint8_t>(byte(rng));
    p.payload.resize(static_cast<size_t>(payload_len(rng)));
    for (auto& b : p.payload) b = static_cast<uint8_t>(byte(rng));
    p.header_length = static_cast<uint8_t>(20 + p.options.size());
    p.total_length = static_cast<uint16_t>(p.header_length + p.payload.size());
    return p;
}

}  // namespace

TEST_CASE("internet checksum matches the reference summation") {
    // Fixed vector, checked against the independent oracle.
    const std::vector<uint8_t> v{0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7};
    CHECK(internet_checksum(v) == 0x220d);
    CHECK(reference_checksum(v) == 0x220d);

    CHECK(internet_checksum({}) == 0xffff);

    std::mt19937 rng(7);
    std::uniform_int_distribution<int> len_dist(0, 300);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int i = 0; i < 1000; ++i) {
        std::vector<uint8_t> buf(static_cast<size_t>(len_dist(rng)));
        for (auto& b : buf) b = static_cast<uint8_t>(byte(rng));
        CAPTURE(i);
        CHECK(internet_checksum(buf) == reference_checksum(buf));
    }
}

TEST_CASE("checksum self-verifies to zero when appended") {
    std::mt19937 rng(11);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int i = 0; i < 50; ++i) {
        std::vector<uint8_t> buf(64);
        for (auto& b : buf) b = static_cast<uint8_t>(byte(rng));
        const uint16_t sum = internet_checksum(buf);
        buf.push_back(static_cast<uint8_t>(sum >> 8));
        buf.push_back(static_cast<uint8_t>(sum & 0xff));
        CHECK(internet_checksum(buf) == 0);
    }
}

TEST_CASE("minimal 20-byte header parses") {
    Ipv4Packet p;
    p.protocol = 6;
    p.total_length = 20;
    const auto bytes = serialize_ipv4(p);
    REQUIRE(bytes.size() == 20);

    const auto parsed = parse_ipv4(bytes);
    CHECK(parsed.header_length == 20);
    CHECK(parsed.payload.empty());
    CHECK(parsed.protocol == 6);
    CHECK(parsed.checksum_valid);
}

TEST_CASE("loopback SYN fixture decodes like the reference decoder") {
    const auto raw = from_hex(kLoopbackSyn60);
    REQUIRE(raw.size() == 60);

    const auto ref_ip = reference_decode_ipv4(raw);
    const auto pkt = parse_ipv4(raw);
    CHECK(pkt.version == ref_ip.version);
    CHECK(pkt.header_length == ref_ip.header_len);
    CHECK(pkt.total_length == ref_ip.total_len);
    CHECK(pkt.ttl == ref_ip.ttl);
    CHECK(pkt.protocol == ref_ip.protocol);
    CHECK(pkt.src_addr.value == ref_ip.src);
    CHECK(pkt.dst_addr.value == ref_ip.dst);
    CHECK(pkt.header_checksum == ref_ip.checksum);
    CHECK(pkt.checksum_valid);

    const auto ref_tcp = reference_decode_tcp(pkt.payload);
    const auto seg = parse_tcp(pkt);
    CHECK(seg.src_port == ref_tcp.src_port);
    CHECK(seg.dst_port == ref_tcp.dst_port);
    CHECK(seg.seq == ref_tcp.seq);
    CHECK(seg.ack == ref_tcp.ack);
    CHECK(seg.flags == (ref_tcp.flags & 0x3f));
    CHECK(seg.syn());
    CHECK_FALSE(seg.ack_set());
    CHECK(seg.window == ref_tcp.window);
    CHECK(seg.data_offset_bytes() == ref_tcp.data_offset);
    REQUIRE(seg.mss_option().has_value());
    REQUIRE(ref_tcp.mss.has_value());
    CHECK(*seg.mss_option() == *ref_tcp.mss);
    CHECK(seg.checksum_valid);

    // Round trip reproduces the capture bit for bit.
    CHECK(serialize_ipv4(pkt) == raw);
}

TEST_CASE("serializer owns the header checksum") {
    const auto raw = from_hex(kLoopbackSyn60);
    auto pkt = parse_ipv4(raw);
    pkt.header_checksum = 0xdead;  // garbage in the parsed struct
    const auto out = serialize_ipv4(pkt);
    CHECK(out == raw);  // correct checksum recomputed
    CHECK(parse_ipv4(out).checksum_valid);
}

TEST_CASE("random packet population round-trips") {
    std::mt19937 rng(42);
    for (int i = 0; i < 1000; ++i) {
        const auto p = random_packet(rng);
        const auto bytes = serialize_ipv4(p);
        const auto q = parse_ipv4(bytes);
        CAPTURE(i);
        CHECK(q.checksum_valid);
        CHECK(q.dscp_ecn == p.dscp_ecn);
        CHECK(q.identification == p.identification);
        CHECK(q.flags_fragment == p.flags_fragment);
        CHECK(q.ttl == p.ttl);
        CHECK(q.protocol == p.protocol);
        CHECK(q.src_addr == p.src_addr);
        CHECK(q.dst_addr == p.dst_addr);
        CHECK(q.options == p.options);
        CHECK(q.payload == p.payload);
        CHECK(serialize_ipv4(q) == bytes);  // parse∘serialize = identity
    }
}

TEST_CASE("parse errors") {
    std::vector<uint8_t> tiny(12, 0);
    CHECK_THROWS_AS(parse_ipv4(tiny), PacketError);

    auto raw = from_hex(kLoopbackSyn60);
    raw[0] = 0x65;  // version 6
    CHECK_THROWS_AS(parse_ipv4(raw), PacketError);

    raw = from_hex(kLoopbackSyn60);
    raw.resize(40);  // shorter than the declared total length
    CHECK_THROWS_AS(parse_ipv4(raw), PacketError);
}

TEST_CASE("bad checksum is a flag, not a failure") {
    auto raw = from_hex(kLoopbackSyn60);
    raw[11] ^= 0x01;  // corrupt IP header checksum
    const auto pkt = parse_ipv4(raw);
    CHECK_FALSE(pkt.checksum_valid);

    // Flip one bit in the TCP payload region: TCP checksum breaks.
    raw = from_hex(kLoopbackSyn60);
    raw[45] ^= 0x40;
    const auto pkt2 = parse_ipv4(raw);
    CHECK(pkt2.checksum_valid);  // IP header untouched
    const auto seg = parse_tcp(pkt2);
    CHECK_FALSE(seg.checksum_valid);
}

TEST_CASE("SYN with MSS 1460 decodes") {
    TcpSegment syn;
    syn.src_port = 43512;
    syn.dst_port = 443;
    syn.seq = 1000;
    syn.flags = tcp_flags::kSyn;
    syn.window = 65535;
    syn.options = TcpSegment::make_mss_option(1460);

    const auto pkt = make_tcp_packet(Ipv4Addr(10, 0, 0, 2), Ipv4Addr(31, 13, 79, 251), syn);
    const auto seg = parse_tcp(pkt);
    CHECK(seg.flags == tcp_flags::kSyn);
    REQUIRE(seg.mss_option().has_value());
    CHECK(*seg.mss_option() == 1460);
    CHECK(seg.checksum_valid);
}

TEST_CASE("UDP length arithmetic and checksum") {
    UdpDatagram d;
    d.src_port = 5353;
    d.dst_port = 53;
    d.payload.assign(12, 0xab);

    const auto pkt = make_udp_packet(Ipv4Addr(10, 0, 0, 2), Ipv4Addr(8, 8, 8, 8), d);
    const auto parsed = parse_udp(pkt);
    CHECK(parsed.length == 20);
    CHECK(parsed.payload.size() == 12);
    CHECK(parsed.checksum_valid);

    // One flipped payload bit must trip the checksum flag.
    auto raw = serialize_ipv4(pkt);
    raw.back() ^= 0x10;
    const auto reparsed = parse_udp(parse_ipv4(raw));
    CHECK_FALSE(reparsed.checksum_valid);
}

TEST_CASE("flow keys") {
    TcpSegment syn;
    syn.src_port = 43512;
    syn.dst_port = 443;
    syn.flags = tcp_flags::kSyn;
    const auto pkt = make_tcp_packet(Ipv4Addr(10, 0, 0, 2), Ipv4Addr(31, 13, 79, 251), syn);

    const auto key = flow_key_of(pkt);
    CHECK(key.proto == Proto::Tcp);
    CHECK(key.src == Ipv4Addr(10, 0, 0, 2));
    CHECK(key.src_port == 43512);
    CHECK(key.dst == Ipv4Addr(31, 13, 79, 251));
    CHECK(key.dst_port == 443);

    // Reverse-direction packet yields the reversed key, not the same one.
    TcpSegment rev;
    rev.src_port = 443;
    rev.dst_port = 43512;
    rev.flags = tcp_flags::kSyn | tcp_flags::kAck;
    const auto rpkt = make_tcp_packet(Ipv4Addr(31, 13, 79, 251), Ipv4Addr(10, 0, 0, 2), rev);
    CHECK(flow_key_of(rpkt) == key.reversed());
    CHECK(flow_key_of(rpkt) != key);

    UdpDatagram q;
    q.src_port = 40000;
    q.dst_port = 53;
    const auto upkt = make_udp_packet(Ipv4Addr(10, 0, 0, 2), Ipv4Addr(8, 8, 8, 8), q);
    const auto ukey = flow_key_of(upkt);
    CHECK(ukey.proto == Proto::Udp);
    CHECK(ukey.dst == Ipv4Addr(8, 8, 8, 8));
    CHECK(ukey.dst_port == 53);

    Ipv4Packet icmp;
    icmp.protocol = 1;
    icmp.payload.resize(8);
    icmp.total_length = 28;
    CHECK_THROWS_AS(flow_key_of(icmp), PacketError);
}

TEST_CASE("field overflow rejected") {
    Ipv4Packet p;
    p.payload.resize(70000);
    CHECK_THROWS_AS(serialize_ipv4(p), PacketError);
}

TEST_CASE("sequence comparison wraps") {
    CHECK(seq_lt(1, 2));
    CHECK_FALSE(seq_lt(2, 1));
    CHECK(seq_lt(0xfffffff0u, 5));  // wrapped
    CHECK_FALSE(seq_lt(5, 0xfffffff0u));
    CHECK(seq_le(7, 7));
}

TEST_CASE("address parsing round-trips") {
    CHECK(Ipv4Addr::parse("31.13.79.251").to_string() == "31.13.79.251");
    CHECK(Ipv4Addr::parse("8.8.8.8") == Ipv4Addr(8, 8, 8, 8));
    CHECK_THROWS_AS(Ipv4Addr::parse("1.2.3"), std::invalid_argument);
    CHECK_THROWS_AS(Ipv4Addr::parse("256.1.1.1"), std::invalid_argument);
}
