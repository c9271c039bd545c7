#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace netlens {

// 32-bit IPv4 address, host byte order.
struct Ipv4Addr {
    uint32_t value = 0;

    constexpr Ipv4Addr() = default;
    constexpr explicit Ipv4Addr(uint32_t v) : value(v) {}
    constexpr Ipv4Addr(uint8_t a, uint8_t b, uint8_t c, uint8_t d)
        : value((uint32_t(a) << 24) | (uint32_t(b) << 16) | (uint32_t(c) << 8) | uint32_t(d)) {}

    auto operator<=>(const Ipv4Addr&) const = default;

    std::string to_string() const;
    static Ipv4Addr parse(const std::string& dotted);  // throws std::invalid_argument
};

enum class Proto : uint8_t { Tcp = 6, Udp = 17 };

inline const char* proto_name(Proto p) { return p == Proto::Tcp ? "tcp" : "udp"; }

// 5-tuple flow identity. Direction-sensitive: for tunnel-origin packets the
// app endpoint is the source.
struct FlowKey {
    Proto proto = Proto::Tcp;
    Ipv4Addr src;
    uint16_t src_port = 0;
    Ipv4Addr dst;
    uint16_t dst_port = 0;

    auto operator<=>(const FlowKey&) const = default;

    FlowKey reversed() const { return FlowKey{proto, dst, dst_port, src, src_port}; }
    std::string to_string() const;
};

struct FlowKeyHash {
    size_t operator()(const FlowKey& k) const noexcept {
        uint64_t h = 0xcbf29ce484222325ull;
        auto mix = [&h](uint64_t v) {
            h ^= v;
            h *= 0x100000001b3ull;
        };
        mix(static_cast<uint64_t>(k.proto));
        mix(k.src.value);
        mix(k.src_port);
        mix(k.dst.value);
        mix(k.dst_port);
        return static_cast<size_t>(h);
    }
};

// Parse/serialize failures that make the bytes unusable. Checksum mismatches
// are *not* errors; they set the checksum_valid flag instead so capture
// replays with offloaded checksums stay readable.
class PacketError : public std::runtime_error {
public:
    enum class Kind {
        TruncatedPacket,
        UnsupportedVersion,
        TruncatedSegment,
        FieldOverflow,
        UnsupportedProtocol,
    };

    PacketError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

struct Ipv4Packet {
    uint8_t version = 4;
    uint8_t header_length = 20;  // bytes, 20..60
    uint8_t dscp_ecn = 0;
    uint16_t total_length = 20;
    uint16_t identification = 0;
    uint16_t flags_fragment = 0;  // flags + fragment offset, raw
    uint8_t ttl = 64;
    uint8_t protocol = 6;
    uint16_t header_checksum = 0;  // as parsed; serializer recomputes
    Ipv4Addr src_addr;
    Ipv4Addr dst_addr;
    std::vector<uint8_t> options;  // preserved opaquely
    std::vector<uint8_t> payload;
    bool checksum_valid = true;

    bool is_tcp() const { return protocol == 6; }
    bool is_udp() const { return protocol == 17; }
};

namespace tcp_flags {
inline constexpr uint8_t kFin = 0x01;
inline constexpr uint8_t kSyn = 0x02;
inline constexpr uint8_t kRst = 0x04;
inline constexpr uint8_t kPsh = 0x08;
inline constexpr uint8_t kAck = 0x10;
inline constexpr uint8_t kUrg = 0x20;
}  // namespace tcp_flags

struct TcpSegment {
    uint16_t src_port = 0;
    uint16_t dst_port = 0;
    uint32_t seq = 0;
    uint32_t ack = 0;
    uint8_t flags = 0;
    uint16_t window = 0;
    uint16_t checksum = 0;
    uint16_t urgent_ptr = 0;
    std::vector<uint8_t> options;  // raw bytes; only MSS is interpreted
    std::vector<uint8_t> payload;
    bool checksum_valid = true;

    bool has(uint8_t flag) const { return (flags & flag) != 0; }
    bool syn() const { return has(tcp_flags::kSyn); }
    bool ack_set() const { return has(tcp_flags::kAck); }
    bool fin() const { return has(tcp_flags::kFin); }
    bool rst() const { return has(tcp_flags::kRst); }

    uint8_t data_offset_bytes() const { return static_cast<uint8_t>(20 + options.size()); }

    // Decoded MSS option, if present and well-formed.
    std::optional<uint16_t> mss_option() const;

    static std::vector<uint8_t> make_mss_option(uint16_t mss);
};

struct UdpDatagram {
    uint16_t src_port = 0;
    uint16_t dst_port = 0;
    uint16_t length = 8;
    uint16_t checksum = 0;
    std::vector<uint8_t> payload;
    bool checksum_valid = true;
};

// RFC 1071 internet checksum: ones'-complement of the ones'-complement
// 16-bit sum, odd trailing byte padded with zero.
uint16_t internet_checksum(std::span<const uint8_t> data);

// Checksum over the TCP/UDP pseudo-header plus transport bytes.
uint16_t transport_checksum(Ipv4Addr src, Ipv4Addr dst, uint8_t protocol,
                            std::span<const uint8_t> transport_bytes);

Ipv4Packet parse_ipv4(std::span<const uint8_t> raw);
std::vector<uint8_t> serialize_ipv4(const Ipv4Packet& pkt);

TcpSegment parse_tcp(const Ipv4Packet& ip);
// Serializes the segment and stamps a correct pseudo-header checksum.
std::vector<uint8_t> serialize_tcp(const TcpSegment& seg, Ipv4Addr src, Ipv4Addr dst);

UdpDatagram parse_udp(const Ipv4Packet& ip);
std::vector<uint8_t> serialize_udp(const UdpDatagram& dgram, Ipv4Addr src, Ipv4Addr dst);

FlowKey flow_key_of(const Ipv4Packet& ip);  // throws UnsupportedProtocol

// Builds a complete IPv4 packet around a transport payload, checksums done.
Ipv4Packet make_tcp_packet(Ipv4Addr src, Ipv4Addr dst, const TcpSegment& seg, uint8_t ttl = 64);
Ipv4Packet make_udp_packet(Ipv4Addr src, Ipv4Addr dst, const UdpDatagram& dgram, uint8_t ttl = 64);

// Wrap-around-safe sequence comparison: a precedes b iff (b - a) mod 2^32
// is in (0, 2^31).
inline bool seq_lt(uint32_t a, uint32_t b) {
    return a != b && (b - a) < 0x80000000u;
}
inline bool seq_le(uint32_t a, uint32_t b) { return a == b || seq_lt(a, b); }

}  // namespace netlens
