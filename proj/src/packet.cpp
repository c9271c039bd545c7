#include "netlens/packet.hpp"

#include <cstdio>

#include "netlens/bytes.hpp"

namespace netlens {

std::string Ipv4Addr::to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u", (value >> 24) & 0xff, (value >> 16) & 0xff,
                  (value >> 8) & 0xff, value & 0xff);
    return buf;
}

Ipv4Addr Ipv4Addr::parse(const std::string& dotted) {
    unsigned a, b, c, d;
    char tail;
    if (std::sscanf(dotted.c_str(), "%u.%u.%u.%u%c", &a, &b, &c, &d, &tail) != 4 || a > 255 ||
        b > 255 || c > 255 || d > 255) {
        throw std::invalid_argument("bad IPv4 address: " + dotted);
    }
    return Ipv4Addr(static_cast<uint8_t>(a), static_cast<uint8_t>(b), static_cast<uint8_t>(c),
                    static_cast<uint8_t>(d));
}

std::string FlowKey::to_string() const {
    return std::string(proto_name(proto)) + " " + src.to_string() + ":" + std::to_string(src_port) +
           " -> " + dst.to_string() + ":" + std::to_string(dst_port);
}

uint16_t internet_checksum(std::span<const uint8_t> data) {
    uint64_t sum = 0;
    size_t i = 0;
    for (; i + 1 < data.size(); i += 2) {
        sum += (static_cast<uint32_t>(data[i]) << 8) | data[i + 1];
    }
    if (i < data.size()) {
        sum += static_cast<uint32_t>(data[i]) << 8;  // odd byte padded with zero
    }
    while (sum >> 16) {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    return static_cast<uint16_t>(~sum);
}

uint16_t transport_checksum(Ipv4Addr src, Ipv4Addr dst, uint8_t protocol,
                            std::span<const uint8_t> transport_bytes) {
    if (transport_bytes.size() > 0xffff) {
        throw PacketError(PacketError::Kind::FieldOverflow, "transport payload exceeds 65535");
    }
    std::vector<uint8_t> buf;
    buf.reserve(12 + transport_bytes.size());
    append_be32(buf, src.value);
    append_be32(buf, dst.value);
    buf.push_back(0);
    buf.push_back(protocol);
    append_be16(buf, static_cast<uint16_t>(transport_bytes.size()));
    buf.insert(buf.end(), transport_bytes.begin(), transport_bytes.end());
    return internet_checksum(buf);
}

Ipv4Packet parse_ipv4(std::span<const uint8_t> raw) {
    if (raw.size() < 20) {
        throw PacketError(PacketError::Kind::TruncatedPacket, "IPv4 packet shorter than 20 bytes");
    }
    const uint8_t version = raw[0] >> 4;
    if (version != 4) {
        throw PacketError(PacketError::Kind::UnsupportedVersion,
                          "IP version " + std::to_string(version));
    }
    const uint8_t ihl_bytes = static_cast<uint8_t>((raw[0] & 0x0f) * 4);
    if (ihl_bytes < 20) {
        throw PacketError(PacketError::Kind::TruncatedPacket, "IPv4 IHL below 20 bytes");
    }
    const uint16_t total_length = load_be16(raw.data() + 2);
    if (total_length < ihl_bytes || raw.size() < total_length) {
        throw PacketError(PacketError::Kind::TruncatedPacket,
                          "IPv4 total length exceeds available bytes");
    }

    Ipv4Packet pkt;
    pkt.version = version;
    pkt.header_length = ihl_bytes;
    pkt.dscp_ecn = raw[1];
    pkt.total_length = total_length;
    pkt.identification = load_be16(raw.data() + 4);
    pkt.flags_fragment = load_be16(raw.data() + 6);
    pkt.ttl = raw[8];
    pkt.protocol = raw[9];
    pkt.header_checksum = load_be16(raw.data() + 10);
    pkt.src_addr = Ipv4Addr(load_be32(raw.data() + 12));
    pkt.dst_addr = Ipv4Addr(load_be32(raw.data() + 16));
    pkt.options.assign(raw.begin() + 20, raw.begin() + ihl_bytes);
    pkt.payload.assign(raw.begin() + ihl_bytes, raw.begin() + total_length);
    // Header checksum verifies to zero over the header including the field.
    pkt.checksum_valid = internet_checksum(raw.subspan(0, ihl_bytes)) == 0;
    return pkt;
}

std::vector<uint8_t> serialize_ipv4(const Ipv4Packet& pkt) {
    if (pkt.version != 4) {
        throw PacketError(PacketError::Kind::UnsupportedVersion, "can only serialize IPv4");
    }
    if (pkt.options.size() % 4 != 0 || pkt.options.size() > 40) {
        throw PacketError(PacketError::Kind::FieldOverflow, "IPv4 options must be 0..40 bytes, 4-aligned");
    }
    const size_t header_len = 20 + pkt.options.size();
    const size_t total = header_len + pkt.payload.size();
    if (total > 0xffff) {
        throw PacketError(PacketError::Kind::FieldOverflow, "IPv4 packet exceeds 65535 bytes");
    }

    std::vector<uint8_t> out(total);
    out[0] = static_cast<uint8_t>(0x40 | (header_len / 4));
    out[1] = pkt.dscp_ecn;
    store_be16(out.data() + 2, static_cast<uint16_t>(total));
    store_be16(out.data() + 4, pkt.identification);
    store_be16(out.data() + 6, pkt.flags_fragment);
    out[8] = pkt.ttl;
    out[9] = pkt.protocol;
    store_be16(out.data() + 10, 0);
    store_be32(out.data() + 12, pkt.src_addr.value);
    store_be32(out.data() + 16, pkt.dst_addr.value);
    std::copy(pkt.options.begin(), pkt.options.end(), out.begin() + 20);
    std::copy(pkt.payload.begin(), pkt.payload.end(), out.begin() + header_len);

    const uint16_t sum = internet_checksum(std::span<const uint8_t>(out.data(), header_len));
    store_be16(out.data() + 10, sum);
    return out;
}

std::optional<uint16_t> TcpSegment::mss_option() const {
    size_t i = 0;
    while (i < options.size()) {
        const uint8_t kind = options[i];
        if (kind == 0) break;  // end of options
        if (kind == 1) {       // NOP
            ++i;
            continue;
        }
        if (i + 1 >= options.size()) break;
        const uint8_t len = options[i + 1];
        if (len < 2 || i + len > options.size()) break;
        if (kind == 2 && len == 4) {
            return load_be16(options.data() + i + 2);
        }
        i += len;
    }
    return std::nullopt;
}

std::vector<uint8_t> TcpSegment::make_mss_option(uint16_t mss) {
    std::vector<uint8_t> opt(4);
    opt[0] = 2;
    opt[1] = 4;
    store_be16(opt.data() + 2, mss);
    return opt;
}

TcpSegment parse_tcp(const Ipv4Packet& ip) {
    if (!ip.is_tcp()) {
        throw PacketError(PacketError::Kind::UnsupportedProtocol, "not a TCP packet");
    }
    const auto& p = ip.payload;
    if (p.size() < 20) {
        throw PacketError(PacketError::Kind::TruncatedSegment, "TCP header shorter than 20 bytes");
    }
    const uint8_t data_offset = static_cast<uint8_t>((p[12] >> 4) * 4);
    if (data_offset < 20 || data_offset > p.size()) {
        throw PacketError(PacketError::Kind::TruncatedSegment, "TCP data offset out of range");
    }

    TcpSegment seg;
    seg.src_port = load_be16(p.data());
    seg.dst_port = load_be16(p.data() + 2);
    seg.seq = load_be32(p.data() + 4);
    seg.ack = load_be32(p.data() + 8);
    seg.flags = p[13] & 0x3f;
    seg.window = load_be16(p.data() + 14);
    seg.checksum = load_be16(p.data() + 16);
    seg.urgent_ptr = load_be16(p.data() + 18);
    seg.options.assign(p.begin() + 20, p.begin() + data_offset);
    seg.payload.assign(p.begin() + data_offset, p.end());
    seg.checksum_valid =
        transport_checksum(ip.src_addr, ip.dst_addr, 6, std::span<const uint8_t>(p)) == 0;
    return seg;
}

std::vector<uint8_t> serialize_tcp(const TcpSegment& seg, Ipv4Addr src, Ipv4Addr dst) {
    if (seg.options.size() % 4 != 0 || seg.options.size() > 40) {
        throw PacketError(PacketError::Kind::FieldOverflow, "TCP options must be 0..40 bytes, 4-aligned");
    }
    const size_t header_len = 20 + seg.options.size();
    std::vector<uint8_t> out(header_len + seg.payload.size());
    store_be16(out.data(), seg.src_port);
    store_be16(out.data() + 2, seg.dst_port);
    store_be32(out.data() + 4, seg.seq);
    store_be32(out.data() + 8, seg.ack);
    out[12] = static_cast<uint8_t>((header_len / 4) << 4);
    out[13] = seg.flags & 0x3f;
    store_be16(out.data() + 14, seg.window);
    store_be16(out.data() + 16, 0);
    store_be16(out.data() + 18, seg.urgent_ptr);
    std::copy(seg.options.begin(), seg.options.end(), out.begin() + 20);
    std::copy(seg.payload.begin(), seg.payload.end(), out.begin() + header_len);

    const uint16_t sum = transport_checksum(src, dst, 6, out);
    store_be16(out.data() + 16, sum);
    return out;
}

UdpDatagram parse_udp(const Ipv4Packet& ip) {
    if (!ip.is_udp()) {
        throw PacketError(PacketError::Kind::UnsupportedProtocol, "not a UDP packet");
    }
    const auto& p = ip.payload;
    if (p.size() < 8) {
        throw PacketError(PacketError::Kind::TruncatedSegment, "UDP header shorter than 8 bytes");
    }
    UdpDatagram d;
    d.src_port = load_be16(p.data());
    d.dst_port = load_be16(p.data() + 2);
    d.length = load_be16(p.data() + 4);
    d.checksum = load_be16(p.data() + 6);
    if (d.length < 8 || d.length > p.size()) {
        throw PacketError(PacketError::Kind::TruncatedSegment, "UDP length field out of range");
    }
    d.payload.assign(p.begin() + 8, p.begin() + d.length);
    // Checksum zero means "not computed" in IPv4 UDP; treat as valid.
    d.checksum_valid =
        d.checksum == 0 ||
        transport_checksum(ip.src_addr, ip.dst_addr, 17,
                           std::span<const uint8_t>(p.data(), d.length)) == 0;
    return d;
}

std::vector<uint8_t> serialize_udp(const UdpDatagram& dgram, Ipv4Addr src, Ipv4Addr dst) {
    const size_t total = 8 + dgram.payload.size();
    if (total > 0xffff) {
        throw PacketError(PacketError::Kind::FieldOverflow, "UDP datagram exceeds 65535 bytes");
    }
    std::vector<uint8_t> out(total);
    store_be16(out.data(), dgram.src_port);
    store_be16(out.data() + 2, dgram.dst_port);
    store_be16(out.data() + 4, static_cast<uint16_t>(total));
    store_be16(out.data() + 6, 0);
    std::copy(dgram.payload.begin(), dgram.payload.end(), out.begin() + 8);

    uint16_t sum = transport_checksum(src, dst, 17, out);
    if (sum == 0) sum = 0xffff;  // transmitted as all-ones when computed sum is zero
    store_be16(out.data() + 6, sum);
    return out;
}

FlowKey flow_key_of(const Ipv4Packet& ip) {
    FlowKey key;
    key.src = ip.src_addr;
    key.dst = ip.dst_addr;
    if (ip.is_tcp()) {
        key.proto = Proto::Tcp;
        const auto& p = ip.payload;
        if (p.size() < 4) {
            throw PacketError(PacketError::Kind::TruncatedSegment, "TCP ports truncated");
        }
        key.src_port = load_be16(p.data());
        key.dst_port = load_be16(p.data() + 2);
    } else if (ip.is_udp()) {
        key.proto = Proto::Udp;
        const auto& p = ip.payload;
        if (p.size() < 4) {
            throw PacketError(PacketError::Kind::TruncatedSegment, "UDP ports truncated");
        }
        key.src_port = load_be16(p.data());
        key.dst_port = load_be16(p.data() + 2);
    } else {
        throw PacketError(PacketError::Kind::UnsupportedProtocol,
                          "flow keys exist only for TCP/UDP, got protocol " +
                              std::to_string(ip.protocol));
    }
    return key;
}

namespace {

Ipv4Packet wrap_transport(Ipv4Addr src, Ipv4Addr dst, uint8_t protocol,
                          std::vector<uint8_t> transport, uint8_t ttl) {
    Ipv4Packet pkt;
    pkt.ttl = ttl;
    pkt.protocol = protocol;
    pkt.src_addr = src;
    pkt.dst_addr = dst;
    if (20 + transport.size() > 0xffff) {
        throw PacketError(PacketError::Kind::FieldOverflow, "payload exceeds 65535 - header");
    }
    pkt.payload = std::move(transport);
    pkt.total_length = static_cast<uint16_t>(20 + pkt.payload.size());
    return pkt;
}

}  // namespace

Ipv4Packet make_tcp_packet(Ipv4Addr src, Ipv4Addr dst, const TcpSegment& seg, uint8_t ttl) {
    return wrap_transport(src, dst, 6, serialize_tcp(seg, src, dst), ttl);
}

Ipv4Packet make_udp_packet(Ipv4Addr src, Ipv4Addr dst, const UdpDatagram& dgram, uint8_t ttl) {
    return wrap_transport(src, dst, 17, serialize_udp(dgram, src, dst), ttl);
}

}  // namespace netlens
