#include "netlens/net_io.hpp"

#include <fcntl.h>
#include <linux/if.h>
#include <linux/if_tun.h>
#include <poll.h>
#include <sys/ioctl.h>
#include <sys/socket.h>
#include <netinet/in.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <fstream>
#include <map>

#include "netlens/bytes.hpp"

namespace netlens {

// --- SimChannel ---------------------------------------------------------

SimChannel::Pair SimChannel::make_pair(EventLoop& loop, uint64_t delay_a_to_b_ns,
                                       uint64_t delay_b_to_a_ns, size_t mtu) {
    auto a = std::unique_ptr<SimChannel>(new SimChannel(loop, delay_a_to_b_ns, mtu));
    auto b = std::unique_ptr<SimChannel>(new SimChannel(loop, delay_b_to_a_ns, mtu));
    a->peer_ = b.get();
    b->peer_ = a.get();
    return Pair{std::move(a), std::move(b)};
}

SimChannel::~SimChannel() {
    if (peer_) peer_->peer_ = nullptr;
}

bool SimChannel::write_packet(std::span<const uint8_t> packet) {
    if (closed_ || !peer_ || peer_->closed_) return false;
    if (packet.size() > mtu_) return false;
    std::vector<uint8_t> copy(packet.begin(), packet.end());
    SimChannel* peer = peer_;
    loop_.schedule_after(send_delay_ns_, [peer, copy = std::move(copy)]() mutable {
        if (peer) peer->deliver(std::move(copy));
    });
    return true;
}

void SimChannel::deliver(std::vector<uint8_t> packet) {
    if (closed_) return;
    if (handler_) {
        handler_(std::move(packet));
    } else {
        backlog_.push_back(std::move(packet));
    }
}

void SimChannel::subscribe(PacketHandler handler) {
    handler_ = std::move(handler);
    while (!backlog_.empty() && handler_) {
        auto pkt = std::move(backlog_.front());
        backlog_.pop_front();
        handler_(std::move(pkt));
    }
}

void SimChannel::close() { closed_ = true; }

// --- TunDevice ----------------------------------------------------------

TunDevice::TunDevice(EventLoop& loop, const std::string& name, size_t mtu)
    : loop_(loop), mtu_(mtu) {
    fd_ = ::open("/dev/net/tun", O_RDWR | O_NONBLOCK);
    if (fd_ < 0) {
        const auto kind = errno == EACCES || errno == EPERM ? TunError::Kind::PermissionDenied
                                                            : TunError::Kind::Unsupported;
        throw TunError(kind,
                       "cannot open /dev/net/tun: " + std::string(strerror(errno)) +
                           " (creating a tunnel device needs CAP_NET_ADMIN, not full root)");
    }

    ifreq ifr{};
    ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
    std::strncpy(ifr.ifr_name, name.c_str(), IFNAMSIZ - 1);
    if (ioctl(fd_, TUNSETIFF, &ifr) < 0) {
        const int err = errno;
        ::close(fd_);
        fd_ = -1;
        const auto kind = err == EPERM ? TunError::Kind::PermissionDenied
                         : err == EBUSY ? TunError::Kind::Busy
                                        : TunError::Kind::Io;
        throw TunError(kind, "TUNSETIFF failed for '" + name + "': " + strerror(err));
    }
    name_ = ifr.ifr_name;

    // Set the device MTU through a throwaway control socket.
    int ctl = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (ctl >= 0) {
        ifreq mreq{};
        std::strncpy(mreq.ifr_name, name_.c_str(), IFNAMSIZ - 1);
        mreq.ifr_mtu = static_cast<int>(mtu_);
        ioctl(ctl, SIOCSIFMTU, &mreq);
        ::close(ctl);
    }
}

TunDevice::~TunDevice() { close(); }

bool TunDevice::write_packet(std::span<const uint8_t> packet) {
    if (fd_ < 0 || packet.size() > mtu_) return false;
    const ssize_t n = ::write(fd_, packet.data(), packet.size());
    return n == static_cast<ssize_t>(packet.size());
}

void TunDevice::subscribe(PacketHandler handler) {
    if (fd_ < 0) return;
    auto cb = std::make_shared<PacketHandler>(std::move(handler));
    watching_ = true;
    loop_.watch_fd(fd_, POLLIN, [this, cb](short) {
        std::vector<uint8_t> buf(mtu_);
        while (true) {
            const ssize_t n = ::read(fd_, buf.data(), buf.size());
            if (n <= 0) break;
            (*cb)(std::vector<uint8_t>(buf.begin(), buf.begin() + n));
        }
    });
}

std::optional<std::vector<uint8_t>> TunDevice::read_packet(uint64_t timeout_ns) {
    if (fd_ < 0) return std::nullopt;
    pollfd pfd{fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout_ns / kMillisecond));
    if (rc <= 0) return std::nullopt;
    std::vector<uint8_t> buf(mtu_);
    const ssize_t n = ::read(fd_, buf.data(), buf.size());
    if (n <= 0) return std::nullopt;
    buf.resize(static_cast<size_t>(n));
    return buf;
}

void TunDevice::configure_address(Ipv4Addr addr, int prefix_len) {
    int ctl = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (ctl < 0) throw TunError(TunError::Kind::Io, "control socket failed");

    auto run = [&](unsigned long req, ifreq& ifr, const char* what) {
        std::strncpy(ifr.ifr_name, name_.c_str(), IFNAMSIZ - 1);
        if (ioctl(ctl, req, &ifr) < 0) {
            const std::string msg = std::string(what) + " failed: " + strerror(errno);
            ::close(ctl);
            throw TunError(TunError::Kind::Io, msg);
        }
    };

    ifreq ifr{};
    auto* sa = reinterpret_cast<sockaddr_in*>(&ifr.ifr_addr);
    sa->sin_family = AF_INET;
    sa->sin_addr.s_addr = htonl(addr.value);
    run(SIOCSIFADDR, ifr, "SIOCSIFADDR");

    ifreq nreq{};
    auto* mask = reinterpret_cast<sockaddr_in*>(&nreq.ifr_netmask);
    mask->sin_family = AF_INET;
    mask->sin_addr.s_addr = htonl(prefix_len == 0 ? 0 : ~0u << (32 - prefix_len));
    run(SIOCSIFNETMASK, nreq, "SIOCSIFNETMASK");

    ifreq freq{};
    run(SIOCGIFFLAGS, freq, "SIOCGIFFLAGS");
    freq.ifr_flags |= IFF_UP | IFF_RUNNING;
    run(SIOCSIFFLAGS, freq, "SIOCSIFFLAGS");
    ::close(ctl);
}

void TunDevice::close() {
    if (fd_ >= 0) {
        if (watching_) loop_.unwatch_fd(fd_);
        ::close(fd_);
        fd_ = -1;
    }
}

// --- Capture files ------------------------------------------------------

namespace {

constexpr uint32_t kMagicNative = 0xa1b2c3d4;
constexpr uint32_t kMagicSwapped = 0xd4c3b2a1;

uint32_t read_u32(const uint8_t* p, bool swapped) {
    uint32_t v;
    std::memcpy(&v, p, 4);
    return swapped ? __builtin_bswap32(v) : v;
}

uint16_t read_u16(const uint8_t* p, bool swapped) {
    uint16_t v;
    std::memcpy(&v, p, 2);
    return swapped ? __builtin_bswap16(v) : v;
}

}  // namespace

CaptureReader::CaptureReader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CaptureError(CaptureError::Kind::Io, "cannot open capture: " + path);
    data_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());

    if (data_.size() < 24) {
        throw CaptureError(CaptureError::Kind::BadMagic, "file shorter than a capture header");
    }
    uint32_t magic;
    std::memcpy(&magic, data_.data(), 4);
    if (magic == kMagicNative) {
        swapped_ = false;
    } else if (magic == kMagicSwapped) {
        swapped_ = true;
    } else {
        throw CaptureError(CaptureError::Kind::BadMagic, "unrecognized capture magic");
    }
    link_type_ = read_u32(data_.data() + 20, swapped_);
    pos_ = 24;
}

std::optional<CaptureReader::Record> CaptureReader::next() {
    if (pos_ >= data_.size()) return std::nullopt;
    if (pos_ + 16 > data_.size()) {
        ++truncated_;
        pos_ = data_.size();
        return std::nullopt;
    }
    const uint32_t ts_sec = read_u32(data_.data() + pos_, swapped_);
    const uint32_t ts_usec = read_u32(data_.data() + pos_ + 4, swapped_);
    const uint32_t incl_len = read_u32(data_.data() + pos_ + 8, swapped_);
    pos_ += 16;
    if (pos_ + incl_len > data_.size()) {
        ++truncated_;
        pos_ = data_.size();
        return std::nullopt;
    }

    const uint64_t ts_ns =
        static_cast<uint64_t>(ts_sec) * kSecond + static_cast<uint64_t>(ts_usec) * kMicrosecond;
    if (!base_set_) {
        time_base_ns_ = ts_ns;
        base_set_ = true;
    }

    Record rec;
    rec.ts_rel_ns = ts_ns - time_base_ns_;
    rec.bytes.assign(data_.begin() + pos_, data_.begin() + pos_ + incl_len);
    pos_ += incl_len;
    return rec;
}

std::optional<std::span<const uint8_t>> CaptureReader::ip_payload(const Record& rec) const {
    std::span<const uint8_t> bytes(rec.bytes);
    if (link_type_ == 101) {  // LINKTYPE_RAW
        return bytes;
    }
    if (link_type_ == 1) {  // Ethernet
        if (bytes.size() < 14) return std::nullopt;
        uint16_t ethertype = static_cast<uint16_t>(bytes[12] << 8 | bytes[13]);
        size_t offset = 14;
        if (ethertype == 0x8100 && bytes.size() >= 18) {  // single VLAN tag
            ethertype = static_cast<uint16_t>(bytes[16] << 8 | bytes[17]);
            offset = 18;
        }
        if (ethertype != 0x0800) return std::nullopt;
        return bytes.subspan(offset);
    }
    if (link_type_ == 113) {  // Linux cooked capture
        if (bytes.size() < 16) return std::nullopt;
        const uint16_t proto = static_cast<uint16_t>(bytes[14] << 8 | bytes[15]);
        if (proto != 0x0800) return std::nullopt;
        return bytes.subspan(16);
    }
    return std::nullopt;
}

CaptureWriter::CaptureWriter(const std::string& path, uint32_t link_type) : path_(path) {
    buf_.resize(24);
    uint32_t magic = kMagicNative;
    std::memcpy(buf_.data(), &magic, 4);
    const uint16_t ver_major = 2, ver_minor = 4;
    std::memcpy(buf_.data() + 4, &ver_major, 2);
    std::memcpy(buf_.data() + 6, &ver_minor, 2);
    // thiszone, sigfigs stay zero
    const uint32_t snaplen = 0x40000;
    std::memcpy(buf_.data() + 16, &snaplen, 4);
    std::memcpy(buf_.data() + 20, &link_type, 4);
}

void CaptureWriter::add(uint64_t ts_ns, std::span<const uint8_t> packet) {
    const uint32_t ts_sec = static_cast<uint32_t>(ts_ns / kSecond);
    const uint32_t ts_usec = static_cast<uint32_t>((ts_ns % kSecond) / kMicrosecond);
    const uint32_t len = static_cast<uint32_t>(packet.size());
    const size_t at = buf_.size();
    buf_.resize(at + 16 + packet.size());
    std::memcpy(buf_.data() + at, &ts_sec, 4);
    std::memcpy(buf_.data() + at + 4, &ts_usec, 4);
    std::memcpy(buf_.data() + at + 8, &len, 4);
    std::memcpy(buf_.data() + at + 12, &len, 4);
    std::memcpy(buf_.data() + at + 16, packet.data(), packet.size());
}

void CaptureWriter::flush() {
    std::ofstream out(path_, std::ios::binary | std::ios::trunc);
    if (!out) throw CaptureError(CaptureError::Kind::Io, "cannot write capture: " + path_);
    out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
}

// --- Replay analysis ----------------------------------------------------

ReplayReport replay_capture(CaptureReader& reader) {
    ReplayReport report;
    std::map<FlowKey, size_t> index;  // canonical key -> flows position

    auto canonical = [](const FlowKey& key) {
        const FlowKey rev = key.reversed();
        return key < rev ? key : rev;
    };

    while (auto rec = reader.next()) {
        ++report.packets;
        const auto ip_bytes = reader.ip_payload(*rec);
        if (!ip_bytes) {
            ++report.non_ipv4;
            continue;
        }
        Ipv4Packet pkt;
        try {
            pkt = parse_ipv4(*ip_bytes);
        } catch (const PacketError&) {
            ++report.non_ipv4;
            continue;
        }
        if (!pkt.is_tcp() && !pkt.is_udp()) continue;

        const FlowKey key = flow_key_of(pkt);
        const FlowKey canon = canonical(key);
        auto [it, inserted] = index.try_emplace(canon, report.flows.size());
        if (inserted) {
            ReplayFlow flow;
            flow.key = canon;
            report.flows.push_back(flow);
        }
        ReplayFlow& flow = report.flows[it->second];
        flow.packets += 1;
        flow.bytes += pkt.payload.size();
        if (!pkt.checksum_valid) ++report.bad_checksums;

        if (pkt.is_tcp()) {
            TcpSegment seg;
            try {
                seg = parse_tcp(pkt);
            } catch (const PacketError&) {
                continue;
            }
            if (!seg.checksum_valid) ++report.bad_checksums;
            if (seg.syn() && !seg.ack_set() && !flow.syn_seen) {
                flow.syn_seen = true;
                flow.syn_ts_ns = rec->ts_rel_ns;
                flow.key = key;  // orient the flow in the initiator's direction
            } else if (seg.syn() && seg.ack_set() && flow.syn_seen && !flow.synack_seen) {
                flow.synack_seen = true;
                if (flow.syn_ts_ns) flow.rtt_ns = rec->ts_rel_ns - *flow.syn_ts_ns;
            }
        }
    }
    report.truncated_records = reader.truncated_records();
    return report;
}

}  // namespace netlens
