#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "netlens/event_loop.hpp"
#include "netlens/packet.hpp"

namespace netlens {

// Uniform packet source/sink: whole IP datagrams in both directions.
// Inbound packets are delivered through the subscribed handler on the
// owning event loop.
class PacketChannel {
public:
    using PacketHandler = std::function<void(std::vector<uint8_t>)>;

    virtual ~PacketChannel() = default;

    // False when the packet was rejected (oversize, channel closed).
    virtual bool write_packet(std::span<const uint8_t> packet) = 0;
    virtual void subscribe(PacketHandler handler) = 0;
    virtual size_t mtu() const = 0;
    virtual void close() = 0;
    virtual bool closed() const = 0;
};

// In-memory duplex channel pair for the simulator. Writes on one end appear
// on the other, in order, after the scripted per-direction delay (exact
// under a virtual clock).
class SimChannel final : public PacketChannel {
public:
    struct Pair {
        std::unique_ptr<SimChannel> a;
        std::unique_ptr<SimChannel> b;
    };
    static Pair make_pair(EventLoop& loop, uint64_t delay_a_to_b_ns = 0,
                          uint64_t delay_b_to_a_ns = 0, size_t mtu = 65535);

    ~SimChannel() override;

    bool write_packet(std::span<const uint8_t> packet) override;
    void subscribe(PacketHandler handler) override;
    size_t mtu() const override { return mtu_; }
    void close() override;
    bool closed() const override { return closed_; }

private:
    SimChannel(EventLoop& loop, uint64_t send_delay_ns, size_t mtu)
        : loop_(loop), send_delay_ns_(send_delay_ns), mtu_(mtu) {}

    void deliver(std::vector<uint8_t> packet);

    EventLoop& loop_;
    uint64_t send_delay_ns_;
    size_t mtu_;
    SimChannel* peer_ = nullptr;
    PacketHandler handler_;
    std::deque<std::vector<uint8_t>> backlog_;  // arrivals before subscribe()
    bool closed_ = false;
};

class TunError : public std::runtime_error {
public:
    enum class Kind { PermissionDenied, Unsupported, Busy, Io };
    TunError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

// Linux TUN device (IFF_TUN | IFF_NO_PI): reads and writes whole IP
// datagrams. Creating one needs CAP_NET_ADMIN, not full root.
class TunDevice final : public PacketChannel {
public:
    // Throws TunError. `name` may contain a %d pattern for kernel numbering.
    TunDevice(EventLoop& loop, const std::string& name, size_t mtu = 1500);
    ~TunDevice() override;

    bool write_packet(std::span<const uint8_t> packet) override;
    void subscribe(PacketHandler handler) override;
    size_t mtu() const override { return mtu_; }
    void close() override;
    bool closed() const override { return fd_ < 0; }

    const std::string& name() const { return name_; }
    int fd() const { return fd_; }

    // Blocking read with deadline for standalone (non-loop) use.
    std::optional<std::vector<uint8_t>> read_packet(uint64_t timeout_ns);

    // Assigns addr/prefix and brings the interface up (ioctl based, no
    // external tooling). Needed before the kernel will route into the device.
    void configure_address(Ipv4Addr addr, int prefix_len);

private:
    EventLoop& loop_;
    std::string name_;
    int fd_ = -1;
    size_t mtu_;
    bool watching_ = false;
};

// Classic capture file reading (magic 0xa1b2c3d4, microsecond timestamps;
// byte-swapped variant accepted). Timestamps are normalized to nanoseconds
// relative to the first record.
class CaptureError : public std::runtime_error {
public:
    enum class Kind { BadMagic, Io };
    CaptureError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

class CaptureReader {
public:
    explicit CaptureReader(const std::string& path);  // throws CaptureError

    struct Record {
        uint64_t ts_rel_ns = 0;  // relative to time_base
        std::vector<uint8_t> bytes;
    };

    // nullopt at end of file. A truncated trailing record stops iteration
    // and bumps truncated_records().
    std::optional<Record> next();

    uint32_t link_type() const { return link_type_; }
    uint64_t time_base_ns() const { return time_base_ns_; }
    size_t truncated_records() const { return truncated_; }

    // Strips the capture's link-layer framing down to the IP header.
    // Returns nullopt for non-IPv4 frames.
    std::optional<std::span<const uint8_t>> ip_payload(const Record& rec) const;

private:
    std::vector<uint8_t> data_;
    size_t pos_ = 0;
    bool swapped_ = false;
    uint32_t link_type_ = 0;
    uint64_t time_base_ns_ = 0;
    bool base_set_ = false;
    size_t truncated_ = 0;
};

// LINKTYPE_RAW (101): records are bare IP datagrams.
class CaptureWriter {
public:
    explicit CaptureWriter(const std::string& path, uint32_t link_type = 101);
    void add(uint64_t ts_ns, std::span<const uint8_t> packet);
    void flush();

private:
    std::string path_;
    std::vector<uint8_t> buf_;
};

// Replay analysis: flow inventory and SYN / SYN-ACK pairing. This is the
// reference RTT pipeline -- it never transmits anything.
struct ReplayFlow {
    FlowKey key;  // direction of the initial SYN (or canonical order if none seen)
    size_t packets = 0;
    uint64_t bytes = 0;
    bool syn_seen = false;
    bool synack_seen = false;
    std::optional<uint64_t> syn_ts_ns;
    std::optional<uint64_t> rtt_ns;  // SYN-ACK ts - SYN ts
};

struct ReplayReport {
    std::vector<ReplayFlow> flows;     // stable order of first appearance
    size_t packets = 0;
    size_t non_ipv4 = 0;
    size_t bad_checksums = 0;
    size_t truncated_records = 0;
};

ReplayReport replay_capture(CaptureReader& reader);

}  // namespace netlens
