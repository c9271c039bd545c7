#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>

#include "netlens/diagnostics.hpp"
#include "netlens/event_loop.hpp"
#include "netlens/external.hpp"
#include "netlens/flow_registry.hpp"
#include "netlens/net_io.hpp"
#include "netlens/rtt.hpp"
#include "netlens/stats.hpp"
#include "netlens/utcp.hpp"

namespace netlens {

struct RelayConfig {
    uint64_t connect_timeout_ns = 3000 * kMillisecond;
    uint64_t udp_idle_expiry_ns = 60 * kSecond;
    uint32_t max_flows = 4096;
    size_t per_flow_queue_bytes = 256 * 1024;
    bool strict_checksums = false;
    uint64_t time_wait_linger_ns = 2 * kSecond;
    uint64_t isn_seed = 0;  // deterministic ISNs for replayable runs
    uint16_t local_mss = 1460;
    std::string network_tag = "unlabeled";
    std::set<Ipv4Addr> bogus_dns{Ipv4Addr(1, 1, 1, 1)};
};

struct RelayCounters {
    uint64_t packets_in = 0;
    uint64_t packets_out = 0;
    uint64_t bad_checksum_drops = 0;
    uint64_t ipv6_drops = 0;
    uint64_t unsupported_protocol_drops = 0;
    uint64_t parse_errors = 0;
    uint64_t flow_table_full = 0;
    uint64_t udp_send_failures = 0;
    uint64_t queue_overflow_drops = 0;
    uint64_t tunnel_write_failures = 0;
    uint64_t malformed_dns = 0;
};

// Splices each app-side TCP flow to a real outbound connection and shuttles
// bytes both ways; relays UDP datagrams per 5-tuple with idle expiry. Never
// transmits anything the apps did not ask for: external connects happen only
// for tunnel SYNs, external bytes only from delivered tunnel payload.
//
// Single-threaded: everything runs on the event loop. The flow table itself
// is lock-protected and may be inspected from other threads.
class RelayEngine {
public:
    RelayEngine(EventLoop& loop, PacketChannel& tunnel, ExternalNetwork& net, StatsStore& stats,
                RelayConfig config, AttributionResolver* resolver);
    ~RelayEngine();

    RelayEngine(const RelayEngine&) = delete;
    RelayEngine& operator=(const RelayEngine&) = delete;

    // Subscribes to the tunnel; packets start flowing through the engine.
    void start();

    // Direct packet injection (tests, capture-driven runs).
    void on_tunnel_packet(std::vector<uint8_t> raw);

    // Closes a flow from the operator side: records a final sample if none
    // exists, resets the app side, tears down the external side. Idempotent.
    void shutdown_flow(const FlowKey& key);

    // Drains everything (graceful stop).
    void shutdown_all();

    size_t active_tcp_flows() const { return tcp_flows_.size(); }
    size_t active_udp_flows() const { return udp_flows_.size(); }
    size_t active_flows() const { return tcp_flows_.size() + udp_flows_.size(); }

    const RelayCounters& counters() const { return counters_; }
    FlowTable& flow_table() { return table_; }

    // Observers for trace bundles and live reporting; optional.
    std::function<void(const RttSample&)> on_sample;
    std::function<void(const FailureRecord&)> on_failure;
    std::function<void(uint64_t ts_ns, std::span<const uint8_t>)> on_emit;  // tunnel-bound

private:
    struct TcpEntry {
        FlowKey key;
        TcpFlowState tcp;
        std::unique_ptr<StreamConnection> external;
        uint64_t splice_id = 0;
        uint64_t opened_at_ns = 0;
        AppId app;
        uint64_t bytes_in = 0;   // server -> app
        uint64_t bytes_out = 0;  // app -> server
        ConnectTimer timer;
        TimerId connect_timer = 0;
        TimerId reap_timer = 0;
        bool sample_recorded = false;
        bool reaping = false;

        // Tunnel-bound packets that could not be written yet. While nonempty,
        // external reading is paused (back-pressure toward the server).
        std::deque<std::vector<uint8_t>> tunnel_backlog;
        size_t backlog_bytes = 0;
        TimerId drain_timer = 0;

        explicit TcpEntry(const Clock& clock) : timer(clock) {}
    };

    struct UdpEntry {
        FlowKey key;
        std::unique_ptr<DatagramEndpoint> external;
        AppId app;
        uint64_t last_active_ns = 0;
        TimerId expiry_timer = 0;
        uint64_t bytes_in = 0;
        uint64_t bytes_out = 0;
    };

    void handle_tcp(const FlowKey& key, const TcpSegment& seg);
    void handle_udp(const FlowKey& key, const UdpDatagram& dgram);

    void create_tcp_flow(const FlowKey& key, const TcpSegment& syn);
    void apply_tunnel(TcpEntry& entry, const TcpSegment& seg);
    void apply_external(TcpEntry& entry, const ExternalEvent& ev);
    void run_actions(TcpEntry& entry, const std::vector<TcpAction>& actions);
    void open_external(TcpEntry& entry);
    void emit_segment(TcpEntry& entry, const TcpSegment& seg);
    void drain_backlog(TcpEntry& entry);
    void emit_raw_reset(const FlowKey& key, const TcpSegment& offending);
    void record_connect_result(TcpEntry& entry, ConnectOutcome outcome);
    void finalize_if_terminal(TcpEntry& entry);
    void reap(const FlowKey& key);

    void udp_reply(const FlowKey& key, std::vector<uint8_t> payload);
    void arm_udp_expiry(UdpEntry& entry);

    void write_tunnel(const Ipv4Packet& pkt);

    EventLoop& loop_;
    PacketChannel& tunnel_;
    ExternalNetwork& net_;
    StatsStore& stats_;
    RelayConfig cfg_;
    AttributionResolver* resolver_;

    FlowTable table_;
    std::map<FlowKey, std::unique_ptr<TcpEntry>> tcp_flows_;
    std::map<FlowKey, std::unique_ptr<UdpEntry>> udp_flows_;
    uint64_t next_splice_id_ = 1;
    RelayCounters counters_;
};

}  // namespace netlens
