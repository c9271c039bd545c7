#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "netlens/event_loop.hpp"
#include "netlens/external.hpp"
#include "netlens/net_io.hpp"
#include "netlens/relay.hpp"
#include "netlens/stats.hpp"

namespace netlens {

// Scripted virtual server. `delay_ns` is one-way; a successful handshake
// therefore takes exactly 2*delay_ns, which is the endpoint's oracle RTT.
struct SimEndpoint {
    enum class Behavior { Accept, Refuse, Blackhole, Drop };
    enum class Mode { Echo, Sink, Script };

    Ipv4Addr addr;
    uint16_t port = 0;
    Behavior behavior = Behavior::Accept;
    uint64_t delay_ns = 0;
    Mode mode = Mode::Echo;
    std::vector<std::vector<uint8_t>> script;  // TCP: sent after accept, then EOF.
                                               // UDP: reply i answers datagram i.
    double drop_probability = 0.0;             // Behavior::Drop
    uint64_t drop_seed = 0;

    uint64_t oracle_rtt_ns() const { return 2 * delay_ns; }
};

// What the virtual apps do, in order. Ops without `at_ns` start when the
// previous op completes; `wait=false` fires the next op immediately.
struct ClientOp {
    enum class Kind { Open, Send, Close, Abort, Udp };

    Kind kind = Kind::Open;
    uint16_t src_port = 0;
    Ipv4Addr dst;
    uint16_t dst_port = 0;
    std::vector<uint8_t> payload;  // Send / Udp
    size_t random_bytes = 0;       // Send: seeded random payload of this size
    std::optional<uint64_t> at_ns;
    bool wait = true;
};

struct Scenario {
    uint64_t seed = 0;
    bool real_clock = false;
    std::vector<SimEndpoint> endpoints;
    std::map<uint16_t, std::string> apps;  // src port -> app name
    std::vector<ClientOp> client;
    RelayConfig relay;

    static Scenario from_json_file(const std::string& path);
    static Scenario from_json_text(const std::string& text);
};

// Everything externally observable in one scenario run.
struct ExternalTraceEvent {
    enum class Kind : uint8_t { Connect, Connected, StreamSend, StreamShutdown, StreamClose,
                                DgramOpen, DgramSend };
    Kind kind;
    FlowKey key;
    uint64_t at_ns = 0;
    size_t bytes = 0;
    uint64_t payload_hash = 0;  // FNV of this event's payload (DgramSend)
};

const char* trace_event_name(ExternalTraceEvent::Kind k);

struct AppFlowResult {
    FlowKey key;
    bool established = false;
    bool reset = false;
    bool closed = false;  // our FIN acked
    bool server_fin = false;
    uint64_t syn_sent_ns = 0;
    uint64_t synack_ns = 0;
    uint64_t first_send_ns = 0;
    uint64_t echo_complete_ns = 0;  // last time received caught up with sent
    uint64_t bytes_sent = 0;
    uint64_t sent_hash = 0xcbf29ce484222325ull;  // FNV over everything we sent
    std::vector<uint8_t> received;
};

struct TraceBundle {
    std::vector<RttSample> samples;
    std::vector<FailureRecord> failures;
    std::vector<ExternalTraceEvent> external_events;

    struct TunnelPacket {
        uint64_t ts_ns;
        bool to_app;  // true: relay -> app, false: app -> relay
        std::vector<uint8_t> bytes;
    };
    std::vector<TunnelPacket> tunnel_packets;

    std::map<uint16_t, AppFlowResult> app_flows;  // by src port
    std::map<uint16_t, std::vector<std::vector<uint8_t>>> udp_replies;
    RelayCounters counters;
    bool driver_finished = false;

    std::string to_jsonl() const;
    uint64_t hash() const;
    void write_capture(const std::string& path) const;
};

// Scripted-endpoint backend for the relay. Records every externally visible
// action into the trace for the zero-injection audit.
class SimNetwork final : public ExternalNetwork {
public:
    SimNetwork(EventLoop& loop, std::vector<SimEndpoint> endpoints);

    std::unique_ptr<StreamConnection> open_stream(const FlowKey& key,
                                                  StreamHandler handler) override;
    std::unique_ptr<DatagramEndpoint> open_datagram(
        const FlowKey& key, std::function<void(std::vector<uint8_t>)> on_reply) override;

    const std::vector<ExternalTraceEvent>& events() const { return events_; }

    void record(ExternalTraceEvent ev) { events_.push_back(ev); }

private:
    const SimEndpoint* find_endpoint(Ipv4Addr addr, uint16_t port) const;

    EventLoop& loop_;
    std::vector<SimEndpoint> endpoints_;
    std::map<std::pair<Ipv4Addr, uint16_t>, std::mt19937> drop_rngs_;
    std::vector<ExternalTraceEvent> events_;
};

// Emulates the monitored apps on the far side of the tunnel: a minimal TCP
// client per flow plus raw UDP sends, all scripted.
class AppDriver {
public:
    AppDriver(EventLoop& loop, PacketChannel& channel, const Scenario& scenario,
              TraceBundle* bundle);

    void start();
    bool finished() const { return finished_; }

    std::map<uint16_t, AppFlowResult> flows() const;
    const AppFlowResult* flow(uint16_t src_port) const;

    // Source address the virtual apps use.
    static Ipv4Addr app_addr() { return Ipv4Addr(10, 0, 0, 2); }

private:
    struct ClientFlow {
        AppFlowResult result;
        uint32_t isn = 0;
        uint32_t snd_nxt = 0;
        uint32_t snd_una = 0;
        uint32_t rcv_nxt = 0;
        uint16_t mss = 1460;
        bool syn_sent = false;
        bool fin_sent = false;
        bool fin_acked = false;
        std::vector<uint8_t> send_queue;
        size_t send_off = 0;  // next unsent byte
        bool want_fin = false;
    };

    struct PendingOp {
        size_t op_index;
        uint16_t src_port;
        ClientOp::Kind kind;
        uint32_t target_ack;  // Send/Close: done once snd_una covers this
        bool completed = false;
    };

    static constexpr uint32_t kWindow = 65535;

    void on_packet(std::vector<uint8_t> raw);
    void handle_tcp_reply(const Ipv4Packet& pkt, const TcpSegment& seg);
    void run_next_op();
    void begin_op(size_t index);
    void op_done(size_t index);
    void send_segment(ClientFlow& flow, uint8_t flags, std::span<const uint8_t> payload);
    void send_raw(ClientFlow& flow, const TcpSegment& seg);
    void write_packet(const Ipv4Packet& pkt);
    void pump_sends(uint16_t src_port);
    void check_completions(uint16_t src_port);
    void fail_flow_ops(uint16_t src_port);
    void maybe_finish();

    EventLoop& loop_;
    PacketChannel& channel_;
    Scenario scenario_;
    TraceBundle* bundle_;
    std::map<uint16_t, ClientFlow> flows_by_port_;
    std::vector<PendingOp> pending_;
    std::mt19937_64 payload_rng_;
    size_t next_op_ = 0;
    size_t waiting_op_ = SIZE_MAX;
    size_t inflight_ops_ = 0;
    bool finished_ = false;
};

// Runs a scenario end to end: virtual (or real) clock, sim network, relay
// engine, scripted apps. Deterministic under the scenario seed when virtual.
TraceBundle run_scenario(const Scenario& scenario, StatsStore* stats = nullptr);

// Zero-injection audit over a completed run: every externally visible event
// must trace back to a scripted client action (connects and bytes for opened
// flows, datagrams for scripted UDP sends), and no SYN-ACK may precede its
// flow's CONNECTED event. Returns a list of violations (empty = pass).
std::vector<std::string> audit_zero_injection(const TraceBundle& bundle,
                                              const Scenario& scenario);

// Relay overhead on real loopback: direct vs. relayed handshake and echo
// round trips against an in-process echo server.
struct OverheadStats {
    std::vector<double> direct_ms;
    std::vector<double> relayed_ms;
    double median_overhead_ms = 0;
    double mean_overhead_ms = 0;
    double ci95_lo_ms = 0;
    double ci95_hi_ms = 0;
};

struct OverheadReport {
    OverheadStats handshake;
    OverheadStats data_path;
    int runs = 0;
};

OverheadReport overhead_experiment(int runs, size_t echo_bytes);

std::string overhead_report_text(const OverheadReport& report);

}  // namespace netlens
