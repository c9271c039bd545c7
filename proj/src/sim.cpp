#include "netlens/sim.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <thread>

#include "netlens/bytes.hpp"
#include "netlens/socket_net.hpp"

namespace netlens {

const char* trace_event_name(ExternalTraceEvent::Kind k) {
    switch (k) {
        case ExternalTraceEvent::Kind::Connect: return "connect";
        case ExternalTraceEvent::Kind::Connected: return "connected";
        case ExternalTraceEvent::Kind::StreamSend: return "stream_send";
        case ExternalTraceEvent::Kind::StreamShutdown: return "stream_shutdown";
        case ExternalTraceEvent::Kind::StreamClose: return "stream_close";
        case ExternalTraceEvent::Kind::DgramOpen: return "dgram_open";
        case ExternalTraceEvent::Kind::DgramSend: return "dgram_send";
    }
    return "?";
}

// --- SimNetwork -----------------------------------------------------------

namespace {

class SimStream final : public StreamConnection {
public:
    SimStream(SimNetwork& net, EventLoop& loop, const FlowKey& key, const SimEndpoint* ep,
              StreamHandler handler, bool dropped)
        : net_(net), loop_(loop), key_(key), ep_(ep), handler_(std::move(handler)) {
        net_.record({ExternalTraceEvent::Kind::Connect, key_, loop_.now_ns(), 0, 0});

        if (!ep_) {
            schedule(0, [this] {
                if (handler_.on_connect_failed)
                    handler_.on_connect_failed(ConnectFailReason::Unreachable);
            });
            return;
        }
        if (dropped || ep_->behavior == SimEndpoint::Behavior::Blackhole) {
            return;  // SYN vanishes; the engine's timeout decides
        }
        if (ep_->behavior == SimEndpoint::Behavior::Refuse) {
            schedule(ep_->oracle_rtt_ns(), [this] {
                if (handler_.on_connect_failed)
                    handler_.on_connect_failed(ConnectFailReason::Refused);
            });
            return;
        }
        schedule(ep_->oracle_rtt_ns(), [this] { accept(); });
    }

    ~SimStream() override { *alive_ = false; }

    void send(std::span<const uint8_t> data) override {
        if (closed_ || !connected_) return;
        sent_hash_ = fnv1a64(data, sent_hash_);
        net_.record(
            {ExternalTraceEvent::Kind::StreamSend, key_, loop_.now_ns(), data.size(), sent_hash_});
        if (ep_->mode == SimEndpoint::Mode::Echo) {
            std::vector<uint8_t> copy(data.begin(), data.end());
            schedule(ep_->oracle_rtt_ns(),
                     [this, copy = std::move(copy)]() mutable { deliver_data(std::move(copy)); });
        }
    }

    size_t pending_send() const override { return 0; }  // the virtual wire is instant

    void shutdown_write() override {
        if (closed_ || shutdown_sent_) return;
        shutdown_sent_ = true;
        net_.record({ExternalTraceEvent::Kind::StreamShutdown, key_, loop_.now_ns(), 0, 0});
        // Echo and sink servers close once the client half-closes.
        if (connected_ && ep_ &&
            (ep_->mode == SimEndpoint::Mode::Echo || ep_->mode == SimEndpoint::Mode::Sink)) {
            schedule(ep_->oracle_rtt_ns(), [this] { deliver_eof(); });
        }
    }

    void close() override {
        if (closed_) return;
        closed_ = true;
        net_.record({ExternalTraceEvent::Kind::StreamClose, key_, loop_.now_ns(), 0, 0});
        *alive_ = false;
    }

    void pause_reading(bool paused) override {
        paused_ = paused;
        if (!paused_) {
            while (!held_data_.empty() && !paused_ && !closed_) {
                auto chunk = std::move(held_data_.front());
                held_data_.pop_front();
                if (handler_.on_data) handler_.on_data(std::move(chunk));
            }
            if (held_eof_ && !paused_ && !closed_) {
                held_eof_ = false;
                deliver_eof();
            }
        }
    }

private:
    void schedule(uint64_t delay_ns, std::function<void()> fn) {
        loop_.schedule_after(delay_ns, [alive = alive_, fn = std::move(fn)] {
            if (*alive) fn();
        });
    }

    void accept() {
        connected_ = true;
        net_.record({ExternalTraceEvent::Kind::Connected, key_, loop_.now_ns(), 0, 0});
        if (handler_.on_connected) handler_.on_connected();
        if (ep_->mode == SimEndpoint::Mode::Script) {
            const uint64_t step = ep_->delay_ns;
            uint64_t at = step;
            for (const auto& item : ep_->script) {
                std::vector<uint8_t> copy = item;
                schedule(at, [this, copy = std::move(copy)]() mutable {
                    deliver_data(std::move(copy));
                });
                at += step;
            }
            schedule(at, [this] { deliver_eof(); });
        }
    }

    void deliver_data(std::vector<uint8_t> bytes) {
        if (closed_) return;
        if (paused_) {
            held_data_.push_back(std::move(bytes));
            return;
        }
        if (handler_.on_data) handler_.on_data(std::move(bytes));
    }

    void deliver_eof() {
        if (closed_ || eof_sent_) return;
        if (paused_) {
            held_eof_ = true;
            return;
        }
        eof_sent_ = true;
        if (handler_.on_peer_closed) handler_.on_peer_closed();
    }

    SimNetwork& net_;
    EventLoop& loop_;
    FlowKey key_;
    const SimEndpoint* ep_;
    StreamHandler handler_;
    std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
    bool connected_ = false;
    bool closed_ = false;
    bool shutdown_sent_ = false;
    bool eof_sent_ = false;
    bool paused_ = false;
    bool held_eof_ = false;
    std::deque<std::vector<uint8_t>> held_data_;
    uint64_t sent_hash_ = 0xcbf29ce484222325ull;
};

class SimDatagram final : public DatagramEndpoint {
public:
    SimDatagram(SimNetwork& net, EventLoop& loop, const FlowKey& key, const SimEndpoint* ep,
                std::mt19937* drop_rng, std::function<void(std::vector<uint8_t>)> on_reply)
        : net_(net), loop_(loop), key_(key), ep_(ep), drop_rng_(drop_rng),
          on_reply_(std::move(on_reply)) {
        net_.record({ExternalTraceEvent::Kind::DgramOpen, key_, loop_.now_ns(), 0, 0});
    }

    ~SimDatagram() override { *alive_ = false; }

    bool send(std::span<const uint8_t> payload) override {
        net_.record({ExternalTraceEvent::Kind::DgramSend, key_, loop_.now_ns(), payload.size(),
                     fnv1a64(payload)});
        if (!ep_) return true;  // no such host: datagram vanishes
        switch (ep_->behavior) {
            case SimEndpoint::Behavior::Refuse:
            case SimEndpoint::Behavior::Blackhole:
                return true;
            case SimEndpoint::Behavior::Drop: {
                std::uniform_real_distribution<double> dist(0.0, 1.0);
                if (drop_rng_ && dist(*drop_rng_) < ep_->drop_probability) return true;
                break;
            }
            case SimEndpoint::Behavior::Accept:
                break;
        }

        std::vector<uint8_t> reply;
        if (ep_->mode == SimEndpoint::Mode::Echo) {
            reply.assign(payload.begin(), payload.end());
        } else if (ep_->mode == SimEndpoint::Mode::Script) {
            if (script_index_ >= ep_->script.size()) return true;
            reply = ep_->script[script_index_++];
        } else {
            return true;  // sink
        }
        loop_.schedule_after(ep_->oracle_rtt_ns(),
                             [alive = alive_, this, reply = std::move(reply)]() mutable {
                                 if (*alive && on_reply_) on_reply_(std::move(reply));
                             });
        return true;
    }

private:
    SimNetwork& net_;
    EventLoop& loop_;
    FlowKey key_;
    const SimEndpoint* ep_;
    std::mt19937* drop_rng_;
    std::function<void(std::vector<uint8_t>)> on_reply_;
    std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
    size_t script_index_ = 0;
};

}  // namespace

SimNetwork::SimNetwork(EventLoop& loop, std::vector<SimEndpoint> endpoints)
    : loop_(loop), endpoints_(std::move(endpoints)) {
    for (const auto& ep : endpoints_) {
        if (ep.behavior == SimEndpoint::Behavior::Drop) {
            drop_rngs_.emplace(std::make_pair(ep.addr, ep.port),
                               std::mt19937(static_cast<uint32_t>(ep.drop_seed)));
        }
    }
}

const SimEndpoint* SimNetwork::find_endpoint(Ipv4Addr addr, uint16_t port) const {
    for (const auto& ep : endpoints_) {
        if (ep.addr == addr && ep.port == port) return &ep;
    }
    return nullptr;
}

std::unique_ptr<StreamConnection> SimNetwork::open_stream(const FlowKey& key,
                                                          StreamHandler handler) {
    const SimEndpoint* ep = find_endpoint(key.dst, key.dst_port);
    bool dropped = false;
    if (ep && ep->behavior == SimEndpoint::Behavior::Drop) {
        auto it = drop_rngs_.find(std::make_pair(ep->addr, ep->port));
        std::uniform_real_distribution<double> dist(0.0, 1.0);
        dropped = it != drop_rngs_.end() && dist(it->second) < ep->drop_probability;
    }
    return std::make_unique<SimStream>(*this, loop_, key, ep, std::move(handler), dropped);
}

std::unique_ptr<DatagramEndpoint> SimNetwork::open_datagram(
    const FlowKey& key, std::function<void(std::vector<uint8_t>)> on_reply) {
    const SimEndpoint* ep = find_endpoint(key.dst, key.dst_port);
    std::mt19937* rng = nullptr;
    if (ep && ep->behavior == SimEndpoint::Behavior::Drop) {
        auto it = drop_rngs_.find(std::make_pair(ep->addr, ep->port));
        if (it != drop_rngs_.end()) rng = &it->second;
    }
    return std::make_unique<SimDatagram>(*this, loop_, key, ep, rng, std::move(on_reply));
}

// --- Scenario JSON --------------------------------------------------------

namespace {

uint64_t ms_to_ns(double ms) { return static_cast<uint64_t>(std::llround(ms * 1e6)); }

SimEndpoint endpoint_from_json(const nlohmann::json& j) {
    SimEndpoint ep;
    ep.addr = Ipv4Addr::parse(j.at("addr").get<std::string>());
    ep.port = j.at("port").get<uint16_t>();
    const std::string behavior = j.value("behavior", "accept");
    if (behavior == "accept") ep.behavior = SimEndpoint::Behavior::Accept;
    else if (behavior == "refuse") ep.behavior = SimEndpoint::Behavior::Refuse;
    else if (behavior == "blackhole") ep.behavior = SimEndpoint::Behavior::Blackhole;
    else if (behavior == "drop") ep.behavior = SimEndpoint::Behavior::Drop;
    else throw std::runtime_error("bad endpoint behavior: " + behavior);
    ep.delay_ns = ms_to_ns(j.value("delay_ms", 0.0));
    const std::string mode = j.value("mode", "echo");
    if (mode == "echo") ep.mode = SimEndpoint::Mode::Echo;
    else if (mode == "sink") ep.mode = SimEndpoint::Mode::Sink;
    else if (mode == "script") ep.mode = SimEndpoint::Mode::Script;
    else throw std::runtime_error("bad endpoint mode: " + mode);
    if (j.contains("script")) {
        for (const auto& item : j.at("script")) {
            ep.script.push_back(from_hex(item.get<std::string>()));
        }
    }
    ep.drop_probability = j.value("drop_probability", 0.0);
    ep.drop_seed = j.value("drop_seed", uint64_t{0});
    return ep;
}

void parse_host_port(const std::string& s, Ipv4Addr& addr, uint16_t& port) {
    const auto colon = s.rfind(':');
    if (colon == std::string::npos) throw std::runtime_error("expected addr:port, got " + s);
    addr = Ipv4Addr::parse(s.substr(0, colon));
    port = static_cast<uint16_t>(std::stoul(s.substr(colon + 1)));
}

ClientOp op_from_json(const nlohmann::json& j) {
    ClientOp op;
    const std::string kind = j.at("op").get<std::string>();
    if (kind == "open") op.kind = ClientOp::Kind::Open;
    else if (kind == "send") op.kind = ClientOp::Kind::Send;
    else if (kind == "close") op.kind = ClientOp::Kind::Close;
    else if (kind == "abort") op.kind = ClientOp::Kind::Abort;
    else if (kind == "udp") op.kind = ClientOp::Kind::Udp;
    else throw std::runtime_error("bad client op: " + kind);
    op.src_port = j.at("src_port").get<uint16_t>();
    if (j.contains("dst")) parse_host_port(j.at("dst").get<std::string>(), op.dst, op.dst_port);
    if (j.contains("hex")) op.payload = from_hex(j.at("hex").get<std::string>());
    op.random_bytes = j.value("random_bytes", size_t{0});
    if (j.contains("at_ms")) op.at_ns = ms_to_ns(j.at("at_ms").get<double>());
    op.wait = j.value("wait", true);
    return op;
}

}  // namespace

Scenario Scenario::from_json_text(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    Scenario s;
    s.seed = j.value("seed", uint64_t{0});
    s.real_clock = j.value("clock", std::string("virtual")) == "real";
    if (j.contains("timeout_ms")) {
        s.relay.connect_timeout_ns = ms_to_ns(j.at("timeout_ms").get<double>());
    }
    s.relay.isn_seed = s.seed;
    if (j.contains("endpoints")) {
        for (const auto& e : j.at("endpoints")) s.endpoints.push_back(endpoint_from_json(e));
    }
    if (j.contains("apps")) {
        for (auto it = j.at("apps").begin(); it != j.at("apps").end(); ++it) {
            s.apps[static_cast<uint16_t>(std::stoul(it.key()))] = it.value().get<std::string>();
        }
    }
    if (j.contains("client")) {
        for (const auto& o : j.at("client")) s.client.push_back(op_from_json(o));
    }
    return s;
}

Scenario Scenario::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scenario: " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json_text(text);
}

// --- AppDriver -------------------------------------------------------------

AppDriver::AppDriver(EventLoop& loop, PacketChannel& channel, const Scenario& scenario,
                     TraceBundle* bundle)
    : loop_(loop),
      channel_(channel),
      scenario_(scenario),
      bundle_(bundle),
      payload_rng_(scenario.seed ^ 0x9e3779b97f4a7c15ull) {}

void AppDriver::start() {
    channel_.subscribe([this](std::vector<uint8_t> raw) { on_packet(std::move(raw)); });
    run_next_op();
}

void AppDriver::run_next_op() {
    while (next_op_ < scenario_.client.size()) {
        const size_t index = next_op_++;
        const ClientOp& op = scenario_.client[index];
        if (op.at_ns) {
            ++inflight_ops_;
            loop_.schedule_at(*op.at_ns, [this, index] { begin_op(index); });
            continue;  // scheduled ops run independently of the chain
        }
        ++inflight_ops_;
        begin_op(index);
        if (op.wait && waiting_op_ == index) return;  // chain paused until completion
    }
    maybe_finish();
}

void AppDriver::begin_op(size_t index) {
    const ClientOp& op = scenario_.client[index];
    ClientFlow& flow = flows_by_port_[op.src_port];

    switch (op.kind) {
        case ClientOp::Kind::Open: {
            flow.result.key =
                FlowKey{Proto::Tcp, app_addr(), op.src_port, op.dst, op.dst_port};
            flow.isn = initial_sequence(scenario_.seed * 1000003ull + op.src_port);
            flow.snd_nxt = flow.isn;
            flow.snd_una = flow.isn;
            TcpSegment syn;
            syn.src_port = op.src_port;
            syn.dst_port = op.dst_port;
            syn.seq = flow.isn;
            syn.flags = tcp_flags::kSyn;
            syn.window = 65535;
            syn.options = TcpSegment::make_mss_option(flow.mss);
            flow.syn_sent = true;
            flow.result.syn_sent_ns = loop_.now_ns();
            send_raw(flow, syn);
            flow.snd_nxt = flow.isn + 1;
            if (op.wait && !op.at_ns) waiting_op_ = index;
            pending_.push_back({index, op.src_port, op.kind, 0});
            return;
        }
        case ClientOp::Kind::Send: {
            std::vector<uint8_t> payload = op.payload;
            if (op.random_bytes > 0) {
                payload.resize(op.random_bytes);
                for (auto& b : payload) b = static_cast<uint8_t>(payload_rng_() & 0xff);
            }
            if (flow.result.reset || (!flow.result.established && !flow.syn_sent)) {
                op_done(index);
                return;
            }
            if (flow.result.first_send_ns == 0) flow.result.first_send_ns = loop_.now_ns();
            flow.result.bytes_sent += payload.size();
            flow.result.sent_hash = fnv1a64(payload, flow.result.sent_hash);
            flow.send_queue.insert(flow.send_queue.end(), payload.begin(), payload.end());
            const uint32_t target =
                flow.isn + 1 + static_cast<uint32_t>(flow.send_queue.size());
            pending_.push_back({index, op.src_port, op.kind, target});
            if (op.wait && !op.at_ns) waiting_op_ = index;
            pump_sends(op.src_port);
            check_completions(op.src_port);
            return;
        }
        case ClientOp::Kind::Close: {
            flow.want_fin = true;
            const uint32_t target =
                flow.isn + 1 + static_cast<uint32_t>(flow.send_queue.size()) + 1;
            pending_.push_back({index, op.src_port, op.kind, target});
            if (op.wait && !op.at_ns) waiting_op_ = index;
            pump_sends(op.src_port);
            check_completions(op.src_port);
            return;
        }
        case ClientOp::Kind::Abort: {
            if (flow.syn_sent && !flow.result.reset) {
                TcpSegment rst;
                rst.src_port = op.src_port;
                rst.dst_port = flow.result.key.dst_port;
                rst.seq = flow.snd_nxt;
                rst.flags = tcp_flags::kRst;
                rst.window = 0;
                send_raw(flow, rst);
                flow.result.reset = true;
            }
            op_done(index);
            return;
        }
        case ClientOp::Kind::Udp: {
            UdpDatagram dgram;
            dgram.src_port = op.src_port;
            dgram.dst_port = op.dst_port;
            dgram.payload = op.payload;
            const auto pkt = make_udp_packet(app_addr(), op.dst, dgram);
            write_packet(pkt);
            op_done(index);
            return;
        }
    }
}

void AppDriver::op_done(size_t index) {
    --inflight_ops_;
    if (waiting_op_ == index) {
        waiting_op_ = SIZE_MAX;
        run_next_op();
        return;
    }
    maybe_finish();
}

void AppDriver::maybe_finish() {
    if (!finished_ && next_op_ >= scenario_.client.size() && inflight_ops_ == 0) {
        finished_ = true;
    }
}

std::map<uint16_t, AppFlowResult> AppDriver::flows() const {
    std::map<uint16_t, AppFlowResult> out;
    for (const auto& [port, flow] : flows_by_port_) out.emplace(port, flow.result);
    return out;
}

const AppFlowResult* AppDriver::flow(uint16_t src_port) const {
    auto it = flows_by_port_.find(src_port);
    return it == flows_by_port_.end() ? nullptr : &it->second.result;
}

void AppDriver::send_segment(ClientFlow& flow, uint8_t flags, std::span<const uint8_t> payload) {
    TcpSegment seg;
    seg.src_port = flow.result.key.src_port;
    seg.dst_port = flow.result.key.dst_port;
    seg.seq = flow.snd_nxt;
    seg.ack = flow.rcv_nxt;
    seg.flags = flags;
    seg.window = 65535;
    seg.payload.assign(payload.begin(), payload.end());
    send_raw(flow, seg);
}

void AppDriver::send_raw(ClientFlow& flow, const TcpSegment& seg) {
    const auto pkt = make_tcp_packet(app_addr(), flow.result.key.dst, seg);
    write_packet(pkt);
}

void AppDriver::write_packet(const Ipv4Packet& pkt) {
    const auto bytes = serialize_ipv4(pkt);
    if (bundle_) {
        bundle_->tunnel_packets.push_back({loop_.now_ns(), false, bytes});
    }
    channel_.write_packet(bytes);
}

void AppDriver::pump_sends(uint16_t src_port) {
    auto it = flows_by_port_.find(src_port);
    if (it == flows_by_port_.end()) return;
    ClientFlow& flow = it->second;
    if (!flow.result.established || flow.result.reset) return;

    while (flow.send_off < flow.send_queue.size()) {
        const uint32_t inflight = flow.snd_nxt - flow.snd_una;
        if (inflight >= kWindow) break;
        const size_t room = kWindow - inflight;
        const size_t remaining = flow.send_queue.size() - flow.send_off;
        const size_t n = std::min({static_cast<size_t>(flow.mss), room, remaining});
        uint8_t flags = tcp_flags::kAck;
        if (flow.send_off + n == flow.send_queue.size()) flags |= tcp_flags::kPsh;
        send_segment(flow, flags,
                     std::span<const uint8_t>(flow.send_queue.data() + flow.send_off, n));
        flow.snd_nxt += static_cast<uint32_t>(n);
        flow.send_off += n;
    }
    if (flow.want_fin && !flow.fin_sent && flow.send_off == flow.send_queue.size()) {
        send_segment(flow, tcp_flags::kFin | tcp_flags::kAck, {});
        flow.fin_sent = true;
        flow.snd_nxt += 1;
    }
}

void AppDriver::on_packet(std::vector<uint8_t> raw) {
    if (bundle_) {
        // Engine-emitted packets are recorded on the engine side; nothing to do.
    }
    Ipv4Packet pkt;
    try {
        pkt = parse_ipv4(raw);
    } catch (const PacketError&) {
        return;
    }
    if (pkt.is_udp()) {
        const auto dgram = parse_udp(pkt);
        if (bundle_) bundle_->udp_replies[dgram.dst_port].push_back(dgram.payload);
        return;
    }
    if (!pkt.is_tcp()) return;
    const auto seg = parse_tcp(pkt);
    handle_tcp_reply(pkt, seg);
}

void AppDriver::handle_tcp_reply(const Ipv4Packet&, const TcpSegment& seg) {
    auto it = flows_by_port_.find(seg.dst_port);
    if (it == flows_by_port_.end()) return;
    ClientFlow& flow = it->second;

    if (seg.rst()) {
        flow.result.reset = true;
        fail_flow_ops(seg.dst_port);
        return;
    }

    if (seg.syn() && seg.ack_set()) {
        if (!flow.result.established) {
            flow.result.established = true;
            flow.result.synack_ns = loop_.now_ns();
            flow.rcv_nxt = seg.seq + 1;
            flow.snd_una = flow.isn + 1;
        }
        send_segment(flow, tcp_flags::kAck, {});  // completes (or re-acks) the handshake
        pump_sends(seg.dst_port);
        check_completions(seg.dst_port);
        return;
    }

    // Cumulative ack processing.
    if (seg.ack_set() && seq_lt(flow.snd_una, seg.ack) && seq_le(seg.ack, flow.snd_nxt)) {
        flow.snd_una = seg.ack;
        if (flow.fin_sent && flow.snd_una == flow.snd_nxt) {
            flow.fin_acked = true;
            flow.result.closed = true;
        }
        pump_sends(seg.dst_port);
    }

    bool advanced = false;
    if (!seg.payload.empty()) {
        if (seg.seq == flow.rcv_nxt) {
            flow.result.received.insert(flow.result.received.end(), seg.payload.begin(),
                                        seg.payload.end());
            flow.rcv_nxt += static_cast<uint32_t>(seg.payload.size());
            advanced = true;
            if (flow.result.received.size() == flow.result.bytes_sent &&
                flow.result.bytes_sent > 0) {
                flow.result.echo_complete_ns = loop_.now_ns();
            }
        }
        send_segment(flow, tcp_flags::kAck, {});  // ack in-order data or duplicate-ack
    }
    if (seg.fin()) {
        if (seg.seq + seg.payload.size() == flow.rcv_nxt || seg.seq == flow.rcv_nxt) {
            if (!flow.result.server_fin) {
                flow.rcv_nxt += 1;
                flow.result.server_fin = true;
            }
            send_segment(flow, tcp_flags::kAck, {});
        } else {
            send_segment(flow, tcp_flags::kAck, {});
        }
    }
    (void)advanced;
    check_completions(seg.dst_port);
}

void AppDriver::fail_flow_ops(uint16_t src_port) {
    std::vector<size_t> done;
    for (const auto& p : pending_) {
        if (p.src_port == src_port) done.push_back(p.op_index);
    }
    pending_.erase(std::remove_if(pending_.begin(), pending_.end(),
                                  [src_port](const PendingOp& p) {
                                      return p.src_port == src_port;
                                  }),
                   pending_.end());
    for (size_t index : done) op_done(index);
}

void AppDriver::check_completions(uint16_t src_port) {
    auto it = flows_by_port_.find(src_port);
    if (it == flows_by_port_.end()) return;
    ClientFlow& flow = it->second;

    std::vector<size_t> done;
    for (auto& p : pending_) {
        if (p.src_port != src_port || p.completed) continue;
        bool complete = false;
        switch (p.kind) {
            case ClientOp::Kind::Open:
                complete = flow.result.established || flow.result.reset;
                break;
            case ClientOp::Kind::Send:
            case ClientOp::Kind::Close:
                complete = flow.result.reset || seq_le(p.target_ack, flow.snd_una);
                break;
            default:
                complete = true;
                break;
        }
        if (complete) {
            p.completed = true;
            done.push_back(p.op_index);
        }
    }
    pending_.erase(std::remove_if(pending_.begin(), pending_.end(),
                                  [](const PendingOp& p) { return p.completed; }),
                   pending_.end());
    for (size_t index : done) op_done(index);
}

// --- TraceBundle ------------------------------------------------------------

std::string TraceBundle::to_jsonl() const {
    using ordered_json = nlohmann::ordered_json;
    std::string out;
    for (const auto& s : samples) {
        EventLogRecord ev;
        ev.kind = EventLogRecord::Kind::Sample;
        ev.sample = s;
        out += StatsStore::to_jsonl(ev) + "\n";
    }
    for (const auto& f : failures) {
        EventLogRecord ev;
        ev.kind = EventLogRecord::Kind::Failure;
        ev.failure = f;
        out += StatsStore::to_jsonl(ev) + "\n";
    }
    for (const auto& e : external_events) {
        ordered_json j;
        j["kind"] = "external";
        j["event"] = trace_event_name(e.kind);
        j["at_ns"] = e.at_ns;
        j["flow"] = e.key.to_string();
        j["bytes"] = e.bytes;
        j["payload_hash"] = e.payload_hash;
        out += j.dump() + "\n";
    }
    for (const auto& [port, flow] : app_flows) {
        ordered_json j;
        j["kind"] = "app_flow";
        j["src_port"] = port;
        j["flow"] = flow.key.to_string();
        j["established"] = flow.established;
        j["reset"] = flow.reset;
        j["closed"] = flow.closed;
        j["bytes_sent"] = flow.bytes_sent;
        j["bytes_received"] = flow.received.size();
        j["received_hash"] = fnv1a64(flow.received);
        j["sent_hash"] = flow.sent_hash;
        out += j.dump() + "\n";
    }
    {
        ordered_json j;
        j["kind"] = "counters";
        j["packets_in"] = counters.packets_in;
        j["packets_out"] = counters.packets_out;
        j["bad_checksum_drops"] = counters.bad_checksum_drops;
        j["flow_table_full"] = counters.flow_table_full;
        j["queue_overflow_drops"] = counters.queue_overflow_drops;
        out += j.dump() + "\n";
    }
    return out;
}

uint64_t TraceBundle::hash() const { return fnv1a64(to_jsonl()); }

void TraceBundle::write_capture(const std::string& path) const {
    std::vector<const TunnelPacket*> ordered;
    ordered.reserve(tunnel_packets.size());
    for (const auto& p : tunnel_packets) ordered.push_back(&p);
    std::stable_sort(ordered.begin(), ordered.end(),
                     [](const TunnelPacket* a, const TunnelPacket* b) { return a->ts_ns < b->ts_ns; });
    CaptureWriter writer(path);
    for (const auto* p : ordered) writer.add(p->ts_ns, p->bytes);
    writer.flush();
}

// --- run_scenario -----------------------------------------------------------

TraceBundle run_scenario(const Scenario& scenario, StatsStore* stats) {
    MonotonicClock real_clock;
    VirtualClock virtual_clock;
    Clock& clock = scenario.real_clock ? static_cast<Clock&>(real_clock)
                                       : static_cast<Clock&>(virtual_clock);
    EventLoop loop(clock);

    auto channels = SimChannel::make_pair(loop);
    SimNetwork net(loop, scenario.endpoints);
    StatsStore local_stats;
    StatsStore& store = stats ? *stats : local_stats;
    MapResolver resolver(scenario.apps);

    RelayEngine engine(loop, *channels.a, net, store, scenario.relay, &resolver);

    TraceBundle bundle;
    engine.on_sample = [&bundle](const RttSample& s) { bundle.samples.push_back(s); };
    engine.on_failure = [&bundle](const FailureRecord& f) { bundle.failures.push_back(f); };
    engine.on_emit = [&bundle](uint64_t ts, std::span<const uint8_t> bytes) {
        bundle.tunnel_packets.push_back(
            {ts, true, std::vector<uint8_t>(bytes.begin(), bytes.end())});
    };
    engine.start();

    AppDriver driver(loop, *channels.b, scenario, &bundle);
    driver.start();

    if (scenario.real_clock) {
        // Give the scripted run a generous real-time budget.
        const uint64_t deadline = clock.now_ns() + 60 * kSecond;
        loop.run_until([&] {
            return (driver.finished() && engine.active_tcp_flows() == 0) ||
                   clock.now_ns() > deadline;
        });
    } else {
        loop.run();  // drains to quiescence, lingers included
    }

    bundle.app_flows = driver.flows();
    bundle.counters = engine.counters();
    bundle.external_events = net.events();
    bundle.driver_finished = driver.finished();
    return bundle;
}

// --- audit -------------------------------------------------------------------

std::vector<std::string> audit_zero_injection(const TraceBundle& bundle,
                                              const Scenario& scenario) {
    std::vector<std::string> violations;

    std::map<FlowKey, bool> scripted_opens;
    std::map<FlowKey, std::vector<uint64_t>> scripted_udp_hashes;
    for (const auto& op : scenario.client) {
        if (op.kind == ClientOp::Kind::Open) {
            scripted_opens[FlowKey{Proto::Tcp, AppDriver::app_addr(), op.src_port, op.dst,
                                   op.dst_port}] = true;
        } else if (op.kind == ClientOp::Kind::Udp) {
            scripted_udp_hashes[FlowKey{Proto::Udp, AppDriver::app_addr(), op.src_port, op.dst,
                                        op.dst_port}]
                .push_back(fnv1a64(op.payload));
        }
    }

    std::map<FlowKey, size_t> connects;
    std::map<FlowKey, std::pair<size_t, uint64_t>> stream_totals;  // bytes, final hash
    std::map<FlowKey, std::vector<uint64_t>> dgram_hashes;
    std::map<FlowKey, uint64_t> connected_at;

    for (const auto& ev : bundle.external_events) {
        switch (ev.kind) {
            case ExternalTraceEvent::Kind::Connect:
                connects[ev.key] += 1;
                if (!scripted_opens.count(ev.key)) {
                    violations.push_back("connect without a scripted open: " + ev.key.to_string());
                }
                break;
            case ExternalTraceEvent::Kind::Connected:
                connected_at.emplace(ev.key, ev.at_ns);
                break;
            case ExternalTraceEvent::Kind::StreamSend: {
                auto&总 = stream_totals[ev.key];
                总.first += ev.bytes;
                总.second = ev.payload_hash;
                if (!scripted_opens.count(ev.key)) {
                    violations.push_back("stream bytes without a scripted open: " +
                                         ev.key.to_string());
                }
                break;
            }
            case ExternalTraceEvent::Kind::StreamShutdown:
            case ExternalTraceEvent::Kind::StreamClose:
                if (!scripted_opens.count(ev.key)) {
                    violations.push_back("stream control without a scripted open: " +
                                         ev.key.to_string());
                }
                break;
            case ExternalTraceEvent::Kind::DgramOpen:
                if (!scripted_udp_hashes.count(ev.key)) {
                    violations.push_back("datagram endpoint without a scripted send: " +
                                         ev.key.to_string());
                }
                break;
            case ExternalTraceEvent::Kind::DgramSend:
                dgram_hashes[ev.key].push_back(ev.payload_hash);
                break;
        }
    }

    for (const auto& [key, count] : connects) {
        if (count > 1) {
            violations.push_back("multiple external connects for one flow: " + key.to_string());
        }
    }

    // Externally sent stream bytes must be exactly what the app sent (or a
    // prefix of it if back-pressure dropped the tail).
    for (const auto& [key, totals] : stream_totals) {
        const AppFlowResult* app = nullptr;
        for (const auto& [port, flow] : bundle.app_flows) {
            if (flow.key == key) {
                app = &flow;
                break;
            }
        }
        if (!app) {
            violations.push_back("external bytes for a flow no app owns: " + key.to_string());
            continue;
        }
        if (totals.first > app->bytes_sent) {
            violations.push_back("more bytes sent externally than the app produced: " +
                                 key.to_string());
        } else if (totals.first == app->bytes_sent && totals.second != app->sent_hash) {
            violations.push_back("external byte stream diverges from the app's: " +
                                 key.to_string());
        }
    }

    for (const auto& [key, hashes] : dgram_hashes) {
        auto it = scripted_udp_hashes.find(key);
        if (it == scripted_udp_hashes.end()) {
            violations.push_back("datagram sent for a flow never scripted: " + key.to_string());
            continue;
        }
        if (hashes.size() > it->second.size()) {
            violations.push_back("more datagrams than scripted: " + key.to_string());
            continue;
        }
        for (size_t i = 0; i < hashes.size(); ++i) {
            if (hashes[i] != it->second[i]) {
                violations.push_back("datagram payload diverges from script: " + key.to_string());
                break;
            }
        }
    }

    // The honest-handshake rule: no SYN-ACK before CONNECTED.
    for (const auto& pkt : bundle.tunnel_packets) {
        if (!pkt.to_app) continue;
        Ipv4Packet ip;
        try {
            ip = parse_ipv4(pkt.bytes);
        } catch (const PacketError&) {
            continue;
        }
        if (!ip.is_tcp()) continue;
        const auto seg = parse_tcp(ip);
        if (!(seg.syn() && seg.ack_set())) continue;
        // Reverse the emission direction to recover the flow key.
        const FlowKey key{Proto::Tcp, ip.dst_addr, seg.dst_port, ip.src_addr, seg.src_port};
        auto it = connected_at.find(key);
        if (it == connected_at.end()) {
            violations.push_back("SYN-ACK emitted for a flow that never connected: " +
                                 key.to_string());
        } else if (pkt.ts_ns < it->second) {
            violations.push_back("SYN-ACK emitted before CONNECTED: " + key.to_string());
        }
    }

    return violations;
}

// --- overhead experiment ------------------------------------------------------

namespace {

// Minimal blocking echo server on 127.0.0.1, one connection at a time.
class EchoServer {
public:
    EchoServer() {
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
        int opt = 1;
        setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &opt, sizeof(opt));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        sa.sin_port = 0;
        if (bind(listen_fd_, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0 ||
            listen(listen_fd_, 64) != 0) {
            throw std::runtime_error("echo server setup failed");
        }
        socklen_t len = sizeof(sa);
        getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&sa), &len);
        port_ = ntohs(sa.sin_port);
        thread_ = std::thread([this] { serve(); });
    }

    ~EchoServer() {
        stop_ = true;
        ::shutdown(listen_fd_, SHUT_RDWR);
        ::close(listen_fd_);
        if (thread_.joinable()) thread_.join();
    }

    uint16_t port() const { return port_; }

private:
    void serve() {
        while (!stop_) {
            const int conn = ::accept(listen_fd_, nullptr, nullptr);
            if (conn < 0) break;
            uint8_t buf[65536];
            while (true) {
                const ssize_t n = ::read(conn, buf, sizeof(buf));
                if (n <= 0) break;
                ssize_t off = 0;
                while (off < n) {
                    const ssize_t w = ::write(conn, buf + off, static_cast<size_t>(n - off));
                    if (w <= 0) break;
                    off += w;
                }
            }
            ::close(conn);
        }
    }

    int listen_fd_ = -1;
    uint16_t port_ = 0;
    std::atomic<bool> stop_{false};
    std::thread thread_;
};

OverheadStats summarize_overhead(std::vector<double> direct, std::vector<double> relayed) {
    OverheadStats stats;
    stats.direct_ms = direct;
    stats.relayed_ms = relayed;
    const size_t n = std::min(direct.size(), relayed.size());
    std::vector<double> overhead(n);
    for (size_t i = 0; i < n; ++i) overhead[i] = relayed[i] - direct[i];

    std::vector<double> sorted = overhead;
    std::sort(sorted.begin(), sorted.end());
    stats.median_overhead_ms =
        n == 0 ? 0 : (n % 2 ? sorted[n / 2] : (sorted[n / 2 - 1] + sorted[n / 2]) / 2);

    double mean = 0;
    for (double v : overhead) mean += v;
    mean = n ? mean / static_cast<double>(n) : 0;
    double var = 0;
    for (double v : overhead) var += (v - mean) * (v - mean);
    var = n > 1 ? var / static_cast<double>(n - 1) : 0;
    const double half = n ? 1.96 * std::sqrt(var / static_cast<double>(n)) : 0;
    stats.mean_overhead_ms = mean;
    stats.ci95_lo_ms = mean - half;
    stats.ci95_hi_ms = mean + half;
    return stats;
}

double direct_connect_ms(Ipv4Addr addr, uint16_t port, const Clock& clock) {
    const RttSample s = time_connect_socket(addr, port, kSecond, clock);
    return static_cast<double>(s.rtt_ns) / 1e6;
}

double direct_echo_ms(Ipv4Addr addr, uint16_t port, size_t bytes, const Clock& clock) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(addr.value);
    sa.sin_port = htons(port);
    if (::connect(fd, reinterpret_cast<sockaddr*>(&sa), sizeof(sa)) != 0) {
        ::close(fd);
        return 0;
    }
    std::vector<uint8_t> payload(bytes, 0x42);
    std::vector<uint8_t> back(bytes);

    const uint64_t t0 = clock.now_ns();
    size_t sent = 0;
    while (sent < payload.size()) {
        const ssize_t w = ::write(fd, payload.data() + sent, payload.size() - sent);
        if (w <= 0) break;
        sent += static_cast<size_t>(w);
    }
    size_t got = 0;
    while (got < back.size()) {
        const ssize_t r = ::read(fd, back.data() + got, back.size() - got);
        if (r <= 0) break;
        got += static_cast<size_t>(r);
    }
    const uint64_t t1 = clock.now_ns();
    ::close(fd);
    return static_cast<double>(t1 - t0) / 1e6;
}

}  // namespace

OverheadReport overhead_experiment(int runs, size_t echo_bytes) {
    EchoServer server;
    MonotonicClock clock;

    OverheadReport report;
    report.runs = runs;

    std::vector<double> relay_connect, relay_echo, direct_connect, direct_echo;

    EventLoop loop(clock);
    auto channels = SimChannel::make_pair(loop);
    SocketNetwork net(loop);
    StatsStore stats;
    RelayConfig cfg;
    RelayEngine engine(loop, *channels.a, net, stats, cfg, nullptr);
    engine.start();

    const Ipv4Addr loopback(127, 0, 0, 1);

    for (int i = 0; i < runs; ++i) {
        Scenario s;
        s.seed = static_cast<uint64_t>(i);
        s.real_clock = true;
        ClientOp open;
        open.kind = ClientOp::Kind::Open;
        open.src_port = static_cast<uint16_t>(21000 + i);
        open.dst = loopback;
        open.dst_port = server.port();
        ClientOp send;
        send.kind = ClientOp::Kind::Send;
        send.src_port = open.src_port;
        send.random_bytes = echo_bytes;
        ClientOp close;
        close.kind = ClientOp::Kind::Close;
        close.src_port = open.src_port;
        s.client = {open, send, close};

        TraceBundle bundle;
        AppDriver driver(loop, *channels.b, s, &bundle);
        driver.start();
        const uint64_t deadline = clock.now_ns() + 20 * kSecond;
        loop.run_until([&] {
            if (clock.now_ns() > deadline) return true;
            const AppFlowResult* f = driver.flow(open.src_port);
            if (!f) return false;
            return f->reset || (f->closed && f->received.size() >= echo_bytes);
        });

        const AppFlowResult& flow = *driver.flow(open.src_port);
        if (flow.synack_ns > flow.syn_sent_ns && flow.echo_complete_ns > flow.first_send_ns) {
            relay_connect.push_back(static_cast<double>(flow.synack_ns - flow.syn_sent_ns) / 1e6);
            relay_echo.push_back(
                static_cast<double>(flow.echo_complete_ns - flow.first_send_ns) / 1e6);
            direct_connect.push_back(direct_connect_ms(loopback, server.port(), clock));
            direct_echo.push_back(direct_echo_ms(loopback, server.port(), echo_bytes, clock));
        }
    }

    engine.shutdown_all();
    loop.run_for(10 * kMillisecond);

    report.handshake = summarize_overhead(direct_connect, relay_connect);
    report.data_path = summarize_overhead(direct_echo, relay_echo);
    return report;
}

std::string overhead_report_text(const OverheadReport& report) {
    char buf[512];
    std::string out;
    std::snprintf(buf, sizeof(buf),
                  "handshake overhead: median %.3f ms, mean %.3f ms (95%% CI %.3f..%.3f), n=%d\n",
                  report.handshake.median_overhead_ms, report.handshake.mean_overhead_ms,
                  report.handshake.ci95_lo_ms, report.handshake.ci95_hi_ms, report.runs);
    out += buf;
    std::snprintf(buf, sizeof(buf),
                  "data-path overhead: median %.3f ms, mean %.3f ms (95%% CI %.3f..%.3f), n=%d\n",
                  report.data_path.median_overhead_ms, report.data_path.mean_overhead_ms,
                  report.data_path.ci95_lo_ms, report.data_path.ci95_hi_ms, report.runs);
    out += buf;
    return out;
}

}  // namespace netlens
