#include "netlens/relay.hpp"

namespace netlens {

RelayEngine::RelayEngine(EventLoop& loop, PacketChannel& tunnel, ExternalNetwork& net,
                         StatsStore& stats, RelayConfig config, AttributionResolver* resolver)
    : loop_(loop),
      tunnel_(tunnel),
      net_(net),
      stats_(stats),
      cfg_(std::move(config)),
      resolver_(resolver) {}

RelayEngine::~RelayEngine() = default;

void RelayEngine::start() {
    tunnel_.subscribe([this](std::vector<uint8_t> raw) { on_tunnel_packet(std::move(raw)); });
}

void RelayEngine::on_tunnel_packet(std::vector<uint8_t> raw) {
    ++counters_.packets_in;

    Ipv4Packet pkt;
    try {
        pkt = parse_ipv4(raw);
    } catch (const PacketError& e) {
        if (e.kind() == PacketError::Kind::UnsupportedVersion && !raw.empty() &&
            (raw[0] >> 4) == 6) {
            ++counters_.ipv6_drops;
        } else {
            ++counters_.parse_errors;
        }
        return;
    }

    // Packets that fail checksum verification are never relayed outward.
    if (!pkt.checksum_valid) {
        ++counters_.bad_checksum_drops;
        return;
    }

    if (pkt.is_tcp()) {
        TcpSegment seg;
        try {
            seg = parse_tcp(pkt);
        } catch (const PacketError&) {
            ++counters_.parse_errors;
            return;
        }
        if (!seg.checksum_valid) {
            ++counters_.bad_checksum_drops;
            return;
        }
        handle_tcp(flow_key_of(pkt), seg);
    } else if (pkt.is_udp()) {
        UdpDatagram dgram;
        try {
            dgram = parse_udp(pkt);
        } catch (const PacketError&) {
            ++counters_.parse_errors;
            return;
        }
        if (!dgram.checksum_valid) {
            ++counters_.bad_checksum_drops;
            return;
        }
        handle_udp(flow_key_of(pkt), dgram);
    } else {
        ++counters_.unsupported_protocol_drops;
    }
}

// --- TCP ------------------------------------------------------------------

void RelayEngine::handle_tcp(const FlowKey& key, const TcpSegment& seg) {
    auto it = tcp_flows_.find(key);
    if (it == tcp_flows_.end()) {
        if (seg.syn() && !seg.ack_set() && !seg.rst()) {
            if (active_flows() >= cfg_.max_flows) {
                ++counters_.flow_table_full;
                emit_raw_reset(key, seg);
                return;
            }
            create_tcp_flow(key, seg);
        } else if (!seg.rst()) {
            emit_raw_reset(key, seg);  // stray segment for an unknown flow
        }
        return;
    }
    apply_tunnel(*it->second, seg);
}

void RelayEngine::create_tcp_flow(const FlowKey& key, const TcpSegment& syn) {
    auto entry = std::make_unique<TcpEntry>(loop_.clock());
    entry->key = key;
    entry->splice_id = next_splice_id_++;
    entry->opened_at_ns = loop_.now_ns();
    entry->app = table_.register_flow(key, resolver_, entry->opened_at_ns);
    entry->tcp = make_flow_state(key, initial_sequence(cfg_.isn_seed + entry->splice_id),
                                 entry->splice_id, cfg_.local_mss);

    TcpEntry& ref = *entry;
    tcp_flows_.emplace(key, std::move(entry));
    apply_tunnel(ref, syn);
}

void RelayEngine::apply_tunnel(TcpEntry& entry, const TcpSegment& seg) {
    // Admission control: in-order payload that would overflow the external
    // send queue is dropped unacknowledged; the app's stack retransmits
    // after the queue drains.
    if (!seg.payload.empty() && entry.external && seg.seq == entry.tcp.rcv_nxt &&
        entry.external->pending_send() + seg.payload.size() > cfg_.per_flow_queue_bytes) {
        ++counters_.queue_overflow_drops;
        return;
    }

    auto result = on_tunnel_segment(entry.tcp, seg);
    entry.tcp = std::move(result.state);
    run_actions(entry, result.actions);
}

void RelayEngine::apply_external(TcpEntry& entry, const ExternalEvent& ev) {
    auto result = on_external_event(entry.tcp, ev);
    entry.tcp = std::move(result.state);
    run_actions(entry, result.actions);
}

void RelayEngine::run_actions(TcpEntry& entry, const std::vector<TcpAction>& actions) {
    for (const auto& action : actions) {
        switch (action.kind) {
            case TcpAction::Kind::EmitSegment:
            case TcpAction::Kind::Reset:
                emit_segment(entry, action.segment);
                break;
            case TcpAction::Kind::DeliverPayload:
                if (entry.external) {
                    entry.external->send(action.payload);
                    entry.bytes_out += action.payload.size();
                }
                break;
            case TcpAction::Kind::OpenExternal:
                open_external(entry);
                break;
            case TcpAction::Kind::CloseExternal:
                if (entry.external) {
                    if (action.hard) {
                        entry.external->close();
                    } else {
                        entry.external->shutdown_write();
                    }
                }
                break;
            case TcpAction::Kind::Drop:
                break;
        }
    }
    finalize_if_terminal(entry);
}

void RelayEngine::open_external(TcpEntry& entry) {
    const FlowKey key = entry.key;
    StreamHandler handler;
    handler.on_connected = [this, key] {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        TcpEntry& e = *it->second;
        record_connect_result(e, ConnectOutcome::Success);
        apply_external(e, ExternalEvent::connected());
    };
    handler.on_connect_failed = [this, key](ConnectFailReason reason) {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        TcpEntry& e = *it->second;
        ConnectOutcome outcome = ConnectOutcome::Unreachable;
        if (reason == ConnectFailReason::Refused) outcome = ConnectOutcome::Refused;
        if (reason == ConnectFailReason::Timeout) outcome = ConnectOutcome::Timeout;
        record_connect_result(e, outcome);
        apply_external(e, ExternalEvent::connect_failed(reason));
    };
    handler.on_data = [this, key](std::vector<uint8_t> bytes) {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        TcpEntry& e = *it->second;
        e.bytes_in += bytes.size();
        apply_external(e, ExternalEvent::data_arrived(std::move(bytes)));
    };
    handler.on_peer_closed = [this, key] {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        apply_external(*it->second, ExternalEvent::peer_closed());
    };
    handler.on_error = [this, key](const std::string&) {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        TcpEntry& e = *it->second;
        // Transfer errors map to the connect-failed teardown: RST to the
        // app, hard close outward.
        record_connect_result(e, ConnectOutcome::Unreachable);
        apply_external(e, ExternalEvent::connect_failed(ConnectFailReason::Local));
    };

    // The bracket opens immediately before the establishment call; it closes
    // inside on_connected/on_connect_failed at readiness.
    entry.timer.arm();
    entry.external = net_.open_stream(key, std::move(handler));
    entry.connect_timer = loop_.schedule_after(cfg_.connect_timeout_ns, [this, key] {
        auto it = tcp_flows_.find(key);
        if (it == tcp_flows_.end()) return;
        TcpEntry& e = *it->second;
        e.connect_timer = 0;
        record_connect_result(e, ConnectOutcome::Timeout);
        if (e.external) e.external->close();
        apply_external(e, ExternalEvent::connect_failed(ConnectFailReason::Timeout));
    });
}

void RelayEngine::record_connect_result(TcpEntry& entry, ConnectOutcome outcome) {
    if (entry.connect_timer != 0) {
        loop_.cancel_timer(entry.connect_timer);
        entry.connect_timer = 0;
    }
    if (entry.sample_recorded) return;
    entry.sample_recorded = true;

    RttSample sample = entry.timer.complete(outcome);
    sample.key = entry.key;
    sample.app = entry.app.name;
    sample.network_tag = cfg_.network_tag;
    stats_.record(sample);
    if (on_sample) on_sample(sample);

    if (outcome != ConnectOutcome::Success) {
        FailureRecord failure;
        failure.key = entry.key;
        failure.app = entry.app.name;
        failure.cls = classify_failure(outcome, sample.rtt_ns, cfg_.connect_timeout_ns);
        failure.evidence = outcome_name(outcome);
        failure.wall_ns = sample.wall_ns;
        stats_.record(failure);
        if (on_failure) on_failure(failure);
    }
}

void RelayEngine::emit_segment(TcpEntry& entry, const TcpSegment& seg) {
    // Server-to-app direction: addresses reversed relative to the flow key.
    const auto bytes = serialize_ipv4(make_tcp_packet(entry.key.dst, entry.key.src, seg));
    if (entry.tunnel_backlog.empty() && tunnel_.write_packet(bytes)) {
        ++counters_.packets_out;
        if (on_emit) on_emit(loop_.now_ns(), bytes);
        return;
    }
    // Tunnel writer stalled: queue the packet and pause external reads until
    // the backlog drains.
    entry.backlog_bytes += bytes.size();
    entry.tunnel_backlog.push_back(bytes);
    if (entry.external) entry.external->pause_reading(true);
    if (entry.drain_timer == 0) {
        const FlowKey key = entry.key;
        entry.drain_timer = loop_.schedule_after(kMillisecond, [this, key] {
            auto it = tcp_flows_.find(key);
            if (it == tcp_flows_.end()) return;
            it->second->drain_timer = 0;
            drain_backlog(*it->second);
        });
    }
}

void RelayEngine::drain_backlog(TcpEntry& entry) {
    while (!entry.tunnel_backlog.empty()) {
        const auto& bytes = entry.tunnel_backlog.front();
        if (!tunnel_.write_packet(bytes)) break;
        ++counters_.packets_out;
        if (on_emit) on_emit(loop_.now_ns(), bytes);
        entry.backlog_bytes -= bytes.size();
        entry.tunnel_backlog.pop_front();
    }
    if (entry.tunnel_backlog.empty()) {
        if (entry.external) entry.external->pause_reading(false);
        return;
    }
    if (entry.drain_timer == 0) {
        const FlowKey key = entry.key;
        entry.drain_timer = loop_.schedule_after(kMillisecond, [this, key] {
            auto it = tcp_flows_.find(key);
            if (it == tcp_flows_.end()) return;
            it->second->drain_timer = 0;
            drain_backlog(*it->second);
        });
    }
}

void RelayEngine::emit_raw_reset(const FlowKey& key, const TcpSegment& offending) {
    auto temp = make_flow_state(key, 0, 0);
    auto result = on_tunnel_segment(temp, offending);
    for (const auto& action : result.actions) {
        if (action.kind == TcpAction::Kind::Reset) {
            write_tunnel(make_tcp_packet(key.dst, key.src, action.segment));
        }
    }
}

void RelayEngine::write_tunnel(const Ipv4Packet& pkt) {
    const auto bytes = serialize_ipv4(pkt);
    if (!tunnel_.write_packet(bytes)) {
        ++counters_.tunnel_write_failures;
        return;
    }
    ++counters_.packets_out;
    if (on_emit) on_emit(loop_.now_ns(), bytes);
}

void RelayEngine::finalize_if_terminal(TcpEntry& entry) {
    if (!phase_terminal(entry.tcp.phase) || entry.reaping) return;
    entry.reaping = true;

    if (entry.connect_timer != 0) {
        loop_.cancel_timer(entry.connect_timer);
        entry.connect_timer = 0;
    }
    if (!entry.sample_recorded) {
        // The flow died before the connect resolved (tunnel RST, operator
        // shutdown): classify by elapsed time.
        const uint64_t elapsed = loop_.now_ns() - entry.timer.started_at();
        record_connect_result(entry, elapsed >= cfg_.connect_timeout_ns
                                         ? ConnectOutcome::Timeout
                                         : ConnectOutcome::Canceled);
    }
    if (entry.external && entry.tcp.phase == TcpPhase::Aborted) {
        entry.external->close();
    }

    const FlowKey key = entry.key;
    table_.set_deadline(key, loop_.now_ns() + cfg_.time_wait_linger_ns);
    entry.reap_timer =
        loop_.schedule_after(cfg_.time_wait_linger_ns, [this, key] { reap(key); });
}

void RelayEngine::reap(const FlowKey& key) {
    auto it = tcp_flows_.find(key);
    if (it == tcp_flows_.end()) return;
    if (it->second->drain_timer != 0) loop_.cancel_timer(it->second->drain_timer);
    if (it->second->reap_timer != 0) loop_.cancel_timer(it->second->reap_timer);
    if (it->second->external) it->second->external->close();
    table_.remove(key);
    tcp_flows_.erase(it);
}

void RelayEngine::shutdown_flow(const FlowKey& key) {
    auto it = tcp_flows_.find(key);
    if (it == tcp_flows_.end()) return;
    TcpEntry& entry = *it->second;
    if (entry.reaping) return;  // second call is a no-op
    // connect_failed(Local) aborts every live phase: RST to the app, hard
    // close outward; terminal phases just drop it.
    apply_external(entry, ExternalEvent::connect_failed(ConnectFailReason::Local));
    if (!phase_terminal(entry.tcp.phase)) {
        // Flow was still mid-handshake bookkeeping; force the teardown.
        entry.tcp.phase = TcpPhase::Aborted;
        finalize_if_terminal(entry);
    }
}

void RelayEngine::shutdown_all() {
    std::vector<FlowKey> keys;
    keys.reserve(tcp_flows_.size());
    for (const auto& [key, entry] : tcp_flows_) keys.push_back(key);
    for (const auto& key : keys) {
        shutdown_flow(key);
        reap(key);  // no linger on operator shutdown
    }

    std::vector<FlowKey> udp_keys;
    udp_keys.reserve(udp_flows_.size());
    for (const auto& [key, entry] : udp_flows_) udp_keys.push_back(key);
    for (const auto& key : udp_keys) {
        auto it = udp_flows_.find(key);
        if (it != udp_flows_.end()) {
            if (it->second->expiry_timer != 0) loop_.cancel_timer(it->second->expiry_timer);
            table_.remove(key);
            udp_flows_.erase(it);
        }
    }
}

// --- UDP ------------------------------------------------------------------

void RelayEngine::handle_udp(const FlowKey& key, const UdpDatagram& dgram) {
    auto it = udp_flows_.find(key);
    if (it == udp_flows_.end()) {
        if (active_flows() >= cfg_.max_flows) {
            ++counters_.flow_table_full;
            return;  // drop; UDP has no reset to send
        }
        auto entry = std::make_unique<UdpEntry>();
        entry->key = key;
        entry->app = table_.register_flow(key, resolver_, loop_.now_ns());
        entry->external = net_.open_datagram(
            key, [this, key](std::vector<uint8_t> payload) { udp_reply(key, std::move(payload)); });
        it = udp_flows_.emplace(key, std::move(entry)).first;
    }

    UdpEntry& entry = *it->second;
    entry.last_active_ns = loop_.now_ns();
    table_.touch(key, entry.last_active_ns);
    table_.set_deadline(key, entry.last_active_ns + cfg_.udp_idle_expiry_ns);
    arm_udp_expiry(entry);

    if (!entry.external || !entry.external->send(dgram.payload)) {
        ++counters_.udp_send_failures;
        return;
    }
    entry.bytes_out += dgram.payload.size();
}

void RelayEngine::udp_reply(const FlowKey& key, std::vector<uint8_t> payload) {
    auto it = udp_flows_.find(key);
    if (it == udp_flows_.end()) return;
    UdpEntry& entry = *it->second;
    entry.last_active_ns = loop_.now_ns();
    entry.bytes_in += payload.size();

    // DNS replies are inspected (a pass-through copy) before forwarding.
    if (key.dst_port == 53) {
        const DnsAnswerSummary summary = inspect_dns(payload);
        if (!summary.valid) {
            ++counters_.malformed_dns;
        } else if (auto record = flag_misconfig(summary, cfg_.bogus_dns, key, entry.app.name,
                                                loop_.clock().wall_ns())) {
            stats_.record(*record);
            if (on_failure) on_failure(*record);
        }
    }

    UdpDatagram reply;
    reply.src_port = key.dst_port;
    reply.dst_port = key.src_port;
    reply.payload = std::move(payload);
    write_tunnel(make_udp_packet(key.dst, key.src, reply));
}

void RelayEngine::arm_udp_expiry(UdpEntry& entry) {
    if (entry.expiry_timer != 0) return;  // an armed timer re-checks on fire
    const FlowKey key = entry.key;
    const uint64_t deadline = entry.last_active_ns + cfg_.udp_idle_expiry_ns;
    entry.expiry_timer = loop_.schedule_at(deadline, [this, key] {
        auto it = udp_flows_.find(key);
        if (it == udp_flows_.end()) return;
        UdpEntry& e = *it->second;
        e.expiry_timer = 0;
        const uint64_t due = e.last_active_ns + cfg_.udp_idle_expiry_ns;
        if (loop_.now_ns() >= due) {
            table_.remove(key);
            udp_flows_.erase(it);
        } else {
            arm_udp_expiry(e);
        }
    });
}

}  // namespace netlens
