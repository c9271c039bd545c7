#include "netlens/utcp.hpp"

#include <algorithm>
#include <string>

namespace netlens {

const char* phase_name(TcpPhase p) {
    switch (p) {
        case TcpPhase::Closed: return "CLOSED";
        case TcpPhase::SynSeen: return "SYN_SEEN";
        case TcpPhase::Established: return "ESTABLISHED";
        case TcpPhase::FinWaitLocal: return "FIN_WAIT_LOCAL";
        case TcpPhase::FinWaitRemote: return "FIN_WAIT_REMOTE";
        case TcpPhase::Closing: return "CLOSING";
        case TcpPhase::TimeWaitBrief: return "TIME_WAIT_BRIEF";
        case TcpPhase::Aborted: return "ABORTED";
    }
    return "?";
}

std::string TcpAction::describe() const {
    switch (kind) {
        case Kind::EmitSegment: {
            std::string flags;
            if (segment.syn()) flags += 'S';
            if (segment.ack_set()) flags += 'A';
            if (segment.fin()) flags += 'F';
            if (segment.rst()) flags += 'R';
            return "EMIT " + flags + " seq=" + std::to_string(segment.seq) +
                   " ack=" + std::to_string(segment.ack) +
                   " len=" + std::to_string(segment.payload.size());
        }
        case Kind::DeliverPayload: return "DELIVER " + std::to_string(payload.size());
        case Kind::OpenExternal: return "OPEN";
        case Kind::CloseExternal: return hard ? "CLOSE hard" : "CLOSE";
        case Kind::Drop: return "DROP";
        case Kind::Reset:
            return "RESET seq=" + std::to_string(segment.seq) +
                   " ack=" + std::to_string(segment.ack);
    }
    return "?";
}

TcpFlowState make_flow_state(const FlowKey& key, uint32_t iss, uint64_t splice_ref,
                             uint16_t local_mss) {
    TcpFlowState st;
    st.key = key;
    st.iss = iss;
    st.snd_nxt = iss;
    st.splice_ref = splice_ref;
    st.local_mss = local_mss;
    return st;
}

uint32_t initial_sequence(uint64_t seed) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    return static_cast<uint32_t>(z);
}

namespace {

// Segments are emitted from the server's point of view: ports reversed
// relative to the app-origin flow key.
TcpSegment base_segment(const TcpFlowState& st) {
    TcpSegment seg;
    seg.src_port = st.key.dst_port;
    seg.dst_port = st.key.src_port;
    seg.window = st.advertised_window;
    return seg;
}

TcpAction emit_synack(const TcpFlowState& st) {
    TcpSegment seg = base_segment(st);
    seg.flags = tcp_flags::kSyn | tcp_flags::kAck;
    seg.seq = st.iss;
    seg.ack = st.rcv_nxt;
    seg.options = TcpSegment::make_mss_option(st.local_mss);
    return TcpAction{TcpAction::Kind::EmitSegment, std::move(seg), {}, {}, false};
}

TcpAction emit_ack(const TcpFlowState& st) {
    TcpSegment seg = base_segment(st);
    seg.flags = tcp_flags::kAck;
    seg.seq = st.snd_nxt;
    seg.ack = st.rcv_nxt;
    return TcpAction{TcpAction::Kind::EmitSegment, std::move(seg), {}, {}, false};
}

// RST answering a stray segment on a closed flow (no established state to
// draw numbers from).
TcpAction emit_stray_reset(const TcpFlowState& st, const TcpSegment& in) {
    TcpSegment seg = base_segment(st);
    seg.flags = tcp_flags::kRst | tcp_flags::kAck;
    seg.seq = in.ack_set() ? in.ack : 0;
    uint32_t consumed = static_cast<uint32_t>(in.payload.size());
    if (in.syn()) ++consumed;
    if (in.fin()) ++consumed;
    seg.ack = in.seq + consumed;
    return TcpAction{TcpAction::Kind::Reset, std::move(seg), {}, {}, false};
}

TcpAction emit_reset(const TcpFlowState& st) {
    TcpSegment seg = base_segment(st);
    seg.flags = tcp_flags::kRst | tcp_flags::kAck;
    seg.seq = st.snd_nxt;
    seg.ack = st.rcv_nxt;
    return TcpAction{TcpAction::Kind::Reset, std::move(seg), {}, {}, false};
}

TcpAction close_external(bool hard) {
    return TcpAction{TcpAction::Kind::CloseExternal, {}, {}, {}, hard};
}

TcpAction drop() { return TcpAction{TcpAction::Kind::Drop, {}, {}, {}, false}; }

// Abort used for protocol violations and events in invalid phases.
void abort_flow(TcpFlowState& st, std::vector<TcpAction>& actions, bool external_open) {
    actions.push_back(emit_reset(st));
    if (external_open) actions.push_back(close_external(true));
    st.phase = TcpPhase::Aborted;
}

// MSS-bounded data segments toward the app; PSH on the final one.
void emit_data_segments(TcpFlowState& st, std::vector<TcpAction>& actions,
                        std::span<const uint8_t> bytes) {
    size_t off = 0;
    while (off < bytes.size()) {
        const size_t n = std::min<size_t>(st.peer_mss, bytes.size() - off);
        TcpSegment seg = base_segment(st);
        seg.flags = tcp_flags::kAck;
        if (off + n == bytes.size()) seg.flags |= tcp_flags::kPsh;
        seg.seq = st.snd_nxt;
        seg.ack = st.rcv_nxt;
        seg.payload.assign(bytes.begin() + off, bytes.begin() + off + n);
        st.snd_nxt += static_cast<uint32_t>(n);
        st.payload_bytes_emitted += n;
        actions.push_back(TcpAction{TcpAction::Kind::EmitSegment, std::move(seg), {}, {}, false});
        off += n;
    }
}

void emit_fin(TcpFlowState& st, std::vector<TcpAction>& actions) {
    TcpSegment seg = base_segment(st);
    seg.flags = tcp_flags::kFin | tcp_flags::kAck;
    seg.seq = st.snd_nxt;
    seg.ack = st.rcv_nxt;
    st.snd_nxt += 1;
    st.fin_sent = true;
    actions.push_back(TcpAction{TcpAction::Kind::EmitSegment, std::move(seg), {}, {}, false});
}

// Emits whatever queued up while the handshake ACK was outstanding.
void flush_pending(TcpFlowState& st, std::vector<TcpAction>& actions) {
    if (!st.pending_external.empty()) {
        std::vector<uint8_t> bytes = std::move(st.pending_external);
        st.pending_external.clear();
        emit_data_segments(st, actions, bytes);
    }
    if (st.peer_closed_pending) {
        st.peer_closed_pending = false;
        emit_fin(st, actions);
        st.phase = TcpPhase::FinWaitLocal;
    }
}

bool pure_ack(const TcpSegment& seg) {
    return seg.ack_set() && !seg.syn() && !seg.fin() && !seg.rst() && seg.payload.empty();
}

}  // namespace

TransitionResult on_tunnel_segment(const TcpFlowState& state, const TcpSegment& seg) {
    TcpFlowState st = state;
    std::vector<TcpAction> actions;

    if (seg.rst()) {
        if (st.phase == TcpPhase::Closed || st.phase == TcpPhase::Aborted) {
            actions.push_back(drop());
        } else {
            actions.push_back(close_external(true));
            st.phase = TcpPhase::Aborted;
        }
        return {std::move(st), std::move(actions)};
    }

    switch (st.phase) {
        case TcpPhase::Closed: {
            if (seg.syn() && !seg.ack_set()) {
                st.phase = TcpPhase::SynSeen;
                st.peer_isn = seg.seq;
                st.rcv_nxt = seg.seq + 1;  // SYN consumes one sequence number
                if (auto mss = seg.mss_option()) st.peer_mss = *mss;
                actions.push_back(TcpAction{TcpAction::Kind::OpenExternal, {}, {}, st.key, false});
            } else {
                actions.push_back(emit_stray_reset(st, seg));
            }
            break;
        }

        case TcpPhase::SynSeen: {
            if (seg.syn() && !seg.ack_set()) {
                // Retransmitted SYN. Repeat the SYN-ACK if we already sent one.
                if (st.synack_sent) {
                    actions.push_back(emit_synack(st));
                } else {
                    actions.push_back(drop());
                }
            } else if (seg.syn()) {
                abort_flow(st, actions, true);
            } else if (st.synack_sent && seg.ack_set() && seg.ack == st.snd_nxt) {
                st.phase = TcpPhase::Established;
                flush_pending(st, actions);
                if (!seg.payload.empty() || seg.fin()) {
                    // Data or FIN piggybacked on the handshake ACK: reprocess
                    // through the established path.
                    auto follow = on_tunnel_segment(st, seg);
                    for (auto& a : follow.actions) actions.push_back(std::move(a));
                    st = std::move(follow.state);
                }
            } else {
                actions.push_back(drop());
            }
            break;
        }

        case TcpPhase::Established:
        case TcpPhase::FinWaitLocal: {
            if (seg.syn()) {
                abort_flow(st, actions, true);
                break;
            }
            if (st.fin_sent && seg.ack_set() && seg.ack == st.snd_nxt) st.fin_acked = true;

            if (seg.fin()) {
                if (st.peer_fin_seen || seg.seq != st.rcv_nxt) {
                    actions.push_back(emit_ack(st));  // duplicate or out of order
                    break;
                }
                if (!seg.payload.empty()) {
                    st.rcv_nxt += static_cast<uint32_t>(seg.payload.size());
                    st.payload_bytes_delivered += seg.payload.size();
                    actions.push_back(
                        TcpAction{TcpAction::Kind::DeliverPayload, {}, seg.payload, {}, false});
                }
                st.rcv_nxt += 1;  // FIN consumes one sequence number
                st.peer_fin_seen = true;
                actions.push_back(emit_ack(st));
                actions.push_back(close_external(false));
                if (st.phase == TcpPhase::Established) {
                    st.phase = TcpPhase::FinWaitRemote;
                } else {
                    st.phase = st.fin_acked ? TcpPhase::TimeWaitBrief : TcpPhase::Closing;
                }
                break;
            }
            if (!seg.payload.empty()) {
                if (seg.seq == st.rcv_nxt) {
                    st.rcv_nxt += static_cast<uint32_t>(seg.payload.size());
                    st.payload_bytes_delivered += seg.payload.size();
                    actions.push_back(
                        TcpAction{TcpAction::Kind::DeliverPayload, {}, seg.payload, {}, false});
                    actions.push_back(emit_ack(st));
                } else {
                    // Out of order: duplicate ACK, no delivery, no buffering.
                    actions.push_back(emit_ack(st));
                }
                break;
            }
            actions.push_back(drop());  // pure ACK
            break;
        }

        case TcpPhase::FinWaitRemote: {
            if (seg.fin()) {
                actions.push_back(emit_ack(st));  // retransmitted FIN
            } else if (pure_ack(seg)) {
                actions.push_back(drop());
            } else {
                // Data (or SYN) after the app's FIN is a protocol violation.
                abort_flow(st, actions, true);
            }
            break;
        }

        case TcpPhase::Closing: {
            if (seg.fin()) {
                actions.push_back(emit_ack(st));
            } else if (pure_ack(seg)) {
                if (seg.ack == st.snd_nxt) {
                    st.fin_acked = true;
                    st.phase = TcpPhase::TimeWaitBrief;
                } else {
                    actions.push_back(drop());
                }
            } else {
                abort_flow(st, actions, true);
            }
            break;
        }

        case TcpPhase::TimeWaitBrief: {
            if (seg.fin()) {
                actions.push_back(emit_ack(st));
            } else {
                actions.push_back(drop());
            }
            break;
        }

        case TcpPhase::Aborted: {
            actions.push_back(drop());
            break;
        }
    }

    return {std::move(st), std::move(actions)};
}

TransitionResult on_external_event(const TcpFlowState& state, const ExternalEvent& ev) {
    TcpFlowState st = state;
    std::vector<TcpAction> actions;

    if (st.phase == TcpPhase::Closed || st.phase == TcpPhase::Aborted ||
        st.phase == TcpPhase::TimeWaitBrief) {
        actions.push_back(drop());
        return {std::move(st), std::move(actions)};
    }

    switch (ev.kind) {
        case ExternalEvent::Kind::Connected: {
            if (st.phase == TcpPhase::SynSeen && !st.synack_sent) {
                st.synack_sent = true;
                st.snd_nxt = st.iss + 1;  // our SYN consumes one sequence number
                actions.push_back(emit_synack(st));
            } else {
                abort_flow(st, actions, true);
            }
            break;
        }

        case ExternalEvent::Kind::Data: {
            if (ev.data.empty()) {
                actions.push_back(drop());
                break;
            }
            if (st.phase == TcpPhase::SynSeen && st.synack_sent) {
                // Server data racing the app's handshake ACK: hold it.
                st.pending_external.insert(st.pending_external.end(), ev.data.begin(),
                                           ev.data.end());
            } else if (st.phase == TcpPhase::Established ||
                       st.phase == TcpPhase::FinWaitRemote) {
                emit_data_segments(st, actions, ev.data);
            } else {
                abort_flow(st, actions, true);
            }
            break;
        }

        case ExternalEvent::Kind::PeerClosed: {
            if (st.phase == TcpPhase::SynSeen && st.synack_sent) {
                st.peer_closed_pending = true;
            } else if (st.phase == TcpPhase::Established) {
                emit_fin(st, actions);
                st.phase = TcpPhase::FinWaitLocal;
            } else if (st.phase == TcpPhase::FinWaitRemote) {
                emit_fin(st, actions);
                st.phase = TcpPhase::Closing;
            } else {
                actions.push_back(drop());  // repeated EOF
            }
            break;
        }

        case ExternalEvent::Kind::ConnectFailed: {
            if (st.phase == TcpPhase::SynSeen && !st.synack_sent) {
                actions.push_back(emit_reset(st));
                st.phase = TcpPhase::Aborted;
            } else {
                abort_flow(st, actions, true);
            }
            break;
        }
    }

    return {std::move(st), std::move(actions)};
}

}  // namespace netlens
