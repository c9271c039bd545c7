#pragma once

#include <cstdint>
#include <vector>

#include "netlens/packet.hpp"

namespace netlens {

// App-facing TCP state machine. The relay impersonates the remote server
// toward the app: it answers the app's SYN only after the real outbound
// connection succeeds, acknowledges in-order data, segments server bytes to
// the peer's MSS, and mirrors teardown.
//
// Both transition functions are pure: (state, input) -> (state', actions).
// The engine interprets the returned actions; nothing here does I/O. The
// transition table is published in docs/tcp_transitions.json and the test
// suite replays randomized event sequences against an interpreter of that
// table.
enum class TcpPhase : uint8_t {
    Closed,
    SynSeen,       // tunnel SYN received, external connect pending or unacked SYN-ACK
    Established,
    FinWaitLocal,  // we sent FIN (server side closed first)
    FinWaitRemote, // app sent FIN first
    Closing,       // our FIN sent and peer FIN consumed, awaiting its ACK
    TimeWaitBrief,
    Aborted,
};

const char* phase_name(TcpPhase p);

struct TcpFlowState {
    TcpPhase phase = TcpPhase::Closed;
    FlowKey key;             // app endpoint is the source
    uint64_t splice_ref = 0; // paired external-connection id; nonzero once open

    uint32_t iss = 0;      // our initial sequence number
    uint32_t snd_nxt = 0;  // next seq we will send (mod 2^32)
    uint32_t rcv_nxt = 0;  // next seq expected from the app
    uint32_t peer_isn = 0;

    uint16_t peer_mss = 536;  // RFC 1122 default until the SYN says otherwise
    uint16_t local_mss = 1460;
    uint16_t advertised_window = 65535;

    bool synack_sent = false;
    bool fin_sent = false;
    bool fin_acked = false;
    bool peer_fin_seen = false;
    bool peer_closed_pending = false;  // server EOF arrived before ESTABLISHED

    // Server bytes that arrived between CONNECTED and the app's handshake ACK.
    std::vector<uint8_t> pending_external;

    // Conservation counters (checked by the property suite).
    uint64_t payload_bytes_emitted = 0;    // toward the app
    uint64_t payload_bytes_delivered = 0;  // toward the server
};

// Creates the CLOSED-state machine for a flow. `iss` is chosen by the caller
// (see initial_sequence) so replays are deterministic.
TcpFlowState make_flow_state(const FlowKey& key, uint32_t iss, uint64_t splice_ref,
                             uint16_t local_mss = 1460);

struct TcpAction {
    enum class Kind {
        EmitSegment,     // write segment to the tunnel
        DeliverPayload,  // write bytes to the external connection
        OpenExternal,    // start the outbound connection for `key`
        CloseExternal,   // graceful: shut down the write half; hard: abort
        Drop,            // input intentionally ignored
        Reset,           // emit RST segment; flow is dead
    };

    Kind kind;
    TcpSegment segment;            // EmitSegment, Reset
    std::vector<uint8_t> payload;  // DeliverPayload
    FlowKey key;                   // OpenExternal
    bool hard = false;             // CloseExternal

    // Canonical one-line form used in transition-trace comparisons.
    std::string describe() const;
};

enum class ConnectFailReason : uint8_t { Refused, Unreachable, Timeout, Local };

struct ExternalEvent {
    enum class Kind : uint8_t { Connected, Data, PeerClosed, ConnectFailed };

    Kind kind;
    std::vector<uint8_t> data;  // Data
    ConnectFailReason reason = ConnectFailReason::Refused;

    static ExternalEvent connected() { return {Kind::Connected, {}, {}}; }
    static ExternalEvent data_arrived(std::vector<uint8_t> bytes) {
        return {Kind::Data, std::move(bytes), {}};
    }
    static ExternalEvent peer_closed() { return {Kind::PeerClosed, {}, {}}; }
    static ExternalEvent connect_failed(ConnectFailReason r) { return {Kind::ConnectFailed, {}, r}; }
};

struct TransitionResult {
    TcpFlowState state;
    std::vector<TcpAction> actions;
};

TransitionResult on_tunnel_segment(const TcpFlowState& state, const TcpSegment& seg);
TransitionResult on_external_event(const TcpFlowState& state, const ExternalEvent& ev);

// True when the engine can drop the flow entry (after linger for TimeWait).
inline bool phase_terminal(TcpPhase p) {
    return p == TcpPhase::Aborted || p == TcpPhase::TimeWaitBrief;
}

// Deterministic ISN: splitmix64 scramble of the seed, truncated to 32 bits.
// Fixed point of the contract: initial_sequence(0) == 0x7b1dcdaf.
uint32_t initial_sequence(uint64_t seed);

}  // namespace netlens
