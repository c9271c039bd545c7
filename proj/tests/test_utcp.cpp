#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "netlens/utcp.hpp"
#include "support/table_interpreter.hpp"

using namespace netlens;
using namespace netlens::testing;

namespace {

const std::string kTablePath = std::string(NETLENS_SOURCE_DIR) + "/docs/tcp_transitions.json";

FlowKey test_key() {
    return FlowKey{Proto::Tcp, Ipv4Addr(10, 0, 0, 2), 43512, Ipv4Addr(31, 13, 79, 251), 443};
}

TcpSegment app_segment(uint8_t flags, uint32_t seq, uint32_t ack, std::vector<uint8_t> payload = {}) {
    TcpSegment seg;
    seg.src_port = 43512;
    seg.dst_port = 443;
    seg.flags = flags;
    seg.seq = seq;
    seg.ack = ack;
    seg.window = 65535;
    seg.payload = std::move(payload);
    return seg;
}

TcpSegment app_syn(uint32_t isn, uint16_t mss = 1460) {
    auto seg = app_segment(tcp_flags::kSyn, isn, 0);
    seg.options = TcpSegment::make_mss_option(mss);
    return seg;
}

std::vector<uint8_t> bytes(size_t n, uint8_t fill = 0x5a) { return std::vector<uint8_t>(n, fill); }

// Drives the machine and the table interpreter in lockstep and fails on any
// trace divergence.
struct LockstepMachine {
    TcpFlowState state;
    TableInterpreter oracle;

    LockstepMachine(uint32_t iss, uint16_t app_mss = 1460)
        : state(make_flow_state(test_key(), iss, 1)), oracle(kTablePath, iss) {
        (void)app_mss;
    }

    std::vector<TcpAction> tunnel(const TcpSegment& seg) {
        auto result = on_tunnel_segment(state, seg);
        auto expected = oracle.on_tunnel(seg);
        compare(result, expected);
        state = std::move(result.state);
        return std::move(result.actions);
    }

    std::vector<TcpAction> external(const ExternalEvent& ev) {
        auto result = on_external_event(state, ev);
        auto expected = oracle.on_external(ev);
        compare(result, expected);
        state = std::move(result.state);
        return std::move(result.actions);
    }

    void compare(const TransitionResult& got, const TableInterpreter::Step& expected) {
        std::vector<std::string> got_actions;
        for (const auto& a : got.actions) got_actions.push_back(a.describe());
        auto join = [](const std::vector<std::string>& v) {
            std::string s;
            for (const auto& x : v) s += x + " | ";
            return s;
        };
        const std::string got_s = join(got_actions);
        const std::string want_s = join(expected.actions);
        CAPTURE(got_s);
        CAPTURE(want_s);
        REQUIRE(got_actions == expected.actions);
        REQUIRE(std::string(phase_name(got.state.phase)) == expected.phase);
    }
};

void check_conservation(const TcpFlowState& st) {
    if (st.synack_sent) {
        const uint32_t sent = st.snd_nxt - st.iss;
        const uint32_t expected = 1 + static_cast<uint32_t>(st.payload_bytes_emitted) +
                                  (st.fin_sent ? 1 : 0);
        REQUIRE(sent == expected);
    }
    if (st.phase != TcpPhase::Closed) {
        const uint32_t consumed = st.rcv_nxt - st.peer_isn;
        const uint32_t expected = 1 + static_cast<uint32_t>(st.payload_bytes_delivered) +
                                  (st.peer_fin_seen ? 1 : 0);
        REQUIRE(consumed == expected);
    }
}

}  // namespace

TEST_CASE("initial_sequence is deterministic and seed-sensitive") {
    CHECK(initial_sequence(0) == 0x7b1dcdaf);  // documented constant
    CHECK(initial_sequence(0) == initial_sequence(0));
    CHECK(initial_sequence(1) != initial_sequence(0));
    CHECK(initial_sequence(12345) == initial_sequence(12345));
}

TEST_CASE("initial_sequence passes a coarse chi-square uniformity check") {
    // 10^4 seeded draws into 16 buckets; 15 dof critical value at 0.01.
    int buckets[16] = {};
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        ++buckets[initial_sequence(seed) >> 28];
    }
    const double expected = 10000.0 / 16.0;
    double chi2 = 0;
    for (int b : buckets) chi2 += (b - expected) * (b - expected) / expected;
    CHECK(chi2 < 30.578);
}

TEST_CASE("SYN opens the external side without answering yet") {
    auto st = make_flow_state(test_key(), 5000, 1);
    auto [next, actions] = on_tunnel_segment(st, app_syn(1000, 1460));

    CHECK(next.phase == TcpPhase::SynSeen);
    CHECK(next.rcv_nxt == 1001);  // SYN consumes one sequence number
    CHECK(next.peer_mss == 1460);
    REQUIRE(actions.size() == 1);
    CHECK(actions[0].kind == TcpAction::Kind::OpenExternal);
    CHECK(actions[0].key == test_key());
    // No SYN-ACK before the external CONNECTED event.
    for (const auto& a : actions) CHECK(a.kind != TcpAction::Kind::EmitSegment);
}

TEST_CASE("CONNECTED in SYN_SEEN emits the SYN-ACK") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000)).state;
    auto [next, actions] = on_external_event(st, ExternalEvent::connected());

    CHECK(next.phase == TcpPhase::SynSeen);  // still awaiting the app's ACK
    CHECK(next.snd_nxt == 5001);
    REQUIRE(actions.size() == 1);
    REQUIRE(actions[0].kind == TcpAction::Kind::EmitSegment);
    const auto& seg = actions[0].segment;
    CHECK(seg.flags == (tcp_flags::kSyn | tcp_flags::kAck));
    CHECK(seg.seq == 5000);
    CHECK(seg.ack == 1001);
    CHECK(seg.src_port == 443);  // impersonating the server
    CHECK(seg.dst_port == 43512);

    auto established = on_tunnel_segment(next, app_segment(tcp_flags::kAck, 1001, 5001));
    CHECK(established.state.phase == TcpPhase::Established);
}

TEST_CASE("in-order data delivers and acks") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1999)).state;  // rcv_nxt = 2000
    st = on_external_event(st, ExternalEvent::connected()).state;
    st = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 2000, 5001)).state;
    REQUIRE(st.phase == TcpPhase::Established);
    REQUIRE(st.rcv_nxt == 2000);

    auto [next, actions] =
        on_tunnel_segment(st, app_segment(tcp_flags::kAck | tcp_flags::kPsh, 2000, 5001, bytes(100)));
    CHECK(next.rcv_nxt == 2100);
    REQUIRE(actions.size() == 2);
    CHECK(actions[0].kind == TcpAction::Kind::DeliverPayload);
    CHECK(actions[0].payload.size() == 100);
    REQUIRE(actions[1].kind == TcpAction::Kind::EmitSegment);
    CHECK(actions[1].segment.ack == 2100);

    // Out-of-order data: duplicate ACK, nothing delivered.
    auto [ooo_state, ooo_actions] =
        on_tunnel_segment(next, app_segment(tcp_flags::kAck, 2500, 5001, bytes(10)));
    CHECK(ooo_state.rcv_nxt == 2100);
    REQUIRE(ooo_actions.size() == 1);
    REQUIRE(ooo_actions[0].kind == TcpAction::Kind::EmitSegment);
    CHECK(ooo_actions[0].segment.ack == 2100);
    CHECK(ooo_actions[0].segment.payload.empty());
}

TEST_CASE("server data is segmented to the peer MSS") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000, 1460)).state;
    st = on_external_event(st, ExternalEvent::connected()).state;
    st = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 1001, 5001)).state;

    auto [next, actions] = on_external_event(st, ExternalEvent::data_arrived(bytes(3000)));
    REQUIRE(actions.size() == 3);
    size_t sizes[3];
    uint32_t seqs[3];
    for (int i = 0; i < 3; ++i) {
        REQUIRE(actions[i].kind == TcpAction::Kind::EmitSegment);
        sizes[i] = actions[i].segment.payload.size();
        seqs[i] = actions[i].segment.seq;
    }
    CHECK(sizes[0] == 1460);
    CHECK(sizes[1] == 1460);
    CHECK(sizes[2] == 80);
    CHECK(seqs[0] == 5001);
    CHECK(seqs[1] == 5001 + 1460);
    CHECK(seqs[2] == 5001 + 2920);
    CHECK(next.snd_nxt == 5001 + 3000);
    // PSH only on the final segment.
    CHECK_FALSE(actions[0].segment.has(tcp_flags::kPsh));
    CHECK(actions[2].segment.has(tcp_flags::kPsh));
}

TEST_CASE("connect failure resets the app flow") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000)).state;
    auto [next, actions] =
        on_external_event(st, ExternalEvent::connect_failed(ConnectFailReason::Refused));
    CHECK(next.phase == TcpPhase::Aborted);
    REQUIRE(actions.size() == 1);
    CHECK(actions[0].kind == TcpAction::Kind::Reset);
    CHECK(actions[0].segment.rst());
}

TEST_CASE("stray segment on a closed flow is reset") {
    auto st = make_flow_state(test_key(), 5000, 1);
    auto [next, actions] = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 777, 0, bytes(5)));
    CHECK(next.phase == TcpPhase::Closed);
    REQUIRE(actions.size() == 1);
    CHECK(actions[0].kind == TcpAction::Kind::Reset);
    CHECK(actions[0].segment.ack == 782);
}

TEST_CASE("app FIN propagates a graceful external close") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000)).state;
    st = on_external_event(st, ExternalEvent::connected()).state;
    st = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 1001, 5001)).state;

    auto [next, actions] = on_tunnel_segment(st, app_segment(tcp_flags::kFin | tcp_flags::kAck, 1001, 5001));
    CHECK(next.phase == TcpPhase::FinWaitRemote);
    CHECK(next.rcv_nxt == 1002);
    REQUIRE(actions.size() == 2);
    CHECK(actions[0].kind == TcpAction::Kind::EmitSegment);
    CHECK(actions[0].segment.ack == 1002);
    CHECK(actions[1].kind == TcpAction::Kind::CloseExternal);
    CHECK_FALSE(actions[1].hard);

    // Server finishes later: FIN emitted, then the final ACK lands in TIME_WAIT.
    auto [closing, fin_actions] = on_external_event(next, ExternalEvent::peer_closed());
    CHECK(closing.phase == TcpPhase::Closing);
    REQUIRE(fin_actions.size() == 1);
    CHECK(fin_actions[0].segment.fin());
    auto [done, last] = on_tunnel_segment(closing, app_segment(tcp_flags::kAck, 1002, closing.snd_nxt));
    CHECK(done.phase == TcpPhase::TimeWaitBrief);
    CHECK(last.empty());
    check_conservation(done);
}

TEST_CASE("server close first: FIN_WAIT_LOCAL path") {
    auto st = make_flow_state(test_key(), 9000, 1);
    st = on_tunnel_segment(st, app_syn(100)).state;
    st = on_external_event(st, ExternalEvent::connected()).state;
    st = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 101, 9001)).state;

    auto [fwl, actions] = on_external_event(st, ExternalEvent::peer_closed());
    CHECK(fwl.phase == TcpPhase::FinWaitLocal);
    REQUIRE(actions.size() == 1);
    CHECK(actions[0].segment.fin());
    CHECK(fwl.snd_nxt == 9002);

    // The app can still send data in this half-closed state.
    auto [fwl2, data_actions] = on_tunnel_segment(fwl, app_segment(tcp_flags::kAck, 101, 9002, bytes(40)));
    CHECK(fwl2.phase == TcpPhase::FinWaitLocal);
    CHECK(fwl2.fin_acked);  // the ack covered our FIN
    REQUIRE(data_actions.size() == 2);
    CHECK(data_actions[0].kind == TcpAction::Kind::DeliverPayload);

    // App's own FIN completes the exchange.
    auto [tw, fin_actions] = on_tunnel_segment(fwl2, app_segment(tcp_flags::kFin | tcp_flags::kAck, 141, 9002));
    CHECK(tw.phase == TcpPhase::TimeWaitBrief);
    REQUIRE(fin_actions.size() == 2);
    CHECK(fin_actions[0].segment.ack == 142);
    CHECK(fin_actions[1].kind == TcpAction::Kind::CloseExternal);
    check_conservation(tw);
}

TEST_CASE("RST from the app aborts and closes external hard") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000)).state;
    st = on_external_event(st, ExternalEvent::connected()).state;
    auto [next, actions] = on_tunnel_segment(st, app_segment(tcp_flags::kRst, 1001, 0));
    CHECK(next.phase == TcpPhase::Aborted);
    REQUIRE(actions.size() == 1);
    CHECK(actions[0].kind == TcpAction::Kind::CloseExternal);
    CHECK(actions[0].hard);
}

TEST_CASE("server data racing the handshake ACK is buffered then flushed") {
    auto st = make_flow_state(test_key(), 5000, 1);
    st = on_tunnel_segment(st, app_syn(1000, 536)).state;
    st = on_external_event(st, ExternalEvent::connected()).state;

    auto [buffered, no_actions] = on_external_event(st, ExternalEvent::data_arrived(bytes(1000)));
    CHECK(no_actions.empty());
    CHECK(buffered.phase == TcpPhase::SynSeen);
    CHECK(buffered.pending_external.size() == 1000);

    auto [est, actions] = on_tunnel_segment(buffered, app_segment(tcp_flags::kAck, 1001, 5001));
    CHECK(est.phase == TcpPhase::Established);
    REQUIRE(actions.size() == 2);  // 536 + 464
    CHECK(actions[0].segment.payload.size() == 536);
    CHECK(actions[1].segment.payload.size() == 464);
    check_conservation(est);
}

TEST_CASE("scripted handshake+echo+FIN trace equals the table interpreter") {
    LockstepMachine m(5000);
    m.tunnel(app_syn(1000, 1460));
    m.external(ExternalEvent::connected());
    m.tunnel(app_segment(tcp_flags::kAck, 1001, 5001));
    m.tunnel(app_segment(tcp_flags::kAck | tcp_flags::kPsh, 1001, 5001, bytes(64)));
    m.external(ExternalEvent::data_arrived(bytes(64)));
    m.tunnel(app_segment(tcp_flags::kAck, 1065, 5001 + 64));
    m.tunnel(app_segment(tcp_flags::kFin | tcp_flags::kAck, 1065, 5065));
    m.external(ExternalEvent::peer_closed());
    m.tunnel(app_segment(tcp_flags::kAck, 1066, m.state.snd_nxt));
    CHECK(m.state.phase == TcpPhase::TimeWaitBrief);
    check_conservation(m.state);
}

// Randomized event sequences, machine vs. table interpreter, with exact
// conservation checks at the end of every run.
TEST_CASE("randomized scenarios agree with the interpreter (1000 seeds)") {
    for (uint32_t seed = 0; seed < 1000; ++seed) {
        CAPTURE(seed);
        std::mt19937 rng(seed);
        auto pct = [&rng](int p) { return static_cast<int>(rng() % 100) < p; };

        const uint32_t app_isn = rng();
        const uint32_t iss = initial_sequence(seed);
        const uint16_t mss_choices[4] = {0, 536, 1460, 8960};
        const uint16_t app_mss = mss_choices[rng() % 4];

        LockstepMachine m(iss);

        // Occasional stray traffic before the SYN.
        if (pct(10)) {
            m.tunnel(app_segment(tcp_flags::kAck, rng(), rng(), bytes(rng() % 64)));
        }

        auto syn = app_mss == 0 ? app_segment(tcp_flags::kSyn, app_isn, 0) : app_syn(app_isn, app_mss);
        m.tunnel(syn);
        

        // App-side mirror of sequence numbers.
        uint32_t app_seq = app_isn + 1;
        uint32_t server_snd = iss + 1;  // valid once the SYN-ACK exists
        bool app_fin_sent = false;
        bool server_fin_seen = false;
        bool aborted = false;

        if (pct(5)) {
            m.tunnel(app_segment(tcp_flags::kRst, app_seq, 0));
            CHECK(m.state.phase == TcpPhase::Aborted);
            check_conservation(m.state);
            continue;
        }

        if (pct(10)) {
            m.external(ExternalEvent::connect_failed(
                pct(50) ? ConnectFailReason::Refused : ConnectFailReason::Timeout));
            CHECK(m.state.phase == TcpPhase::Aborted);
            check_conservation(m.state);
            continue;
        }

        if (pct(20)) m.tunnel(syn);  // retransmitted SYN before CONNECTED
        m.external(ExternalEvent::connected());
        if (pct(15)) m.tunnel(syn);  // retransmitted SYN after SYN-ACK

        // Server bytes or EOF racing the handshake ACK.
        uint64_t pre_established_bytes = 0;
        if (pct(20)) {
            const size_t n = 1 + rng() % 2000;
            m.external(ExternalEvent::data_arrived(bytes(n)));
            pre_established_bytes += n;
            server_snd += n;
        }
        if (pct(10)) {
            m.external(ExternalEvent::peer_closed());
            server_snd += 1;
            server_fin_seen = true;
        }

        // Handshake ACK, sometimes carrying payload.
        {
            std::vector<uint8_t> piggy;
            if (pct(10)) piggy = bytes(1 + rng() % 500);
            auto ack = app_segment(tcp_flags::kAck, app_seq, iss + 1, piggy);
            app_seq += static_cast<uint32_t>(piggy.size());
            m.tunnel(ack);
        }
        (void)pre_established_bytes;

        // Established-phase traffic.
        const int ops = static_cast<int>(rng() % 12);
        for (int i = 0; i < ops && !aborted; ++i) {
            switch (rng() % 6) {
                case 0: {  // in-order app data
                    if (app_fin_sent) break;
                    const size_t n = 1 + rng() % 3000;
                    m.tunnel(app_segment(tcp_flags::kAck, app_seq, server_snd, bytes(n)));
                    app_seq += static_cast<uint32_t>(n);
                    break;
                }
                case 1: {  // out-of-order app data
                    if (app_fin_sent) {
                        aborted = true;  // data after FIN aborts the flow
                        m.tunnel(app_segment(tcp_flags::kAck, app_seq, server_snd, bytes(10)));
                        break;
                    }
                    const uint32_t off = 1 + rng() % 1000;
                    m.tunnel(app_segment(tcp_flags::kAck, app_seq + off, server_snd, bytes(1 + rng() % 200)));
                    break;
                }
                case 2:  // pure ACK
                    m.tunnel(app_segment(tcp_flags::kAck, app_seq, server_snd));
                    break;
                case 3: {  // server data
                    if (server_fin_seen) break;
                    const size_t n = 1 + rng() % 5000;
                    m.external(ExternalEvent::data_arrived(bytes(n)));
                    server_snd += n;
                    break;
                }
                case 4: {  // server EOF (once)
                    if (server_fin_seen) break;
                    m.external(ExternalEvent::peer_closed());
                    server_fin_seen = true;
                    server_snd += 1;
                    break;
                }
                case 5: {  // app FIN (once)
                    if (app_fin_sent) break;
                    m.tunnel(app_segment(tcp_flags::kFin | tcp_flags::kAck, app_seq, server_snd));
                    app_seq += 1;
                    app_fin_sent = true;
                    break;
                }
            }
        }

        if (!aborted && pct(5)) {
            m.tunnel(app_segment(tcp_flags::kRst, app_seq, 0));
            aborted = true;
        }

        // Drive an orderly finish when the flow is still alive.
        if (!aborted) {
            if (!server_fin_seen && pct(60)) {
                m.external(ExternalEvent::peer_closed());
                server_fin_seen = true;
                server_snd += 1;
            }
            if (!app_fin_sent && pct(80)) {
                m.tunnel(app_segment(tcp_flags::kFin | tcp_flags::kAck, app_seq, server_snd));
                app_seq += 1;
                app_fin_sent = true;
            }
            // Final ACK for whatever the machine last sent.
            m.tunnel(app_segment(tcp_flags::kAck, app_seq, server_snd));
            if (pct(20)) {  // retransmitted final FIN
                if (app_fin_sent) {
                    m.tunnel(app_segment(tcp_flags::kFin | tcp_flags::kAck, app_seq - 1, server_snd));
                }
            }
        }

        check_conservation(m.state);

        // Every delivered byte was acknowledged: rcv_nxt covers exactly what
        // was consumed, so a final ACK emission must carry ack == rcv_nxt.
        if (m.state.phase == TcpPhase::Established) {
            auto probe = on_tunnel_segment(m.state, app_segment(tcp_flags::kAck, app_seq + 7, server_snd, bytes(1)));
            REQUIRE(probe.actions.size() == 1);
            CHECK(probe.actions[0].segment.ack == m.state.rcv_nxt);
        }
    }
}

TEST_CASE("sequence numbers wrap safely across 2^32") {
    const uint32_t iss = 0xffffff00u;  // will wrap during the run
    auto st = make_flow_state(test_key(), iss, 1);
    st = on_tunnel_segment(st, app_syn(0xfffffff0u, 1460)).state;
    CHECK(st.rcv_nxt == 0xfffffff1u);
    st = on_external_event(st, ExternalEvent::connected()).state;
    st = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 0xfffffff1u, iss + 1)).state;
    REQUIRE(st.phase == TcpPhase::Established);

    // 512 bytes of app data crossing the wrap point.
    auto r = on_tunnel_segment(st, app_segment(tcp_flags::kAck, 0xfffffff1u, iss + 1, bytes(512)));
    CHECK(r.state.rcv_nxt == 0xfffffff1u + 512);  // wraps modulo 2^32
    CHECK(r.state.rcv_nxt == 0x000001f1u);

    // 600 bytes of server data crossing our wrap point.
    auto r2 = on_external_event(r.state, ExternalEvent::data_arrived(bytes(600)));
    CHECK(r2.state.snd_nxt == static_cast<uint32_t>(iss + 1 + 600));
    check_conservation(r2.state);
}
