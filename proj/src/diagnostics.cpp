#include "netlens/diagnostics.hpp"

#include "netlens/bytes.hpp"

namespace netlens {

const char* failure_class_name(FailureClass c) {
    switch (c) {
        case FailureClass::Timeout: return "timeout";
        case FailureClass::Refused: return "refused";
        case FailureClass::Unreachable: return "unreachable";
        case FailureClass::Canceled: return "canceled";
        case FailureClass::DnsMisconfig: return "dns_misconfig";
    }
    return "?";
}

namespace {

// Decodes a possibly-compressed name starting at `pos`. Returns false on any
// structural problem. `pos` is left after the name as it appears in place
// (a pointer terminates the in-place encoding).
bool decode_name(std::span<const uint8_t> msg, size_t& pos, std::string& out) {
    size_t p = pos;
    bool jumped = false;
    int hops = 0;
    while (true) {
        if (p >= msg.size()) return false;
        const uint8_t len = msg[p];
        if (len == 0) {
            if (!jumped) pos = p + 1;
            return true;
        }
        if ((len & 0xc0) == 0xc0) {
            if (p + 1 >= msg.size()) return false;
            if (++hops > 64) return false;  // pointer loop guard
            const size_t target = static_cast<size_t>(len & 0x3f) << 8 | msg[p + 1];
            if (target >= msg.size()) return false;
            if (!jumped) pos = p + 2;
            jumped = true;
            p = target;
            continue;
        }
        if ((len & 0xc0) != 0) return false;  // reserved label types
        if (p + 1 + len > msg.size()) return false;
        if (!out.empty()) out.push_back('.');
        out.append(reinterpret_cast<const char*>(msg.data() + p + 1), len);
        if (out.size() > 255) return false;
        p += 1 + len;
    }
}

}  // namespace

DnsAnswerSummary inspect_dns(std::span<const uint8_t> payload) {
    DnsAnswerSummary summary;
    if (payload.size() < 12) return summary;

    const uint16_t qdcount = load_be16(payload.data() + 4);
    const uint16_t ancount = load_be16(payload.data() + 6);
    summary.response_code = payload[3] & 0x0f;

    size_t pos = 12;
    for (uint16_t q = 0; q < qdcount; ++q) {
        std::string name;
        if (!decode_name(payload, pos, name)) return summary;
        if (pos + 4 > payload.size()) return summary;
        pos += 4;  // qtype + qclass
        if (q == 0) summary.query_name = name;
    }

    for (uint16_t a = 0; a < ancount; ++a) {
        std::string name;
        if (!decode_name(payload, pos, name)) return summary;
        if (pos + 10 > payload.size()) return summary;
        const uint16_t type = load_be16(payload.data() + pos);
        const uint16_t klass = load_be16(payload.data() + pos + 2);
        const uint16_t rdlength = load_be16(payload.data() + pos + 8);
        pos += 10;
        if (pos + rdlength > payload.size()) return summary;
        if (type == 1 && klass == 1 && rdlength == 4) {
            summary.answer_addresses.push_back(Ipv4Addr(load_be32(payload.data() + pos)));
        }
        pos += rdlength;  // other record types skipped by length
    }

    summary.valid = true;
    return summary;
}

std::optional<FailureRecord> flag_misconfig(const DnsAnswerSummary& summary,
                                            const std::set<Ipv4Addr>& bogus_set,
                                            const FlowKey& key, const std::string& app,
                                            uint64_t wall_ns) {
    if (!summary.valid) return std::nullopt;
    for (const auto& addr : summary.answer_addresses) {
        if (bogus_set.count(addr)) {
            FailureRecord rec;
            rec.key = key;
            rec.app = app;
            rec.cls = FailureClass::DnsMisconfig;
            rec.evidence = summary.query_name + " -> " + addr.to_string();
            rec.wall_ns = wall_ns;
            return rec;
        }
    }
    return std::nullopt;
}

std::set<Ipv4Addr> default_bogus_set() { return {Ipv4Addr(1, 1, 1, 1)}; }

FailureClass classify_failure(ConnectOutcome outcome, uint64_t elapsed_ns,
                              uint64_t connect_timeout_ns) {
    if (elapsed_ns >= connect_timeout_ns) return FailureClass::Timeout;
    switch (outcome) {
        case ConnectOutcome::Timeout: return FailureClass::Timeout;
        case ConnectOutcome::Refused: return FailureClass::Refused;
        case ConnectOutcome::Unreachable: return FailureClass::Unreachable;
        case ConnectOutcome::Canceled: return FailureClass::Canceled;
        case ConnectOutcome::Success: break;
    }
    return FailureClass::Unreachable;
}

}  // namespace netlens
