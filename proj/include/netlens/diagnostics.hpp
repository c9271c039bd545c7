#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>

#include "netlens/packet.hpp"
#include "netlens/rtt.hpp"

namespace netlens {

enum class FailureClass : uint8_t { Timeout, Refused, Unreachable, Canceled, DnsMisconfig };

const char* failure_class_name(FailureClass c);

struct FailureRecord {
    FlowKey key;
    std::string app = "unknown";
    FailureClass cls = FailureClass::Timeout;
    std::string evidence;  // DnsMisconfig: "<domain> -> <address>"
    uint64_t wall_ns = 0;
};

// Decoded view of a DNS response: the first question's name plus all A/IN
// answer addresses. `valid` is false for malformed messages (callers count
// those and move on; the datagram itself is still relayed untouched).
struct DnsAnswerSummary {
    bool valid = false;
    std::string query_name;
    std::vector<Ipv4Addr> answer_addresses;
    int response_code = 0;
};

// Tolerant decoder: header, first question name (with pointer compression),
// A/IN answers. Everything else is skipped by length. Never throws.
DnsAnswerSummary inspect_dns(std::span<const uint8_t> payload);

// A FailureRecord iff any answer address is in the bogus set. The set is
// configuration; {1.1.1.1} is the historical default signature.
std::optional<FailureRecord> flag_misconfig(const DnsAnswerSummary& summary,
                                            const std::set<Ipv4Addr>& bogus_set,
                                            const FlowKey& key, const std::string& app,
                                            uint64_t wall_ns);

std::set<Ipv4Addr> default_bogus_set();

// Maps a failed connect to its class. TIMEOUT wins whenever the elapsed time
// reached the configured limit.
FailureClass classify_failure(ConnectOutcome outcome, uint64_t elapsed_ns,
                              uint64_t connect_timeout_ns);

}  // namespace netlens
