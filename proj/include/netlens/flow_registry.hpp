#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

#include "netlens/packet.hpp"

namespace netlens {

struct AppId {
    std::string name = "unknown";  // "unknown" is reserved for unattributed flows
    std::optional<int64_t> numeric_id;

    bool operator==(const AppId& other) const { return name == other.name; }
};

// Maps a flow to its owning application. Implementations must tolerate
// concurrent calls; resolution happens once per flow, at creation.
class AttributionResolver {
public:
    virtual ~AttributionResolver() = default;
    virtual std::optional<AppId> resolve(const FlowKey& key) = 0;
};

// Always unattributed.
class NullResolver final : public AttributionResolver {
public:
    std::optional<AppId> resolve(const FlowKey&) override { return std::nullopt; }
};

// Fixed mapping injected from configuration: source port -> app name.
// Scenario files use this for ground-truth attribution in tests.
class MapResolver final : public AttributionResolver {
public:
    explicit MapResolver(std::map<uint16_t, std::string> by_src_port)
        : by_src_port_(std::move(by_src_port)) {}

    // JSON object {"<port>": "<name>", ...}
    static std::unique_ptr<MapResolver> from_json_file(const std::string& path);

    std::optional<AppId> resolve(const FlowKey& key) override {
        auto it = by_src_port_.find(key.src_port);
        if (it == by_src_port_.end()) return std::nullopt;
        return AppId{it->second, std::nullopt};
    }

private:
    std::map<uint16_t, std::string> by_src_port_;
};

// Resolves the local endpoint against the operating system's connection
// owner tables (Linux: /proc/net/{tcp,udp} inode -> /proc/<pid>). Returns a
// resolver that never matches on unsupported platforms.
std::unique_ptr<AttributionResolver> platform_resolver();

class DuplicateFlow : public std::runtime_error {
public:
    explicit DuplicateFlow(const FlowKey& key)
        : std::runtime_error("flow already registered: " + key.to_string()) {}
};

struct FlowRecord {
    AppId app;
    uint64_t created_ns = 0;
    uint64_t last_active_ns = 0;
    uint64_t deadline_ns = 0;  // 0 = no expiry scheduled
};

// Live flow registry: attribution cache plus idle/linger deadlines. All
// operations take the table lock, so registration, lookup and expiry are
// linearizable; an entry is fully initialized before it becomes visible.
class FlowTable {
public:
    // Consults the resolver once and caches the result for the flow's
    // lifetime; unresolved flows get AppId{"unknown"}.
    AppId register_flow(const FlowKey& key, AttributionResolver* resolver, uint64_t now_ns);

    std::optional<FlowRecord> find(const FlowKey& key) const;
    bool contains(const FlowKey& key) const;

    void touch(const FlowKey& key, uint64_t now_ns);
    void set_deadline(const FlowKey& key, uint64_t deadline_ns);

    // Removes every entry whose deadline has arrived (closed interval:
    // an entry exactly at the deadline goes too). Returns the count.
    size_t expire_flows(uint64_t now_ns);

    bool remove(const FlowKey& key);
    size_t size() const;

private:
    mutable std::mutex mu_;
    std::map<FlowKey, FlowRecord> flows_;
};

}  // namespace netlens
