#include "netlens/flow_registry.hpp"

#include <arpa/inet.h>
#include <dirent.h>
#include <unistd.h>

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <thread>

namespace netlens {

std::unique_ptr<MapResolver> MapResolver::from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open resolver map: " + path);
    nlohmann::json doc = nlohmann::json::parse(in);
    std::map<uint16_t, std::string> m;
    for (auto it = doc.begin(); it != doc.end(); ++it) {
        m[static_cast<uint16_t>(std::stoul(it.key()))] = it.value().get<std::string>();
    }
    return std::make_unique<MapResolver>(std::move(m));
}

namespace {

// /proc/net/tcp rows: "sl local_address rem_address st ... uid ... inode".
// Addresses print the kernel's big-endian word as native hex, so the parsed
// value compares against htonl(host_order).
std::optional<uint64_t> find_socket_inode(const char* table, Ipv4Addr local_addr,
                                          uint16_t local_port) {
    std::ifstream in(table);
    if (!in) return std::nullopt;
    std::string line;
    std::getline(in, line);  // header
    const uint32_t want_addr = htonl(local_addr.value);
    while (std::getline(in, line)) {
        unsigned sl;
        unsigned addr, port, raddr, rport, state;
        unsigned long tx, rx;
        int timer;
        unsigned long tm_when;
        unsigned retrnsmt;
        unsigned uid;
        int timeout;
        unsigned long inode;
        const int n = std::sscanf(
            line.c_str(), "%u: %x:%x %x:%x %x %lx:%lx %d:%lx %x %u %d %lu", &sl, &addr, &port,
            &raddr, &rport, &state, &tx, &rx, &timer, &tm_when, &retrnsmt, &uid, &timeout, &inode);
        if (n != 14) continue;
        if (port != local_port) continue;
        // Wildcard-bound sockets (0.0.0.0) match any local address.
        if (addr != want_addr && addr != 0) continue;
        return inode;
    }
    return std::nullopt;
}

// Scans /proc/<pid>/fd for a socket:[inode] link and returns the process name.
std::optional<AppId> owner_of_inode(uint64_t inode) {
    const std::string needle = "socket:[" + std::to_string(inode) + "]";
    DIR* proc = opendir("/proc");
    if (!proc) return std::nullopt;

    std::optional<AppId> result;
    while (dirent* entry = readdir(proc)) {
        if (entry->d_name[0] < '0' || entry->d_name[0] > '9') continue;
        const std::string pid_dir = std::string("/proc/") + entry->d_name + "/fd";
        DIR* fds = opendir(pid_dir.c_str());
        if (!fds) continue;
        while (dirent* fd_entry = readdir(fds)) {
            if (fd_entry->d_name[0] == '.') continue;
            char link[128];
            const std::string fd_path = pid_dir + "/" + fd_entry->d_name;
            const ssize_t len = readlink(fd_path.c_str(), link, sizeof(link) - 1);
            if (len <= 0) continue;
            link[len] = '\0';
            if (needle == link) {
                std::ifstream comm(std::string("/proc/") + entry->d_name + "/comm");
                std::string name;
                std::getline(comm, name);
                if (!name.empty()) {
                    result = AppId{name, std::stoll(entry->d_name)};
                }
                break;
            }
        }
        closedir(fds);
        if (result) break;
    }
    closedir(proc);
    return result;
}

class ProcResolver final : public AttributionResolver {
public:
    std::optional<AppId> resolve(const FlowKey& key) override {
        const char* table = key.proto == Proto::Tcp ? "/proc/net/tcp" : "/proc/net/udp";
        auto attempt = [&]() -> std::optional<AppId> {
            auto inode = find_socket_inode(table, key.src, key.src_port);
            if (!inode) return std::nullopt;
            return owner_of_inode(*inode);
        };
        if (auto app = attempt()) return app;
        // Owner tables lag slightly while a connect is in flight.
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
        return attempt();
    }
};

}  // namespace

std::unique_ptr<AttributionResolver> platform_resolver() {
    if (access("/proc/net/tcp", R_OK) != 0) {
        return std::make_unique<NullResolver>();
    }
    return std::make_unique<ProcResolver>();
}

AppId FlowTable::register_flow(const FlowKey& key, AttributionResolver* resolver,
                               uint64_t now_ns) {
    AppId app;
    if (resolver) {
        if (auto resolved = resolver->resolve(key)) app = *resolved;
    }
    std::lock_guard<std::mutex> lock(mu_);
    auto [it, inserted] = flows_.try_emplace(key, FlowRecord{app, now_ns, now_ns, 0});
    if (!inserted) throw DuplicateFlow(key);
    return it->second.app;
}

std::optional<FlowRecord> FlowTable::find(const FlowKey& key) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = flows_.find(key);
    if (it == flows_.end()) return std::nullopt;
    return it->second;
}

bool FlowTable::contains(const FlowKey& key) const {
    std::lock_guard<std::mutex> lock(mu_);
    return flows_.count(key) != 0;
}

void FlowTable::touch(const FlowKey& key, uint64_t now_ns) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = flows_.find(key);
    if (it != flows_.end()) it->second.last_active_ns = now_ns;
}

void FlowTable::set_deadline(const FlowKey& key, uint64_t deadline_ns) {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = flows_.find(key);
    if (it != flows_.end()) it->second.deadline_ns = deadline_ns;
}

size_t FlowTable::expire_flows(uint64_t now_ns) {
    std::lock_guard<std::mutex> lock(mu_);
    size_t removed = 0;
    for (auto it = flows_.begin(); it != flows_.end();) {
        if (it->second.deadline_ns != 0 && now_ns >= it->second.deadline_ns) {
            it = flows_.erase(it);
            ++removed;
        } else {
            ++it;
        }
    }
    return removed;
}

bool FlowTable::remove(const FlowKey& key) {
    std::lock_guard<std::mutex> lock(mu_);
    return flows_.erase(key) != 0;
}

size_t FlowTable::size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return flows_.size();
}

}  // namespace netlens
