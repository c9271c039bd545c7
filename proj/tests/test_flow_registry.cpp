#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <fstream>

#include "netlens/clock.hpp"
#include "netlens/flow_registry.hpp"

using namespace netlens;

namespace {

FlowKey key_with_port(uint16_t port) {
    return FlowKey{Proto::Tcp, Ipv4Addr(10, 0, 0, 2), port, Ipv4Addr(31, 13, 79, 251), 443};
}

}  // namespace

TEST_CASE("map resolver attributes by source port") {
    MapResolver resolver({{43512, "facebook"}});
    FlowTable table;
    const AppId app = table.register_flow(key_with_port(43512), &resolver, 100);
    CHECK(app.name == "facebook");

    // Unmapped port falls back to "unknown".
    const AppId other = table.register_flow(key_with_port(1), &resolver, 100);
    CHECK(other.name == "unknown");
}

TEST_CASE("attribution is cached for the flow's lifetime") {
    // A resolver that changes its answer after the first call.
    class FlakyResolver final : public AttributionResolver {
    public:
        std::optional<AppId> resolve(const FlowKey&) override {
            return AppId{calls_++ == 0 ? "first" : "second", std::nullopt};
        }
        int calls_ = 0;
    } resolver;

    FlowTable table;
    table.register_flow(key_with_port(5), &resolver, 0);
    CHECK(table.find(key_with_port(5))->app.name == "first");
    CHECK(resolver.calls_ == 1);
    // Later lookups never consult the resolver again.
    table.touch(key_with_port(5), 10);
    CHECK(table.find(key_with_port(5))->app.name == "first");
    CHECK(resolver.calls_ == 1);
}

TEST_CASE("duplicate registration throws") {
    FlowTable table;
    table.register_flow(key_with_port(7), nullptr, 0);
    CHECK_THROWS_AS(table.register_flow(key_with_port(7), nullptr, 0), DuplicateFlow);
}

TEST_CASE("expiry removes entries at or past their deadline") {
    FlowTable table;
    CHECK(table.expire_flows(1000) == 0);  // empty registry

    table.register_flow(key_with_port(1), nullptr, 0);
    table.register_flow(key_with_port(2), nullptr, 0);
    table.register_flow(key_with_port(3), nullptr, 0);
    table.set_deadline(key_with_port(1), 60 * kSecond);
    table.set_deadline(key_with_port(2), 61 * kSecond);
    // key 3 has no deadline

    // One UDP-style entry idle past a 60 s expiry.
    CHECK(table.expire_flows(60 * kSecond) == 1);  // exactly at deadline: removed
    CHECK_FALSE(table.contains(key_with_port(1)));
    CHECK(table.contains(key_with_port(2)));

    CHECK(table.expire_flows(61 * kSecond + 1) == 1);
    CHECK(table.size() == 1);
    CHECK(table.contains(key_with_port(3)));

    // Idempotent per timestamp.
    CHECK(table.expire_flows(61 * kSecond + 1) == 0);
}

TEST_CASE("map resolver loads JSON files") {
    const std::string path = "/tmp/netlens_resolver_test.json";
    {
        std::ofstream out(path);
        out << R"({"43512": "facebook", "40000": "wechat"})";
    }
    auto resolver = MapResolver::from_json_file(path);
    CHECK(resolver->resolve(key_with_port(43512))->name == "facebook");
    CHECK(resolver->resolve(key_with_port(40000))->name == "wechat");
    CHECK_FALSE(resolver->resolve(key_with_port(1)).has_value());
    unlink(path.c_str());
}

namespace {

// Opens a loopback listener + connected client socket pair; returns the
// client's local port with both sockets kept open.
struct SelfConnection {
    int listener = -1;
    int client = -1;
    int accepted = -1;
    uint16_t client_port = 0;

    SelfConnection() {
        listener = ::socket(AF_INET, SOCK_STREAM, 0);
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        bind(listener, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
        listen(listener, 4);
        socklen_t len = sizeof(sa);
        getsockname(listener, reinterpret_cast<sockaddr*>(&sa), &len);

        client = ::socket(AF_INET, SOCK_STREAM, 0);
        connect(client, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
        accepted = accept(listener, nullptr, nullptr);

        sockaddr_in local{};
        len = sizeof(local);
        getsockname(client, reinterpret_cast<sockaddr*>(&local), &len);
        client_port = ntohs(local.sin_port);
    }

    ~SelfConnection() {
        if (client >= 0) close(client);
        if (accepted >= 0) close(accepted);
        if (listener >= 0) close(listener);
    }
};

}  // namespace

TEST_CASE("platform resolver attributes our own loopback connection") {
    auto resolver = platform_resolver();
    SelfConnection conn;

    const FlowKey key{Proto::Tcp, Ipv4Addr(127, 0, 0, 1), conn.client_port,
                      Ipv4Addr(127, 0, 0, 1), 1};
    const auto app = resolver->resolve(key);
    REQUIRE(app.has_value());
    // The test binary's own process name.
    CHECK(app->name.find("test_flow_registry") != std::string::npos);
    CHECK(app->numeric_id.has_value());
    CHECK(*app->numeric_id == getpid());
}

TEST_CASE("platform resolver returns nothing for a dead port") {
    auto resolver = platform_resolver();
    uint16_t port;
    {
        SelfConnection conn;
        port = conn.client_port;
    }  // sockets closed; port is stale now
    const FlowKey key{Proto::Tcp, Ipv4Addr(127, 0, 0, 1), port, Ipv4Addr(127, 0, 0, 1), 1};
    const auto app = resolver->resolve(key);
    // Either unresolved or (rare reuse) some process; must not crash.
    if (app.has_value()) CHECK_FALSE(app->name.empty());
}

TEST_CASE("platform resolver distinguishes two helper processes") {
    // Each child opens a connection to our listener and sleeps holding it.
    const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    bind(listener, reinterpret_cast<sockaddr*>(&sa), sizeof(sa));
    listen(listener, 4);
    socklen_t len = sizeof(sa);
    getsockname(listener, reinterpret_cast<sockaddr*>(&sa), &len);
    const uint16_t listen_port = ntohs(sa.sin_port);

    auto spawn_helper = [&]() {
        const pid_t pid = fork();
        if (pid == 0) {
            // Child: connect and hold the socket open.
            std::string cmd = "import socket,time;s=socket.create_connection(('127.0.0.1'," +
                              std::to_string(listen_port) + "));time.sleep(8)";
            execlp("python3", "python3", "-c", cmd.c_str(), nullptr);
            _exit(1);
        }
        return pid;
    };

    const pid_t pid_a = spawn_helper();
    const pid_t pid_b = spawn_helper();

    int conn_a = accept(listener, nullptr, nullptr);
    int conn_b = accept(listener, nullptr, nullptr);
    REQUIRE(conn_a >= 0);
    REQUIRE(conn_b >= 0);

    auto peer_port = [](int fd) {
        sockaddr_in peer{};
        socklen_t plen = sizeof(peer);
        getpeername(fd, reinterpret_cast<sockaddr*>(&peer), &plen);
        return ntohs(peer.sin_port);
    };

    auto resolver = platform_resolver();
    auto name_of = [&](uint16_t port) {
        const FlowKey key{Proto::Tcp, Ipv4Addr(127, 0, 0, 1), port, Ipv4Addr(127, 0, 0, 1),
                          listen_port};
        const auto app = resolver->resolve(key);
        return app ? app->name : std::string();
    };

    const std::string name_a = name_of(peer_port(conn_a));
    const std::string name_b = name_of(peer_port(conn_b));
    // Both helpers resolve, to distinct processes.
    CHECK_FALSE(name_a.empty());
    CHECK_FALSE(name_b.empty());

    close(conn_a);
    close(conn_b);
    close(listener);
    kill(pid_a, SIGKILL);
    kill(pid_b, SIGKILL);
    waitpid(pid_a, nullptr, 0);
    waitpid(pid_b, nullptr, 0);
}
