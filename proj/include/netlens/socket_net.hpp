#pragma once

#include "netlens/event_loop.hpp"
#include "netlens/external.hpp"

namespace netlens {

// Real-socket backend: nonblocking connects and transfers driven by the
// event loop's fd watching. Outbound sockets bind to the default route, so
// relayed traffic cannot loop back into a tunnel route.
class SocketNetwork final : public ExternalNetwork {
public:
    explicit SocketNetwork(EventLoop& loop) : loop_(loop) {}

    std::unique_ptr<StreamConnection> open_stream(const FlowKey& key,
                                                  StreamHandler handler) override;
    std::unique_ptr<DatagramEndpoint> open_datagram(
        const FlowKey& key, std::function<void(std::vector<uint8_t>)> on_reply) override;

private:
    EventLoop& loop_;
};

}  // namespace netlens
