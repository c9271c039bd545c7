#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>

#include "netlens/packet.hpp"
#include "netlens/utcp.hpp"

namespace netlens {

// Callbacks a stream connection feeds back into the relay. All of them fire
// on the event loop thread.
struct StreamHandler {
    std::function<void()> on_connected;
    std::function<void(ConnectFailReason)> on_connect_failed;
    std::function<void(std::vector<uint8_t>)> on_data;
    std::function<void()> on_peer_closed;              // read half EOF
    std::function<void(const std::string&)> on_error;  // hard transfer error
};

class StreamConnection {
public:
    virtual ~StreamConnection() = default;

    virtual void send(std::span<const uint8_t> data) = 0;
    // Bytes accepted by send() but not yet handed to the network. The engine
    // uses this for per-flow back-pressure.
    virtual size_t pending_send() const = 0;
    virtual void shutdown_write() = 0;  // half close toward the server
    virtual void close() = 0;           // hard close; no further callbacks
    virtual void pause_reading(bool paused) = 0;
};

class DatagramEndpoint {
public:
    virtual ~DatagramEndpoint() = default;
    virtual bool send(std::span<const uint8_t> payload) = 0;
};

// Factory for outbound connections. The relay's connect timeout lives in the
// engine (a loop timer), not here, so every backend shares the same timeout
// semantics.
class ExternalNetwork {
public:
    virtual ~ExternalNetwork() = default;

    virtual std::unique_ptr<StreamConnection> open_stream(const FlowKey& key,
                                                          StreamHandler handler) = 0;
    virtual std::unique_ptr<DatagramEndpoint> open_datagram(
        const FlowKey& key, std::function<void(std::vector<uint8_t>)> on_reply) = 0;
};

}  // namespace netlens
