#include "netlens/socket_net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <deque>

namespace netlens {

namespace {

sockaddr_in make_sockaddr(Ipv4Addr addr, uint16_t port) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr.s_addr = htonl(addr.value);
    return sa;
}

ConnectFailReason reason_from_errno(int err) {
    switch (err) {
        case ECONNREFUSED: return ConnectFailReason::Refused;
        case ETIMEDOUT: return ConnectFailReason::Timeout;
        case EHOSTUNREACH:
        case ENETUNREACH: return ConnectFailReason::Unreachable;
        default: return ConnectFailReason::Local;
    }
}

class SocketStream final : public StreamConnection {
public:
    SocketStream(EventLoop& loop, const FlowKey& key, StreamHandler handler)
        : loop_(loop), handler_(std::move(handler)) {
        fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
        if (fd_ < 0) {
            fail_next_tick(ConnectFailReason::Local);
            return;
        }
        const sockaddr_in sa = make_sockaddr(key.dst, key.dst_port);
        const int rc = ::connect(fd_, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa));
        if (rc == 0) {
            connected_ = true;
            watch();
            loop_.post([this, alive = alive_] {
                if (*alive && handler_.on_connected) handler_.on_connected();
            });
        } else if (errno == EINPROGRESS) {
            watch();
        } else {
            const int err = errno;
            ::close(fd_);
            fd_ = -1;
            fail_next_tick(reason_from_errno(err));
        }
    }

    ~SocketStream() override { close(); }

    void send(std::span<const uint8_t> data) override {
        if (fd_ < 0 || write_shutdown_) return;
        out_.insert(out_.end(), data.begin(), data.end());
        drain();
    }

    size_t pending_send() const override { return out_.size(); }

    void shutdown_write() override {
        if (fd_ < 0) return;
        want_shutdown_ = true;
        if (out_.empty()) {
            ::shutdown(fd_, SHUT_WR);
            write_shutdown_ = true;
        }
        update_interest();
    }

    void close() override {
        *alive_ = false;
        if (fd_ >= 0) {
            loop_.unwatch_fd(fd_);
            ::close(fd_);
            fd_ = -1;
        }
    }

    void pause_reading(bool paused) override {
        read_paused_ = paused;
        update_interest();
    }

private:
    void fail_next_tick(ConnectFailReason reason) {
        loop_.post([this, reason, alive = alive_] {
            if (*alive && handler_.on_connect_failed) handler_.on_connect_failed(reason);
        });
    }

    void watch() {
        loop_.watch_fd(fd_, interest(), [this](short revents) { on_ready(revents); });
    }

    short interest() const {
        short ev = 0;
        if (connected_ && !read_paused_) ev |= POLLIN;
        if (!connected_ || !out_.empty()) ev |= POLLOUT;
        return ev;
    }

    void update_interest() {
        if (fd_ >= 0) loop_.modify_fd(fd_, interest());
    }

    void on_ready(short revents) {
        if (!connected_) {
            int err = 0;
            socklen_t len = sizeof(err);
            getsockopt(fd_, SOL_SOCKET, SO_ERROR, &err, &len);
            if (err != 0) {
                loop_.unwatch_fd(fd_);
                ::close(fd_);
                fd_ = -1;
                if (handler_.on_connect_failed) handler_.on_connect_failed(reason_from_errno(err));
                return;
            }
            connected_ = true;
            update_interest();
            if (handler_.on_connected) handler_.on_connected();
            return;
        }

        if (revents & POLLOUT) drain();
        if (fd_ < 0) return;

        if (revents & (POLLIN | POLLHUP)) {
            while (fd_ >= 0) {
                uint8_t buf[16384];
                const ssize_t n = ::read(fd_, buf, sizeof(buf));
                if (n > 0) {
                    if (handler_.on_data) {
                        handler_.on_data(std::vector<uint8_t>(buf, buf + n));
                    }
                    if (read_paused_) break;
                    continue;
                }
                if (n == 0) {
                    if (!eof_delivered_) {
                        eof_delivered_ = true;
                        loop_.modify_fd(fd_, interest() & ~POLLIN);
                        if (handler_.on_peer_closed) handler_.on_peer_closed();
                    }
                    break;
                }
                if (errno == EAGAIN || errno == EWOULDBLOCK) break;
                if (errno == ECONNRESET) {
                    if (handler_.on_error) handler_.on_error("connection reset");
                    return;
                }
                if (handler_.on_error) handler_.on_error(strerror(errno));
                return;
            }
        }
        if (revents & POLLERR) {
            if (handler_.on_error) handler_.on_error("socket error");
        }
    }

    void drain() {
        while (!out_.empty() && fd_ >= 0) {
            const size_t chunk = std::min<size_t>(out_.size(), 65536);
            std::vector<uint8_t> tmp(out_.begin(), out_.begin() + chunk);
            const ssize_t n = ::write(fd_, tmp.data(), tmp.size());
            if (n > 0) {
                out_.erase(out_.begin(), out_.begin() + n);
                continue;
            }
            if (errno == EAGAIN || errno == EWOULDBLOCK) break;
            if (handler_.on_error) handler_.on_error(strerror(errno));
            return;
        }
        if (out_.empty() && want_shutdown_ && !write_shutdown_ && fd_ >= 0) {
            ::shutdown(fd_, SHUT_WR);
            write_shutdown_ = true;
        }
        update_interest();
    }

    EventLoop& loop_;
    StreamHandler handler_;
    int fd_ = -1;
    bool connected_ = false;
    bool read_paused_ = false;
    bool eof_delivered_ = false;
    bool want_shutdown_ = false;
    bool write_shutdown_ = false;
    std::deque<uint8_t> out_;
    std::shared_ptr<bool> alive_ = std::make_shared<bool>(true);
};

class SocketDatagram final : public DatagramEndpoint {
public:
    SocketDatagram(EventLoop& loop, const FlowKey& key,
                   std::function<void(std::vector<uint8_t>)> on_reply)
        : loop_(loop), on_reply_(std::move(on_reply)) {
        fd_ = ::socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0);
        if (fd_ < 0) return;
        const sockaddr_in sa = make_sockaddr(key.dst, key.dst_port);
        if (::connect(fd_, reinterpret_cast<const sockaddr*>(&sa), sizeof(sa)) < 0) {
            ::close(fd_);
            fd_ = -1;
            return;
        }
        loop_.watch_fd(fd_, POLLIN, [this](short) {
            uint8_t buf[65536];
            while (fd_ >= 0) {
                const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
                if (n < 0) break;
                if (on_reply_) on_reply_(std::vector<uint8_t>(buf, buf + n));
            }
        });
    }

    ~SocketDatagram() override {
        if (fd_ >= 0) {
            loop_.unwatch_fd(fd_);
            ::close(fd_);
        }
    }

    bool send(std::span<const uint8_t> payload) override {
        if (fd_ < 0) return false;
        return ::send(fd_, payload.data(), payload.size(), 0) ==
               static_cast<ssize_t>(payload.size());
    }

private:
    EventLoop& loop_;
    std::function<void(std::vector<uint8_t>)> on_reply_;
    int fd_ = -1;
};

}  // namespace

std::unique_ptr<StreamConnection> SocketNetwork::open_stream(const FlowKey& key,
                                                             StreamHandler handler) {
    return std::make_unique<SocketStream>(loop_, key, std::move(handler));
}

std::unique_ptr<DatagramEndpoint> SocketNetwork::open_datagram(
    const FlowKey& key, std::function<void(std::vector<uint8_t>)> on_reply) {
    return std::make_unique<SocketDatagram>(loop_, key, std::move(on_reply));
}

}  // namespace netlens
