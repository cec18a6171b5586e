#pragma once

#include "bdmesh/transport.hpp"

#include <chrono>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>

namespace bdmesh::io {

/// Single-threaded poll loop over real sockets. Implements Transport with
/// UDP sockets and a monotonic clock; TCP line channels register their
/// descriptors here too.
class EventLoop final : public Transport {
public:
    /// Sockets opened through open_socket bind to `bind_ip` with an
    /// ephemeral port.
    explicit EventLoop(Ipv4 bind_ip = Ipv4{});
    ~EventLoop() override;
    EventLoop(const EventLoop&) = delete;
    EventLoop& operator=(const EventLoop&) = delete;

    Micros now() const override;
    TimerHandle call_later(Micros delay, std::function<void()> fn) override;
    void cancel(TimerHandle timer) override;

    std::optional<SocketId> open_socket(DatagramHandler handler) override;
    void close_socket(SocketId socket) override;
    Endpoint local_endpoint(SocketId socket) const override;
    void send(SocketId socket, const Endpoint& to, ByteView payload) override;

    /// UDP socket on a fixed address. Empty when the bind fails.
    std::optional<SocketId> open_socket_at(const Endpoint& at, DatagramHandler handler);

    /// Calls `fn` whenever `fd` is readable (or writable, when asked).
    void watch(int fd, std::function<void()> on_readable, std::function<void()> on_writable = {});
    void want_write(int fd, bool on);
    void unwatch(int fd);

    /// Handles ready descriptors and due timers, waiting at most `max_wait`.
    void run_once(Micros max_wait);
    /// Runs until `done` returns true, stop() is called or `limit` elapses.
    /// Returns whether `done` was satisfied.
    bool run_until(const std::function<bool()>& done, Micros limit);
    void stop() { stopped_ = true; }
    bool stopped() const { return stopped_; }

private:
    struct Watch {
        std::function<void()> on_readable;
        std::function<void()> on_writable;
        bool want_write = false;
    };
    struct Udp {
        int fd = -1;
        Endpoint local;
        DatagramHandler handler;
    };

    std::optional<SocketId> add_udp(int fd, DatagramHandler handler);
    void read_udp(SocketId id);
    void fire_timers();

    Ipv4 bind_ip_;
    std::chrono::steady_clock::time_point start_;
    TimerHandle next_timer_ = 1;
    std::multimap<Micros, TimerHandle> timer_order_;
    std::map<TimerHandle, std::pair<Micros, std::function<void()>>> timers_;
    SocketId next_socket_ = 1;
    std::map<SocketId, Udp> udp_;
    std::map<int, Watch> watches_;
    bool stopped_ = false;
};

/// Newline-delimited stream over TCP. Used by both ends of the control
/// channel.
class LineConnection final : public ControlChannel {
public:
    using LineHandler = std::function<void(const std::string&)>;

    /// Takes ownership of a connected descriptor.
    LineConnection(EventLoop& loop, int fd, std::size_t max_line);
    ~LineConnection() override;
    LineConnection(const LineConnection&) = delete;
    LineConnection& operator=(const LineConnection&) = delete;

    /// Blocking connect with a timeout. Null when unreachable.
    static std::unique_ptr<LineConnection> connect(EventLoop& loop, const Endpoint& to, Micros timeout,
                                                   std::size_t max_line);

    bool connected() const override { return fd_ >= 0; }
    void send_line(const std::string& line) override;
    void on_line(LineHandler fn) { line_handler_ = std::move(fn); }
    void on_close(std::function<void()> fn) { close_handler_ = std::move(fn); }
    void close();
    Endpoint peer() const { return peer_; }

private:
    void readable();
    void writable();
    void flush();

    EventLoop& loop_;
    int fd_;
    std::size_t max_line_;
    Endpoint peer_;
    std::string in_;
    bool discarding_ = false;
    std::string out_;
    LineHandler line_handler_;
    std::function<void()> close_handler_;
};

/// Accepts TCP connections and hands each one over as a LineConnection.
class LineServer {
public:
    using AcceptHandler = std::function<void(std::unique_ptr<LineConnection>)>;

    LineServer(EventLoop& loop, std::size_t max_line);
    ~LineServer();

    /// False when the address cannot be bound.
    bool listen(const Endpoint& at, AcceptHandler on_accept);
    Endpoint local() const { return local_; }

private:
    void accept_ready();

    EventLoop& loop_;
    std::size_t max_line_;
    int fd_ = -1;
    Endpoint local_;
    AcceptHandler on_accept_;
};

}  // namespace bdmesh::io
