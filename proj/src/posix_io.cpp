#include "bdmesh/posix_io.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <vector>

namespace bdmesh::io {

namespace {

sockaddr_in to_sockaddr(const Endpoint& ep) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(ep.ip.value);
    sa.sin_port = htons(ep.port);
    return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) {
    return Endpoint{Ipv4{ntohl(sa.sin_addr.s_addr)}, ntohs(sa.sin_port)};
}

Endpoint local_of(int fd) {
    sockaddr_in sa{};
    socklen_t len = sizeof sa;
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&sa), &len);
    return from_sockaddr(sa);
}

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK); }

}  // namespace

EventLoop::EventLoop(Ipv4 bind_ip) : bind_ip_(bind_ip), start_(std::chrono::steady_clock::now()) {}

EventLoop::~EventLoop() {
    for (auto& [id, u] : udp_) ::close(u.fd);
}

Micros EventLoop::now() const {
    return std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::steady_clock::now() - start_).count();
}

TimerHandle EventLoop::call_later(Micros delay, std::function<void()> fn) {
    const TimerHandle h = next_timer_++;
    const Micros at = now() + std::max<Micros>(delay, 0);
    timers_.emplace(h, std::make_pair(at, std::move(fn)));
    timer_order_.emplace(at, h);
    return h;
}

void EventLoop::cancel(TimerHandle timer) { timers_.erase(timer); }

std::optional<SocketId> EventLoop::add_udp(int fd, DatagramHandler handler) {
    set_nonblocking(fd);
    const SocketId id = next_socket_++;
    udp_[id] = Udp{fd, local_of(fd), std::move(handler)};
    watch(fd, [this, id] { read_udp(id); });
    return id;
}

std::optional<SocketId> EventLoop::open_socket(DatagramHandler handler) {
    return open_socket_at(Endpoint{bind_ip_, 0}, std::move(handler));
}

std::optional<SocketId> EventLoop::open_socket_at(const Endpoint& at, DatagramHandler handler) {
    const int fd = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd < 0) return std::nullopt;
    const sockaddr_in sa = to_sockaddr(at);
    if (::bind(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0) {
        ::close(fd);
        return std::nullopt;
    }
    return add_udp(fd, std::move(handler));
}

void EventLoop::close_socket(SocketId socket) {
    auto it = udp_.find(socket);
    if (it == udp_.end()) return;
    unwatch(it->second.fd);
    ::close(it->second.fd);
    udp_.erase(it);
}

Endpoint EventLoop::local_endpoint(SocketId socket) const { return udp_.at(socket).local; }

void EventLoop::send(SocketId socket, const Endpoint& to, ByteView payload) {
    auto it = udp_.find(socket);
    if (it == udp_.end()) return;
    const sockaddr_in sa = to_sockaddr(to);
    // Datagram semantics: a full buffer is the same as a loss.
    (void)::sendto(it->second.fd, payload.data(), payload.size(), 0, reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
}

void EventLoop::read_udp(SocketId id) {
    std::uint8_t buf[65536];
    for (int i = 0; i < 64; ++i) {
        auto it = udp_.find(id);
        if (it == udp_.end()) return;
        sockaddr_in from{};
        socklen_t len = sizeof from;
        const ssize_t n = ::recvfrom(it->second.fd, buf, sizeof buf, 0, reinterpret_cast<sockaddr*>(&from), &len);
        if (n < 0) return;
        // Copy the handler: it may close this socket.
        auto handler = it->second.handler;
        handler(id, from_sockaddr(from), ByteView(buf, static_cast<std::size_t>(n)));
    }
}

void EventLoop::watch(int fd, std::function<void()> on_readable, std::function<void()> on_writable) {
    watches_[fd] = Watch{std::move(on_readable), std::move(on_writable), false};
}

void EventLoop::want_write(int fd, bool on) {
    if (auto it = watches_.find(fd); it != watches_.end()) it->second.want_write = on;
}

void EventLoop::unwatch(int fd) { watches_.erase(fd); }

void EventLoop::fire_timers() {
    const Micros t = now();
    while (!timer_order_.empty() && timer_order_.begin()->first <= t) {
        const TimerHandle h = timer_order_.begin()->second;
        timer_order_.erase(timer_order_.begin());
        auto it = timers_.find(h);
        if (it == timers_.end()) continue;
        auto fn = std::move(it->second.second);
        timers_.erase(it);
        fn();
    }
}

void EventLoop::run_once(Micros max_wait) {
    while (!timer_order_.empty() && !timers_.count(timer_order_.begin()->second))
        timer_order_.erase(timer_order_.begin());
    Micros wait = max_wait;
    if (!timer_order_.empty()) wait = std::min(wait, std::max<Micros>(0, timer_order_.begin()->first - now()));

    std::vector<pollfd> fds;
    fds.reserve(watches_.size());
    for (const auto& [fd, w] : watches_)
        fds.push_back(pollfd{fd, static_cast<short>(POLLIN | (w.want_write ? POLLOUT : 0)), 0});
    const int ms = static_cast<int>((wait + 999) / 1000);
    const int ready = ::poll(fds.data(), fds.size(), ms);
    if (ready > 0) {
        for (const auto& p : fds) {
            if (p.revents == 0) continue;
            auto it = watches_.find(p.fd);
            if (it == watches_.end()) continue;
            if ((p.revents & POLLOUT) && it->second.on_writable) {
                auto fn = it->second.on_writable;
                fn();
            }
            it = watches_.find(p.fd);
            if (it == watches_.end()) continue;
            if (p.revents & (POLLIN | POLLHUP | POLLERR)) {
                auto fn = it->second.on_readable;
                fn();
            }
        }
    }
    fire_timers();
}

bool EventLoop::run_until(const std::function<bool()>& done, Micros limit) {
    const Micros deadline = now() + limit;
    while (!stopped_) {
        if (done && done()) return true;
        const Micros left = deadline - now();
        if (left <= 0) return false;
        run_once(std::min<Micros>(left, 100 * kMicrosPerMilli));
    }
    return done && done();
}

// ---------------------------------------------------------------------------

LineConnection::LineConnection(EventLoop& loop, int fd, std::size_t max_line)
    : loop_(loop), fd_(fd), max_line_(max_line) {
    set_nonblocking(fd_);
    sockaddr_in sa{};
    socklen_t len = sizeof sa;
    ::getpeername(fd_, reinterpret_cast<sockaddr*>(&sa), &len);
    peer_ = from_sockaddr(sa);
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    loop_.watch(fd_, [this] { readable(); }, [this] { writable(); });
}

LineConnection::~LineConnection() {
    if (fd_ >= 0) {
        loop_.unwatch(fd_);
        ::close(fd_);
    }
}

std::unique_ptr<LineConnection> LineConnection::connect(EventLoop& loop, const Endpoint& to, Micros timeout,
                                                        std::size_t max_line) {
    const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0) return nullptr;
    set_nonblocking(fd);
    const sockaddr_in sa = to_sockaddr(to);
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0 && errno != EINPROGRESS) {
        ::close(fd);
        return nullptr;
    }
    pollfd p{fd, POLLOUT, 0};
    if (::poll(&p, 1, static_cast<int>(timeout / 1000)) != 1) {
        ::close(fd);
        return nullptr;
    }
    int err = 0;
    socklen_t len = sizeof err;
    ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
    if (err != 0) {
        ::close(fd);
        return nullptr;
    }
    return std::make_unique<LineConnection>(loop, fd, max_line);
}

void LineConnection::send_line(const std::string& line) {
    if (fd_ < 0) return;
    out_ += line;
    out_ += '\n';
    flush();
}

void LineConnection::flush() {
    while (fd_ >= 0 && !out_.empty()) {
        const ssize_t n = ::send(fd_, out_.data(), out_.size(), MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EAGAIN || errno == EWOULDBLOCK) break;
            close();
            return;
        }
        out_.erase(0, static_cast<std::size_t>(n));
    }
    if (fd_ >= 0) loop_.want_write(fd_, !out_.empty());
}

void LineConnection::writable() { flush(); }

void LineConnection::readable() {
    char buf[16384];
    const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
    if (n == 0 || (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK)) {
        close();
        return;
    }
    if (n < 0) return;
    in_.append(buf, static_cast<std::size_t>(n));
    std::size_t start = 0;
    for (;;) {
        const std::size_t nl = in_.find('\n', start);
        if (nl == std::string::npos) break;
        std::string line = in_.substr(start, nl - start);
        start = nl + 1;
        if (discarding_) {
            discarding_ = false;
            continue;
        }
        if (line_handler_) line_handler_(line);
        if (fd_ < 0) return;
    }
    in_.erase(0, start);
    if (in_.size() > max_line_ && !discarding_) {
        // Hand the oversized prefix on so the receiver can reject it, then
        // drop the rest of the line.
        std::string head = in_;
        in_.clear();
        discarding_ = true;
        if (line_handler_) line_handler_(head);
    } else if (discarding_) {
        in_.clear();
    }
}

void LineConnection::close() {
    if (fd_ < 0) return;
    loop_.unwatch(fd_);
    ::close(fd_);
    fd_ = -1;
    if (close_handler_) {
        auto fn = close_handler_;
        fn();
    }
}

// ---------------------------------------------------------------------------

LineServer::LineServer(EventLoop& loop, std::size_t max_line) : loop_(loop), max_line_(max_line) {}

LineServer::~LineServer() {
    if (fd_ >= 0) {
        loop_.unwatch(fd_);
        ::close(fd_);
    }
}

bool LineServer::listen(const Endpoint& at, AcceptHandler on_accept) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) return false;
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    const sockaddr_in sa = to_sockaddr(at);
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) != 0 || ::listen(fd_, 64) != 0) {
        ::close(fd_);
        fd_ = -1;
        return false;
    }
    set_nonblocking(fd_);
    local_ = local_of(fd_);
    on_accept_ = std::move(on_accept);
    loop_.watch(fd_, [this] { accept_ready(); });
    return true;
}

void LineServer::accept_ready() {
    for (;;) {
        const int fd = ::accept(fd_, nullptr, nullptr);
        if (fd < 0) return;
        on_accept_(std::make_unique<LineConnection>(loop_, fd, max_line_));
    }
}

}  // namespace bdmesh::io
