#pragma once

#include "bdmesh/netsim.hpp"
#include "bdmesh/transport.hpp"

#include <deque>
#include <map>
#include <string>

namespace bdmesh::sim {

/// Transport bound to one simulated host.
class SimTransport final : public Transport {
public:
    /// `socket_limit` caps how many sockets the host can hold open.
    SimTransport(Network& net, HostId host, std::size_t socket_limit = 4096);
    ~SimTransport() override;

    Micros now() const override { return net_.now(); }
    TimerHandle call_later(Micros delay, std::function<void()> fn) override;
    void cancel(TimerHandle timer) override { net_.cancel(timer); }

    std::optional<SocketId> open_socket(DatagramHandler handler) override;
    void close_socket(SocketId socket) override;
    Endpoint local_endpoint(SocketId socket) const override;
    void send(SocketId socket, const Endpoint& to, ByteView payload) override;

    HostId host() const { return host_; }
    Network& network() { return net_; }
    std::size_t open_sockets() const { return sockets_.size(); }

private:
    Network& net_;
    HostId host_;
    std::size_t socket_limit_;
    SocketId next_id_ = 1;
    std::map<SocketId, Endpoint> sockets_;
};

/// Lossless in-order line channel between two simulated parties, carried
/// on the event queue with a fixed one-way latency.
class SimLineLink {
public:
    using LineHandler = std::function<void(const std::string&)>;

    SimLineLink(Network& net, Micros latency, std::string a_name, std::string b_name);

    class Side final : public ControlChannel {
    public:
        bool connected() const override { return link_->up_; }
        void send_line(const std::string& line) override;
        void on_line(LineHandler handler) { handler_ = std::move(handler); }

    private:
        friend class SimLineLink;
        SimLineLink* link_ = nullptr;
        Side* peer_ = nullptr;
        std::string name_;
        LineHandler handler_;
    };

    Side& a() { return a_; }
    Side& b() { return b_; }
    /// Severs the link; later sends are dropped.
    void cut() { up_ = false; }

private:
    Network& net_;
    Micros latency_;
    bool up_ = true;
    Side a_;
    Side b_;
};

}  // namespace bdmesh::sim
