#include "bdmesh/sim_transport.hpp"

namespace bdmesh::sim {

SimTransport::SimTransport(Network& net, HostId host, std::size_t socket_limit)
    : net_(net), host_(host), socket_limit_(socket_limit) {}

SimTransport::~SimTransport() {
    for (const auto& [id, ep] : sockets_) net_.unbind(host_, ep.port);
}

TimerHandle SimTransport::call_later(Micros delay, std::function<void()> fn) {
    return net_.schedule_after(delay, std::move(fn));
}

std::optional<SocketId> SimTransport::open_socket(DatagramHandler handler) {
    if (sockets_.size() >= socket_limit_) return std::nullopt;
    const SocketId id = next_id_++;
    auto bound = net_.bind(host_, 0, [id, handler = std::move(handler)](const Datagram& d) {
        handler(id, d.src, d.payload);
    });
    if (!bound) return std::nullopt;
    sockets_.emplace(id, *bound);
    return id;
}

void SimTransport::close_socket(SocketId socket) {
    auto it = sockets_.find(socket);
    if (it == sockets_.end()) return;
    net_.unbind(host_, it->second.port);
    sockets_.erase(it);
}

Endpoint SimTransport::local_endpoint(SocketId socket) const { return sockets_.at(socket); }

void SimTransport::send(SocketId socket, const Endpoint& to, ByteView payload) {
    auto it = sockets_.find(socket);
    if (it == sockets_.end()) return;
    net_.send(host_, it->second, to, Bytes(payload.begin(), payload.end()));
}

SimLineLink::SimLineLink(Network& net, Micros latency, std::string a_name, std::string b_name)
    : net_(net), latency_(latency) {
    a_.link_ = this;
    b_.link_ = this;
    a_.peer_ = &b_;
    b_.peer_ = &a_;
    a_.name_ = std::move(a_name);
    b_.name_ = std::move(b_name);
}

void SimLineLink::Side::send_line(const std::string& line) {
    if (!link_->up_) return;
    auto& net = link_->net_;
    net.sniff("ctrl", ByteView(reinterpret_cast<const std::uint8_t*>(line.data()), line.size()));
    net.trace("ctrl", name_, peer_->name_, line.substr(0, line.find(',')));
    Side* peer = peer_;
    SimLineLink* link = link_;
    // Equal latency plus sequence-number tie-breaking keeps lines ordered.
    net.schedule_after(link_->latency_, [peer, link, line] {
        if (link->up_ && peer->handler_) peer->handler_(line);
    });
}

}  // namespace bdmesh::sim
