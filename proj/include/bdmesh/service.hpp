#pragma once

#include "bdmesh/agent.hpp"
#include "bdmesh/posix_io.hpp"
#include "bdmesh/rendezvous.hpp"

#include <map>
#include <memory>

namespace bdmesh::io {

/// The coordinator over real sockets: a TCP line server plus the UDP
/// observer on the primary address, and a second UDP observer.
class CoordinatorService {
public:
    CoordinatorService(EventLoop& loop, Coordinator::Options options);

    /// False when either address cannot be bound.
    bool start(const Endpoint& primary, const Endpoint& secondary);

    Endpoint stream_endpoint() const { return server_.local(); }
    Endpoint observer(int i) const { return loop_.local_endpoint(udp_[static_cast<std::size_t>(i)]); }
    Coordinator& coordinator() { return coord_; }
    std::size_t connections() const { return conns_.size(); }

private:
    EventLoop& loop_;
    LineServer server_;
    std::array<SocketId, 2> udp_{};
    Coordinator coord_;
    std::map<Coordinator::ConnId, std::unique_ptr<LineConnection>> conns_;
};

/// A node agent over real sockets.
class NodeService {
public:
    struct Options {
        std::string node_id;
        Endpoint coord;
        /// Second observer; the first is the coordinator's primary address.
        Endpoint coord_secondary;
        int connect_attempts = 3;
        Micros retry_wait = 1 * kMicrosPerSecond;
        Micros connect_timeout = 2 * kMicrosPerSecond;
        std::uint64_t seed = 1;
    };

    enum class Status { running, coord_unreachable, identity_conflict, control_lost };

    NodeService(EventLoop& loop, const Identity& identity, Options options);
    ~NodeService();

    /// Connects (with retries) and starts the agent. False when the
    /// coordinator stayed unreachable.
    bool start();
    NodeAgent& agent() { return *agent_; }
    Status status() const { return status_; }

private:
    EventLoop& loop_;
    const Identity& identity_;
    Options options_;
    std::unique_ptr<LineConnection> line_;
    std::unique_ptr<NodeAgent> agent_;
    Status status_ = Status::running;
};

}  // namespace bdmesh::io
