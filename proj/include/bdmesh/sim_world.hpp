#pragma once

#include "bdmesh/agent.hpp"
#include "bdmesh/rendezvous.hpp"
#include "bdmesh/sim_transport.hpp"

#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <vector>

namespace bdmesh::sim {

/// A coordinator plus a set of node agents wired over one simulated network.
class SimWorld {
public:
    struct Options {
        std::uint64_t seed = 1;
        wire::PunchParams punch;
        Micros ctrl_latency = 20 * kMicrosPerMilli;
        Micros relay_wait = 10 * kMicrosPerSecond;
        bool trace = false;
        bool keep_trace_events = false;
    };

    explicit SimWorld(Options options);
    ~SimWorld();

    Network& net() { return net_; }
    Coordinator& coordinator() { return coord_; }
    const std::array<Endpoint, 2>& observers() const { return listeners_; }

    NatId add_nat(NatProfile profile) { return net_.add_nat(std::move(profile)); }
    /// Adds a host and its agent. The agent starts on start().
    void add_node(const std::string& id, std::optional<NatId> nat, LinkPolicy policy = {});
    /// Rewrites every control line before the node's agent sees it.
    void rewrite_lines_to(const std::string& id, std::function<std::string(std::string)> fn);

    /// Starts every agent and runs until all are ready or `limit` passes.
    bool start(Micros limit = 10 * kMicrosPerSecond);

    NodeAgent& agent(const std::string& id);
    SimTransport& transport(const std::string& id);
    std::vector<std::string> node_ids() const;

    /// Requests a link and runs until both ends settle or `limit` passes.
    /// Returns the status seen by `a`.
    LinkStatus connect(const std::string& a, const std::string& b, bool secure,
                       Micros limit = 60 * kMicrosPerSecond);
    /// Requests every (a, b, secure) link at once and runs until all settle
    /// or `limit` passes. Statuses are as seen by each `a`.
    std::vector<LinkStatus> connect_all(const std::vector<std::tuple<std::string, std::string, bool>>& links,
                                        Micros limit = 60 * kMicrosPerSecond);
    void run_for(Micros d) { net_.run_until(net_.now() + d); }
    /// Drops a node's control connection on both ends.
    void cut_control(const std::string& id);

    /// Replaces the default inbox for one node.
    void on_message(const std::string& id, NodeAgent::MessageHandler fn);
    /// Messages delivered to each node, in arrival order.
    const std::vector<std::pair<std::string, Bytes>>& inbox(const std::string& id);

    /// Calls `fn` with every byte string that crosses a wire, with relay
    /// payloads decoded from their base64 envelope.
    void add_wire_sniffer(std::function<void(ByteView)> fn);

private:
    struct Node {
        std::string id;
        HostId host{};
        std::unique_ptr<SimTransport> transport;
        std::unique_ptr<SimLineLink> line;
        std::unique_ptr<Identity> identity;
        std::unique_ptr<NodeAgent> agent;
        std::function<std::string(std::string)> rewrite;
        NodeAgent::MessageHandler handler;
        Coordinator::ConnId conn = 0;
        std::vector<std::pair<std::string, Bytes>> inbox;
        std::map<std::string, LinkStatus> settled;
    };

    Node& node(const std::string& id);

    Options options_;
    Network net_;
    HostId server_{};
    std::array<Endpoint, 2> listeners_;
    Coordinator coord_;
    std::map<std::string, std::unique_ptr<Node>> nodes_;
    std::vector<std::string> order_;
};

}  // namespace bdmesh::sim
