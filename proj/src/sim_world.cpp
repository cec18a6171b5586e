#include "bdmesh/sim_world.hpp"

namespace bdmesh::sim {

SimWorld::SimWorld(Options options)
    : options_(options),
      net_(options.seed),
      coord_(Coordinator::Options{options.punch, kRegistrationTtl, derive_seed(options.seed, 0x434f4f52)},
             [this] { return net_.now(); },
             [this](int l, const Endpoint& to, const std::string& p) {
                 net_.send(server_, listeners_[static_cast<std::size_t>(l)], to, to_bytes(p));
             }) {
    if (options_.trace) net_.enable_trace(options_.keep_trace_events);
    server_ = net_.add_host("coord");
    for (int i = 0; i < 2; ++i) {
        listeners_[static_cast<std::size_t>(i)] =
            *net_.bind(server_, static_cast<std::uint16_t>(3478 + i),
                       [this, i](const Datagram& d) { coord_.on_datagram(i, d.src, d.payload); });
    }
}

SimWorld::~SimWorld() {
    // Agents go first; they reference transports and line links.
    for (auto& [id, n] : nodes_) n->agent.reset();
}

void SimWorld::add_node(const std::string& id, std::optional<NatId> nat, LinkPolicy policy) {
    if (nodes_.count(id)) throw Error(ErrorCode::invalid_parameters, "duplicate node " + id);
    auto n = std::make_unique<Node>();
    n->id = id;
    n->host = net_.add_host(id, nat, policy);
    n->transport = std::make_unique<SimTransport>(net_, n->host);
    n->line = std::make_unique<SimLineLink>(net_, options_.ctrl_latency, id, "coord");
    n->identity = std::make_unique<Identity>(Identity::from_seed(derive_seed(options_.seed, 0x4944 + order_.size())));
    order_.push_back(id);
    nodes_.emplace(id, std::move(n));
}

void SimWorld::rewrite_lines_to(const std::string& id, std::function<std::string(std::string)> fn) {
    node(id).rewrite = std::move(fn);
}

SimWorld::Node& SimWorld::node(const std::string& id) {
    auto it = nodes_.find(id);
    if (it == nodes_.end()) throw Error(ErrorCode::invalid_parameters, "unknown node " + id);
    return *it->second;
}

bool SimWorld::start(Micros limit) {
    for (std::size_t i = 0; i < order_.size(); ++i) {
        Node& n = node(order_[i]);
        AgentConfig cfg;
        cfg.node_id = n.id;
        cfg.observers = listeners_;
        cfg.seed = derive_seed(options_.seed, 0x4e4f4445 + i);
        cfg.deterministic_ephemerals = true;
        cfg.relay_wait = options_.relay_wait;
        n.agent = std::make_unique<NodeAgent>(*n.transport, n.line->a(), *n.identity, cfg);
        Node* np = &n;
        n.agent->on_message([np](const std::string& peer, const Bytes& msg) {
            if (np->handler)
                np->handler(peer, msg);
            else
                np->inbox.emplace_back(peer, msg);
        });
        n.agent->on_link([np](const LinkStatus& s) { np->settled[s.peer] = s; });
        n.line->a().on_line([np](const std::string& line) {
            np->agent->on_line(np->rewrite ? np->rewrite(line) : line);
        });

        // A NATted node's stream appears to come from its NAT's address.
        Endpoint source{net_.host_address(n.host), static_cast<std::uint16_t>(40000 + i)};
        if (auto nat = net_.host_nat(n.host)) source.ip = net_.nat(*nat).profile().public_ip;
        SimLineLink::Side* coord_side = &n.line->b();
        n.conn = coord_.on_connect(source, [coord_side](const std::string& line) { coord_side->send_line(line); });
        const auto conn = n.conn;
        coord_side->on_line([this, conn](const std::string& line) { coord_.on_line(conn, line); });
    }
    for (const auto& id : order_) node(id).agent->start();

    const Micros deadline = net_.now() + limit;
    const Micros step = 10 * kMicrosPerMilli;
    while (net_.now() < deadline) {
        bool all = true;
        for (const auto& id : order_) all = all && node(id).agent->ready();
        if (all) return true;
        net_.run_until(net_.now() + step);
    }
    return false;
}

NodeAgent& SimWorld::agent(const std::string& id) { return *node(id).agent; }

SimTransport& SimWorld::transport(const std::string& id) { return *node(id).transport; }

std::vector<std::string> SimWorld::node_ids() const { return order_; }

LinkStatus SimWorld::connect(const std::string& a, const std::string& b, bool secure, Micros limit) {
    Node& na = node(a);
    auto other = nodes_.find(b);
    Node* nb = other == nodes_.end() ? nullptr : other->second.get();
    na.settled.erase(b);
    if (nb) nb->settled.erase(a);
    na.agent->connect(b, secure);
    const Micros deadline = net_.now() + limit;
    const Micros step = 10 * kMicrosPerMilli;
    while (net_.now() < deadline) {
        net_.run_until(net_.now() + step);
        auto sa = na.settled.find(b);
        const bool a_done = sa != na.settled.end();
        const bool b_done = nb && nb->settled.count(a);
        if (a_done && sa->second.failure != Failure::none) break;
        if (a_done && b_done) break;
    }
    auto it = na.settled.find(b);
    if (it != na.settled.end()) return it->second;
    if (const LinkStatus* s = na.agent->link(b)) return *s;
    LinkStatus none;
    none.peer = b;
    none.failure = Failure::timeout;
    return none;
}

std::vector<LinkStatus> SimWorld::connect_all(const std::vector<std::tuple<std::string, std::string, bool>>& links,
                                              Micros limit) {
    for (const auto& [a, b, secure] : links) {
        node(a).settled.erase(b);
        node(b).settled.erase(a);
    }
    for (const auto& [a, b, secure] : links) node(a).agent->connect(b, secure);
    const Micros deadline = net_.now() + limit;
    const Micros step = 10 * kMicrosPerMilli;
    const auto all_settled = [&] {
        for (const auto& [a, b, secure] : links) {
            auto sa = node(a).settled.find(b);
            if (sa == node(a).settled.end()) return false;
            if (sa->second.failure == Failure::none && !node(b).settled.count(a)) return false;
        }
        return true;
    };
    while (net_.now() < deadline && !all_settled()) net_.run_until(net_.now() + step);

    std::vector<LinkStatus> out;
    for (const auto& [a, b, secure] : links) {
        Node& na = node(a);
        if (auto it = na.settled.find(b); it != na.settled.end()) {
            out.push_back(it->second);
        } else if (const LinkStatus* s = na.agent->link(b)) {
            out.push_back(*s);
            if (out.back().failure == Failure::none) out.back().failure = Failure::timeout;
        } else {
            LinkStatus none;
            none.peer = b;
            none.failure = Failure::timeout;
            out.push_back(none);
        }
    }
    return out;
}

void SimWorld::on_message(const std::string& id, NodeAgent::MessageHandler fn) { node(id).handler = std::move(fn); }

void SimWorld::cut_control(const std::string& id) {
    Node& n = node(id);
    n.line->cut();
    coord_.on_disconnect(n.conn);
    n.agent->on_control_down();
}

const std::vector<std::pair<std::string, Bytes>>& SimWorld::inbox(const std::string& id) { return node(id).inbox; }

void SimWorld::add_wire_sniffer(std::function<void(ByteView)> fn) {
    net_.add_sniffer([fn = std::move(fn)](std::string_view where, ByteView bytes) {
        fn(bytes);
        if (where != "ctrl") return;
        try {
            const Json msg = Json::parse(bytes.begin(), bytes.end());
            if (msg.contains("payload_b64")) fn(from_base64(msg["payload_b64"].get<std::string>()));
        } catch (const std::exception&) {
        }
    });
}

}  // namespace bdmesh::sim
