#include "bdmesh/rendezvous.hpp"

namespace bdmesh {

namespace wire {

namespace {

const Json& field(const Json& j, const char* name) {
    auto it = j.find(name);
    if (it == j.end()) throw Error(ErrorCode::protocol, std::string("missing field ") + name);
    return *it;
}

std::string string_field(const Json& j, const char* name) {
    const Json& v = field(j, name);
    if (!v.is_string()) throw Error(ErrorCode::protocol, std::string("field ") + name + " must be a string");
    return v.get<std::string>();
}

double number_field(const Json& j, const char* name) {
    const Json& v = field(j, name);
    if (!v.is_number()) throw Error(ErrorCode::protocol, std::string("field ") + name + " must be a number");
    return v.get<double>();
}

}  // namespace

Json endpoint_json(const Endpoint& ep) { return Json{{"ip", ep.ip.to_string()}, {"port", ep.port}}; }

Endpoint endpoint_from(const Json& j) {
    if (!j.is_object()) throw Error(ErrorCode::protocol, "endpoint must be an object");
    const auto ip = Ipv4::parse(string_field(j, "ip"));
    const Json& port = field(j, "port");
    if (!ip || !port.is_number_unsigned() || port.get<std::uint64_t>() > 65535)
        throw Error(ErrorCode::protocol, "malformed endpoint");
    return Endpoint{*ip, static_cast<std::uint16_t>(port.get<std::uint64_t>())};
}

Json parse_line(std::string_view line) {
    Json j = Json::parse(line.begin(), line.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::protocol, "not a JSON object");
    if (!j.contains("type") || !j["type"].is_string()) throw Error(ErrorCode::protocol, "missing type");
    return j;
}

std::string register_msg(const std::string& node_id, const std::string& pubkey_b64, std::optional<NatClass> nat) {
    Json j{{"type", "register"}, {"node_id", node_id}, {"pubkey_b64", pubkey_b64}};
    if (nat) j["nat"] = std::string(to_string(*nat));
    return j.dump();
}

std::string registered_msg(const std::string& node_id, const Endpoint& observed) {
    return Json{{"type", "registered"}, {"node_id", node_id}, {"observed", endpoint_json(observed)}}.dump();
}

std::string observe_msg(std::uint64_t token, const std::string& node_id) {
    return Json{{"type", "observe"}, {"token", token}, {"node_id", node_id}}.dump();
}

std::string observed_msg(std::uint64_t token, const Endpoint& seen) {
    return Json{{"type", "observed"}, {"token", token}, {"endpoint", endpoint_json(seen)}}.dump();
}

std::string introduce_request_msg(const std::string& peer, bool secure) {
    return Json{{"type", "introduce_request"}, {"peer", peer}, {"secure", secure}}.dump();
}

std::string introduce_msg(const Introduce& intro) {
    return Json{{"type", "introduce"},
                {"session_id_hex", intro.session.hex()},
                {"peer", intro.peer},
                {"peer_endpoint", endpoint_json(intro.peer_endpoint)},
                {"peer_nat", std::string(to_string(intro.peer_nat))},
                {"role", std::string(to_string(intro.role))},
                {"punch",
                 {{"open_ports", intro.punch.open_ports},
                  {"rate", intro.punch.rate},
                  {"max_seconds", intro.punch.max_seconds}}},
                {"peer_pubkey_b64", intro.peer_pubkey_b64},
                {"secure", intro.secure}}
        .dump();
}

Introduce introduce_from(const Json& j) {
    Introduce intro;
    auto session = SessionId::from_hex(string_field(j, "session_id_hex"));
    auto nat = parse_nat_class(string_field(j, "peer_nat"));
    auto role = parse_role(string_field(j, "role"));
    if (!session || !nat || !role) throw Error(ErrorCode::protocol, "malformed introduce");
    intro.session = *session;
    intro.peer = string_field(j, "peer");
    intro.peer_endpoint = endpoint_from(field(j, "peer_endpoint"));
    intro.peer_nat = *nat;
    intro.role = *role;
    const Json& punch = field(j, "punch");
    intro.punch.open_ports = static_cast<std::int64_t>(number_field(punch, "open_ports"));
    intro.punch.rate = number_field(punch, "rate");
    intro.punch.max_seconds = number_field(punch, "max_seconds");
    intro.peer_pubkey_b64 = string_field(j, "peer_pubkey_b64");
    intro.secure = j.value("secure", true);
    return intro;
}

std::string relay_msg(std::string_view type, const SessionId& session, std::optional<ByteView> payload) {
    Json j{{"type", type}, {"session_id_hex", session.hex()}};
    if (payload) j["payload_b64"] = to_base64(*payload);
    return j.dump();
}

std::string ping_msg(std::uint64_t nonce) { return Json{{"type", "ping"}, {"nonce", nonce}}.dump(); }
std::string pong_msg(std::uint64_t nonce) { return Json{{"type", "pong"}, {"nonce", nonce}}.dump(); }

std::string error_msg(std::string_view code, const std::string& detail) {
    return Json{{"type", "error"}, {"code", code}, {"detail", detail}}.dump();
}

}  // namespace wire

Role role_for(NatClass self, NatClass peer) {
    auto punchable = [](NatClass c) { return c == NatClass::public_host || c == NatClass::easy; };
    if (punchable(self) && punchable(peer)) return Role::direct;
    if (self == NatClass::hard && punchable(peer)) return Role::opener;
    if (punchable(self) && peer == NatClass::hard) return Role::prober;
    return Role::relay;
}

// ---------------------------------------------------------------------------

Coordinator::Coordinator(Options options, Clock clock, DatagramSink datagrams)
    : options_(options), clock_(std::move(clock)), datagrams_(std::move(datagrams)), rng_(options.seed) {}

Coordinator::ConnId Coordinator::on_connect(const Endpoint& source, LineSink sink) {
    const ConnId id = next_conn_++;
    conns_.emplace(id, Conn{source, std::move(sink), std::nullopt});
    return id;
}

void Coordinator::on_disconnect(ConnId conn) {
    auto it = conns_.find(conn);
    if (it == conns_.end()) return;
    if (it->second.node_id) {
        auto node = nodes_.find(*it->second.node_id);
        if (node != nodes_.end() && node->second.conn == conn) node->second.conn.reset();
    }
    conns_.erase(it);
}

void Coordinator::send(ConnId conn, const std::string& line) {
    auto it = conns_.find(conn);
    if (it != conns_.end() && it->second.sink) it->second.sink(line);
}

void Coordinator::error(ConnId conn, std::string_view code, const std::string& detail) {
    send(conn, wire::error_msg(code, detail));
}

bool Coordinator::live(const NodeRecord& rec) const { return rec.conn.has_value() && rec.expiry >= clock_(); }

NodeRecord* Coordinator::caller(ConnId conn) {
    auto c = conns_.find(conn);
    if (c == conns_.end() || !c->second.node_id) return nullptr;
    auto n = nodes_.find(*c->second.node_id);
    if (n == nodes_.end() || n->second.conn != conn) return nullptr;
    return &n->second;
}

void Coordinator::on_line(ConnId conn, std::string_view line) {
    if (!conns_.count(conn)) return;
    if (line.size() > kMaxLineBytes) {
        error(conn, wire::kLineTooLong, "line exceeds " + std::to_string(kMaxLineBytes) + " bytes");
        return;
    }
    Json msg;
    try {
        msg = wire::parse_line(line);
    } catch (const Error& e) {
        error(conn, wire::kMalformed, e.what());
        return;
    }
    const std::string type = msg["type"].get<std::string>();
    try {
        if (type == "register")
            handle_register(conn, msg);
        else if (type == "observe")
            handle_observe_stream(conn, msg);
        else if (type == "introduce_request")
            handle_introduce_request(conn, msg);
        else if (type == "relay_open")
            handle_relay_open(conn, msg);
        else if (type == "relay_data")
            handle_relay_data(conn, msg);
        else if (type == "ping")
            handle_ping(conn, msg);
        else
            error(conn, wire::kUnknownType, type);
    } catch (const Error& e) {
        error(conn, wire::kBadRequest, e.what());
    } catch (const Json::exception& e) {
        error(conn, wire::kBadRequest, e.what());
    }
}

void Coordinator::handle_register(ConnId conn, const Json& msg) {
    if (!msg.contains("node_id") || !msg["node_id"].is_string() || !msg.contains("pubkey_b64") ||
        !msg["pubkey_b64"].is_string())
        throw Error(ErrorCode::protocol, "register needs node_id and pubkey_b64");
    const std::string id = msg["node_id"].get<std::string>();
    if (id.empty() || id.size() > kMaxNodeIdBytes) throw Error(ErrorCode::protocol, "node_id must be 1..64 bytes");
    const Bytes key = from_base64(msg["pubkey_b64"].get<std::string>());
    std::optional<NatClass> nat;
    if (msg.contains("nat")) {
        nat = parse_nat_class(msg["nat"].is_string() ? msg["nat"].get<std::string>() : "");
        if (!nat) throw Error(ErrorCode::protocol, "unknown nat class");
    }

    auto& c = conns_.at(conn);
    auto it = nodes_.find(id);
    if (it != nodes_.end() && it->second.pubkey != key && it->second.expiry >= clock_()) {
        error(conn, wire::kIdentityConflict, "node_id " + id + " is registered with another key");
        return;
    }
    if (it == nodes_.end() || it->second.pubkey != key) {
        NodeRecord rec;
        rec.node_id = id;
        rec.pubkey = key;
        rec.observed = c.source;
        it = nodes_.insert_or_assign(id, std::move(rec)).first;
    }
    NodeRecord& rec = it->second;
    if (rec.conn && *rec.conn != conn) {
        auto old = conns_.find(*rec.conn);
        if (old != conns_.end()) old->second.node_id.reset();
    }
    rec.conn = conn;
    rec.expiry = clock_() + options_.registration_ttl;
    if (!rec.udp_observed) rec.observed = c.source;
    if (nat) rec.nat_class = *nat;
    c.node_id = id;
    send(conn, wire::registered_msg(id, rec.observed));
}

void Coordinator::handle_observe_stream(ConnId conn, const Json& msg) {
    if (!caller(conn)) {
        error(conn, wire::kNotRegistered, "observe before register");
        return;
    }
    const auto token = msg.at("token").get<std::uint64_t>();
    send(conn, wire::observed_msg(token, conns_.at(conn).source));
}

void Coordinator::on_datagram(int listener, const Endpoint& from, ByteView payload) {
    if (payload.size() > kMaxLineBytes) return;
    Json msg;
    try {
        msg = wire::parse_line(to_string(payload));
    } catch (const Error&) {
        return;  // stray datagrams get no answer
    }
    if (msg["type"] != "observe" || !msg.contains("token") || !msg["token"].is_number_unsigned()) return;
    const auto token = msg["token"].get<std::uint64_t>();
    const std::string id = msg.value("node_id", std::string());
    auto it = nodes_.find(id);
    if (it == nodes_.end() || !live(it->second)) {
        datagrams_(listener, from, wire::error_msg(wire::kNotRegistered, "observe from unknown node"));
        return;
    }
    if (listener == 0) {
        it->second.observed = from;
        it->second.udp_observed = true;
    }
    datagrams_(listener, from, wire::observed_msg(token, from));
}

void Coordinator::handle_introduce_request(ConnId conn, const Json& msg) {
    NodeRecord* self = caller(conn);
    if (!self) {
        error(conn, wire::kNotRegistered, "introduce_request before register");
        return;
    }
    const std::string peer_id = msg.at("peer").get<std::string>();
    auto peer_it = nodes_.find(peer_id);
    if (peer_it == nodes_.end() || !live(peer_it->second) || peer_id == self->node_id) {
        error(conn, wire::kNoSuchNode, peer_id);
        return;
    }
    NodeRecord& peer = peer_it->second;
    const bool secure = msg.value("secure", true);

    SessionId sid;
    do {
        sid = SessionId::from_value(rng_.next());
    } while (sessions_.count(sid));
    sessions_.emplace(sid, RelaySession{sid, self->node_id, peer.node_id});

    auto intro_for = [&](const NodeRecord& to, const NodeRecord& other) {
        wire::Introduce intro;
        intro.session = sid;
        intro.peer = other.node_id;
        intro.peer_endpoint = other.observed;
        intro.peer_nat = other.nat_class;
        intro.role = role_for(to.nat_class, other.nat_class);
        intro.punch = options_.punch;
        intro.peer_pubkey_b64 = to_base64(other.pubkey);
        intro.secure = secure;
        return wire::introduce_msg(intro);
    };
    send(*self->conn, intro_for(*self, peer));
    send(*peer.conn, intro_for(peer, *self));
}

void Coordinator::handle_relay_open(ConnId conn, const Json& msg) {
    NodeRecord* self = caller(conn);
    if (!self) {
        error(conn, wire::kNotRegistered, "relay_open before register");
        return;
    }
    const auto sid = SessionId::from_hex(msg.at("session_id_hex").get<std::string>());
    auto it = sid ? sessions_.find(*sid) : sessions_.end();
    if (it == sessions_.end() || (it->second.a != self->node_id && it->second.b != self->node_id)) {
        error(conn, wire::kNoSuchSession, msg.at("session_id_hex").get<std::string>());
        return;
    }
    RelaySession& s = it->second;
    const bool is_a = s.a == self->node_id;
    const std::string& other_id = is_a ? s.b : s.a;
    auto other = nodes_.find(other_id);
    if (other == nodes_.end() || !other->second.conn) {
        error(conn, wire::kPeerGone, other_id);
        return;
    }
    bool& mine = is_a ? s.a_open : s.b_open;
    const bool theirs = is_a ? s.b_open : s.a_open;
    if (mine) return;
    mine = true;
    if (!theirs) {
        // Tell the other side to fall back too.
        send(*other->second.conn, wire::relay_msg("relay_open", s.session));
        return;
    }
    const std::string opened = wire::relay_msg("relay_opened", s.session);
    send(*other->second.conn, opened);
    send(conn, opened);
}

void Coordinator::handle_relay_data(ConnId conn, const Json& msg) {
    NodeRecord* self = caller(conn);
    if (!self) {
        error(conn, wire::kNotRegistered, "relay_data before register");
        return;
    }
    const std::string hex = msg.at("session_id_hex").get<std::string>();
    const auto sid = SessionId::from_hex(hex);
    auto it = sid ? sessions_.find(*sid) : sessions_.end();
    if (it == sessions_.end() || !it->second.opened() ||
        (it->second.a != self->node_id && it->second.b != self->node_id)) {
        error(conn, wire::kNoSuchSession, hex);
        return;
    }
    RelaySession& s = it->second;
    const bool is_a = s.a == self->node_id;
    auto other = nodes_.find(is_a ? s.b : s.a);
    if (other == nodes_.end() || !other->second.conn) {
        error(conn, wire::kPeerGone, is_a ? s.b : s.a);
        return;
    }
    const Bytes payload = from_base64(msg.at("payload_b64").get<std::string>());
    (is_a ? s.a_to_b_bytes : s.b_to_a_bytes) += payload.size();
    ++(is_a ? s.a_to_b_frames : s.b_to_a_frames);
    send(*other->second.conn, wire::relay_msg("relay_data", s.session, payload));
}

void Coordinator::handle_ping(ConnId conn, const Json& msg) {
    const auto nonce = msg.at("nonce").get<std::uint64_t>();
    if (NodeRecord* self = caller(conn)) self->expiry = clock_() + options_.registration_ttl;
    send(conn, wire::pong_msg(nonce));
}

const NodeRecord* Coordinator::node(const std::string& id) const {
    auto it = nodes_.find(id);
    return it == nodes_.end() ? nullptr : &it->second;
}

const RelaySession* Coordinator::session(const SessionId& id) const {
    auto it = sessions_.find(id);
    return it == sessions_.end() ? nullptr : &it->second;
}

}  // namespace bdmesh
