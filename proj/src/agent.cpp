#include "bdmesh/agent.hpp"

#include <algorithm>

namespace bdmesh {

std::string_view to_string(LinkPath p) {
    switch (p) {
        case LinkPath::none: return "none";
        case LinkPath::direct: return "direct";
        case LinkPath::relayed: return "relayed";
    }
    return "none";
}

namespace {

Bytes link_header(LinkPacket type, const SessionId& session) {
    Bytes out(9);
    out[0] = static_cast<std::uint8_t>(type);
    std::copy(session.bytes.begin(), session.bytes.end(), out.begin() + 1);
    return out;
}

bool session_matches(ByteView packet, const SessionId& session) {
    return packet.size() >= 9 && std::equal(session.bytes.begin(), session.bytes.end(), packet.begin() + 1);
}

}  // namespace

NodeAgent::NodeAgent(Transport& transport, ControlChannel& control, const Identity& identity, AgentConfig config)
    : transport_(transport),
      control_(control),
      identity_(identity),
      config_(std::move(config)),
      rng_(derive_seed(config_.seed, 0x4147454e54)) {}

NodeAgent::~NodeAgent() {
    links_.clear();
    classifier_.reset();
    if (main_socket_) transport_.close_socket(*main_socket_);
}

void NodeAgent::start() {
    main_socket_ = transport_.open_socket(lifetime_.guard(
        [this](SocketId s, const Endpoint& from, ByteView payload) { on_main_datagram(s, from, payload); }));
    if (!main_socket_) throw Error(ErrorCode::protocol, "cannot open the agent socket");
    send_line(wire::register_msg(config_.node_id, identity_.public_key_b64()));
}

void NodeAgent::send_line(const std::string& line) {
    if (control_up_ && control_.connected()) control_.send_line(line);
}

// ---------------------------------------------------------------------------
// Control channel

void NodeAgent::on_line(const std::string& line) {
    Json msg;
    try {
        msg = wire::parse_line(line);
    } catch (const Error&) {
        return;
    }
    const std::string type = msg["type"].get<std::string>();
    try {
        if (type == "registered")
            on_registered(msg);
        else if (type == "introduce")
            on_introduce(msg);
        else if (type == "relay_open" || type == "relay_opened" || type == "relay_data")
            on_relay(type, msg);
        else if (type == "error")
            on_coordinator_error(msg);
    } catch (const Error&) {
        // A malformed message from the coordinator is dropped.
    } catch (const Json::exception&) {
    }
}

void NodeAgent::on_control_down() {
    control_up_ = false;
    for (auto& [peer, link] : links_) {
        if (link->status.path == LinkPath::relayed) {
            link->status.path = LinkPath::none;
            link->status.ready = false;
            link->status.failure = Failure::no_path;
            settle(*link);
        } else if (link->relay_requested || !link->session.terminal()) {
            fail(*link, Failure::no_path);
        }
    }
}

void NodeAgent::on_registered(const Json& msg) {
    ++registrations_;
    if (registrations_ == 1) {
        observed_ = wire::endpoint_from(msg.at("observed"));
        classifier_ = std::make_unique<NatClassifier>(
            transport_, *main_socket_, config_.observers, config_.node_id, derive_seed(config_.seed, 0x434c53),
            lifetime_.guard([this](NatClass c, std::optional<Endpoint> seen) {
                nat_class_ = c;
                if (seen) observed_ = seen;
                send_line(wire::register_msg(config_.node_id, identity_.public_key_b64(), c));
            }));
        classifier_->start();
        return;
    }
    if (!ready_ && classifier_ && classifier_->finished()) {
        ready_ = true;
        schedule_keepalive();
        schedule_ping();
        if (ready_handler_) ready_handler_();
    }
}

void NodeAgent::schedule_keepalive() {
    transport_.call_later(config_.keepalive_interval, lifetime_.guard([this] {
        keepalive_token_ = rng_.next() >> 11;
        transport_.send(*main_socket_, config_.observers[0],
                        to_bytes(wire::observe_msg(keepalive_token_, config_.node_id)));
        schedule_keepalive();
    }));
}

void NodeAgent::schedule_ping() {
    transport_.call_later(config_.ping_interval, lifetime_.guard([this] {
        send_line(wire::ping_msg(rng_.next() >> 11));
        schedule_ping();
    }));
}

void NodeAgent::on_coordinator_error(const Json& msg) {
    const std::string code = msg.value("code", std::string());
    const std::string detail = msg.value("detail", std::string());
    if (code == wire::kNoSuchSession) {
        if (auto sid = SessionId::from_hex(detail); sid)
            if (Link* link = find(*sid); link && link->status.path != LinkPath::relayed) fail(*link, Failure::no_path);
    } else if (code == wire::kPeerGone) {
        auto it = links_.find(detail);
        if (it != links_.end() && it->second->relay_requested && it->second->status.path != LinkPath::relayed)
            fail(*it->second, Failure::no_path);
    } else if (code == wire::kNoSuchNode && wanted_.count(detail) && !links_.count(detail)) {
        auto link = std::make_unique<Link>(SessionId{}, Role::relay);
        link->status.peer = detail;
        link->status.started_at = transport_.now();
        Link& ref = *link;
        links_[detail] = std::move(link);
        fail(ref, Failure::no_path);
    }
    if (error_handler_) error_handler_(code, detail);
}

// ---------------------------------------------------------------------------
// Datagrams on the main socket

void NodeAgent::on_main_datagram(SocketId, const Endpoint& from, ByteView payload) {
    if (payload.empty()) return;
    if (payload[0] == '{') {
        try {
            const Json msg = wire::parse_line(to_string(payload));
            if (msg["type"] == "observed") on_observed_datagram(msg);
        } catch (const Error&) {
        } catch (const Json::exception&) {
        }
        return;
    }
    if (looks_like_probe(payload)) {
        const auto probe = ProbePacket::decode(payload);
        if (!probe) return;
        Link* link = find(probe->session);
        if (!link) return;
        if (link->direct)
            link->direct->on_packet(from, *probe);
        else if (link->prober)
            link->prober->on_packet(from, *probe);
        return;
    }
    if (payload.size() < 9) return;
    SessionId sid;
    std::copy_n(payload.begin() + 1, 8, sid.bytes.begin());
    Link* link = find(sid);
    if (link && link->status.path == LinkPath::direct && from == link->peer_endpoint)
        handle_link_packet(*link, from, payload);
}

void NodeAgent::on_observed_datagram(const Json& msg) {
    const auto token = msg.at("token").get<std::uint64_t>();
    const Endpoint seen = wire::endpoint_from(msg.at("endpoint"));
    if (classifier_ && classifier_->on_observed(token, seen)) return;
    if (token == keepalive_token_) {
        observed_ = seen;
        return;
    }
    for (auto& [peer, link] : links_) {
        if (link->observe_token == token && link->session.state() == SessionState::observing) {
            begin_exchange(*link);
            return;
        }
    }
}

// ---------------------------------------------------------------------------
// Sessions

NodeAgent::Link* NodeAgent::find(const SessionId& session) {
    auto it = by_session_.find(session);
    if (it == by_session_.end()) return nullptr;
    auto l = links_.find(it->second);
    return l == links_.end() ? nullptr : l->second.get();
}

void NodeAgent::connect(const std::string& peer, bool secure) {
    wanted_[peer] = secure;
    send_line(wire::introduce_request_msg(peer, secure));
}

void NodeAgent::on_introduce(const Json& msg) {
    const wire::Introduce intro = wire::introduce_from(msg);
    const Bytes key = from_base64(intro.peer_pubkey_b64);
    if (key.size() != 32) throw Error(ErrorCode::protocol, "peer key must be 32 bytes");

    // A newer introduction for the same peer replaces the old link on both
    // sides, since the coordinator sends both copies in the same order.
    if (auto old = links_.find(intro.peer); old != links_.end()) {
        by_session_.erase(old->second->status.session);
        links_.erase(old);
    }
    auto owned = std::make_unique<Link>(intro.session, intro.role);
    Link& link = *owned;
    link.intro = intro;
    std::copy(key.begin(), key.end(), link.peer_key.begin());
    link.status.peer = intro.peer;
    link.status.session = intro.session;
    link.status.role = intro.role;
    link.status.secure = intro.secure;
    link.status.started_at = transport_.now();
    links_[intro.peer] = std::move(owned);
    by_session_[intro.session] = intro.peer;

    // Refresh our own mapping with the observer before punching.
    link.session.advance(SessionState::observing);
    link.status.state = link.session.state();
    link.observe_token = rng_.next() >> 11;
    transport_.send(*main_socket_, config_.observers[0], to_bytes(wire::observe_msg(link.observe_token, config_.node_id)));
    link.observe_timer = transport_.call_later(config_.observe_wait, link.lifetime.guard([this, l = &link] {
        if (l->session.state() == SessionState::observing) begin_exchange(*l);
    }));
}

void NodeAgent::begin_exchange(Link& link) {
    transport_.cancel(link.observe_timer);
    link.session.advance(SessionState::exchanging);
    link.status.state = link.session.state();
    if (link.status.role == Role::relay) {
        fallback(link);
        return;
    }
    start_punch(link);
}

void NodeAgent::start_punch(Link& link) {
    link.session.advance(SessionState::punching);
    link.status.state = link.session.state();

    PunchConfig cfg;
    cfg.open_ports = link.intro.punch.open_ports;
    cfg.probe_rate = link.intro.punch.rate;
    cfg.max_duration = link.intro.punch.max_seconds;
    cfg.seed = derive_seed(config_.seed, link.status.session.value());
    const SessionId sid = link.status.session;
    auto done = link.lifetime.guard([this, l = &link](const PunchResult& r) { on_punch_done(*l, r); });

    switch (link.status.role) {
        case Role::direct:
            link.socket = *main_socket_;
            link.direct = std::make_unique<DirectPunch>(transport_, *main_socket_, sid, link.intro.peer_endpoint,
                                                        cfg.seed, done);
            link.direct->start();
            return;
        case Role::prober:
        case Role::opener:
            try {
                cfg.validate();
            } catch (const Error&) {
                fallback(link);
                return;
            }
            if (link.status.role == Role::prober) {
                link.socket = *main_socket_;
                link.prober = std::make_unique<BirthdayProber>(transport_, *main_socket_, sid, cfg,
                                                               link.intro.peer_endpoint.ip, done);
                link.prober->start();
            } else {
                link.opener = std::make_unique<BirthdayOpener>(
                    transport_, sid, cfg, link.intro.peer_endpoint, done,
                    lifetime_.guard([this, sid](SocketId, const Endpoint& from, ByteView payload) {
                        Link* l = find(sid);
                        if (l && l->status.path == LinkPath::direct && from == l->peer_endpoint)
                            handle_link_packet(*l, from, payload);
                    }));
                link.opener->start();
            }
            return;
        case Role::relay:
            fallback(link);
            return;
    }
}

void NodeAgent::on_punch_done(Link& link, const PunchResult& result) {
    link.status.stats = result.stats;
    if (link.session.state() != SessionState::punching) return;
    if (!result.established) {
        fallback(link);
        return;
    }
    link.socket = result.socket;
    link.peer_endpoint = result.peer;
    link.session.advance(SessionState::established_direct);
    link.status.state = link.session.state();
    link.status.path = LinkPath::direct;
    path_keepalive(link);
    start_link_layer(link);
}

void NodeAgent::fallback(Link& link) {
    if (link.session.state() == SessionState::observing) {
        transport_.cancel(link.observe_timer);
        link.session.advance(SessionState::exchanging);
        link.status.state = link.session.state();
    }
    const SessionState s = link.session.state();
    if (s == SessionState::failed || s == SessionState::established_relayed) return;
    if (link.relay_requested) return;
    if (s != SessionState::established_direct) retire_machines(link);
    link.relay_requested = true;
    if (!control_up_ || !control_.connected()) {
        fail(link, Failure::no_path);
        return;
    }
    send_line(wire::relay_msg("relay_open", link.status.session));
    link.relay_timer = transport_.call_later(config_.relay_wait, link.lifetime.guard([this, l = &link] {
        if (l->status.path != LinkPath::relayed && !l->session.terminal()) fail(*l, Failure::no_path);
    }));
}

void NodeAgent::on_relay(const std::string& type, const Json& msg) {
    const auto sid = SessionId::from_hex(msg.at("session_id_hex").get<std::string>());
    Link* link = sid ? find(*sid) : nullptr;
    if (!link) return;
    if (type == "relay_open") {
        fallback(*link);
    } else if (type == "relay_opened") {
        on_relay_opened(*link);
    } else if (link->status.path == LinkPath::relayed) {
        const Bytes payload = from_base64(msg.at("payload_b64").get<std::string>());
        handle_link_packet(*link, Endpoint{}, payload);
    }
}

void NodeAgent::on_relay_opened(Link& link) {
    if (!link.relay_requested || link.session.state() == SessionState::failed) return;
    transport_.cancel(link.relay_timer);
    const SessionState s = link.session.state();
    if (s == SessionState::exchanging || s == SessionState::punching) {
        retire_machines(link);
        link.session.advance(SessionState::established_relayed);
        link.status.state = link.session.state();
    }
    link.status.path = LinkPath::relayed;
    if (!link.link_layer_started)
        start_link_layer(link);
    else if (link.status.ready)
        settle(link);
}

void NodeAgent::fail(Link& link, Failure why) {
    if (!link.session.terminal()) link.session.fail(why);
    link.status.state = link.session.state();
    link.status.failure = why;
    link.status.ready = false;
    transport_.cancel(link.observe_timer);
    transport_.cancel(link.relay_timer);
    transport_.cancel(link.handshake_timer);
    if (link.status.path != LinkPath::direct) retire_machines(link);
    settle(link);
}

void NodeAgent::retire_machines(Link& link) {
    // Machines may be on the call stack; free them on a later turn.
    bool any = false;
    if (link.direct) retired_direct_.push_back(std::move(link.direct)), any = true;
    if (link.opener) retired_openers_.push_back(std::move(link.opener)), any = true;
    if (link.prober) retired_probers_.push_back(std::move(link.prober)), any = true;
    if (!any) return;
    transport_.call_later(0, lifetime_.guard([this] {
        retired_direct_.clear();
        retired_openers_.clear();
        retired_probers_.clear();
    }));
}

void NodeAgent::settle(Link& link) {
    link.status.settled_at = transport_.now();
    if (link_handler_) link_handler_(link.status);
}

// ---------------------------------------------------------------------------
// Link layer

void NodeAgent::start_link_layer(Link& link) {
    link.link_layer_started = true;
    if (!link.status.secure) {
        mark_ready(link);
        return;
    }
    const bool initiator = config_.node_id < link.status.peer;
    std::optional<std::uint64_t> eph;
    if (config_.deterministic_ephemerals) eph = derive_seed(config_.seed, link.status.session.value() ^ 0x4853);
    link.handshake = std::make_unique<Handshake>(identity_, link.peer_key, link.status.session, initiator, eph);
    link.handshake_started = transport_.now();
    handshake_tick(link);
}

void NodeAgent::handshake_tick(Link& link) {
    if (link.status.ready || link.status.failure != Failure::none) return;
    if (transport_.now() - link.handshake_started >= kHandshakeTimeout) {
        link.status.handshake_error = HandshakeError::timeout;
        fail(link, Failure::handshake);
        return;
    }
    const Handshake& hs = *link.handshake;
    if (hs.initiator() && !hs.done()) {
        Bytes packet = link_header(LinkPacket::hs_init, link.status.session);
        packet.insert(packet.end(), hs.hello().begin(), hs.hello().end());
        send_link_packet(link, packet);
    } else if (!hs.initiator() && hs.done()) {
        Bytes packet = link_header(LinkPacket::hs_resp, link.status.session);
        packet.insert(packet.end(), hs.response().begin(), hs.response().end());
        send_link_packet(link, packet);
    }
    link.handshake_timer =
        transport_.call_later(kHandshakeRetry, link.lifetime.guard([this, l = &link] { handshake_tick(*l); }));
}

void NodeAgent::send_link_packet(Link& link, ByteView packet) {
    if (link.status.path == LinkPath::direct)
        transport_.send(link.socket, link.peer_endpoint, packet);
    else if (link.status.path == LinkPath::relayed)
        send_line(wire::relay_msg("relay_data", link.status.session, packet));
}

void NodeAgent::handle_link_packet(Link& link, const Endpoint&, ByteView packet) {
    if (packet.empty() || link.status.failure != Failure::none) return;
    const auto type = static_cast<LinkPacket>(packet[0]);
    switch (type) {
        case LinkPacket::hs_init:
        case LinkPacket::hs_resp: {
            if (!link.handshake || !session_matches(packet, link.status.session)) return;
            Handshake& hs = *link.handshake;
            const ByteView body = packet.subspan(9);
            if (type == LinkPacket::hs_init && !hs.initiator()) {
                auto reply = hs.respond(body);
                if (!reply) {
                    if (hs.error() == HandshakeError::identity || hs.error() == HandshakeError::session) {
                        link.status.handshake_error = hs.error();
                        fail(link, Failure::handshake);
                    }
                    return;
                }
                if (!link.channel) link.channel = std::make_unique<SecureChannel>(*hs.keys(), link.status.session);
                Bytes out = link_header(LinkPacket::hs_resp, link.status.session);
                out.insert(out.end(), reply->begin(), reply->end());
                send_link_packet(link, out);
            } else if (type == LinkPacket::hs_resp && hs.initiator()) {
                if (!hs.finish(body)) {
                    if (hs.error() == HandshakeError::identity || hs.error() == HandshakeError::session) {
                        link.status.handshake_error = hs.error();
                        fail(link, Failure::handshake);
                    }
                    return;
                }
                if (!link.channel) link.channel = std::make_unique<SecureChannel>(*hs.keys(), link.status.session);
                // An empty sealed frame tells the responder we have the keys.
                Bytes ready{static_cast<std::uint8_t>(LinkPacket::sealed)};
                const Bytes frame = link.channel->seal(Bytes{});
                ready.insert(ready.end(), frame.begin(), frame.end());
                send_link_packet(link, ready);
                mark_ready(link);
            }
            return;
        }
        case LinkPacket::sealed: {
            if (!link.channel) return;
            Bytes plain;
            const OpenResult r = link.channel->open(packet.subspan(1), plain);
            if (r != OpenResult::ok) {
                ++link.status.frames_rejected;
                return;
            }
            mark_ready(link);
            if (!plain.empty()) deliver_fragment(link, plain);
            return;
        }
        case LinkPacket::plain: {
            // Plaintext is never accepted on an encrypted link.
            if (link.status.secure || !session_matches(packet, link.status.session)) return;
            auto body = open_plain_frame(packet.subspan(9));
            if (body) deliver_fragment(link, *body);
            return;
        }
        case LinkPacket::keepalive:
            return;
    }
}

void NodeAgent::mark_ready(Link& link) {
    if (link.status.ready) return;
    link.status.ready = true;
    transport_.cancel(link.handshake_timer);
    while (!link.pending.empty()) {
        transmit(link, link.pending.front());
        link.pending.pop_front();
    }
    settle(link);
}

bool NodeAgent::send(const std::string& peer, ByteView message) {
    auto it = links_.find(peer);
    if (it == links_.end()) return false;
    Link& link = *it->second;
    if (link.status.failure != Failure::none || link.session.state() == SessionState::failed) return false;
    if (message.size() > kMaxFragments * kFragmentPayload) return false;
    if (link.status.ready && link.status.path != LinkPath::none)
        transmit(link, message);
    else
        link.pending.emplace_back(message.begin(), message.end());
    return true;
}

void NodeAgent::transmit(Link& link, ByteView message) {
    const std::uint32_t msg_id = link.next_msg_id++;
    const std::size_t count = std::max<std::size_t>(1, (message.size() + kFragmentPayload - 1) / kFragmentPayload);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t at = i * kFragmentPayload;
        const std::size_t len = std::min(kFragmentPayload, message.size() - std::min(at, message.size()));
        Bytes fragment;
        fragment.reserve(kFragmentHeader + len);
        put_u32(fragment, msg_id);
        put_u16(fragment, static_cast<std::uint16_t>(i));
        put_u16(fragment, static_cast<std::uint16_t>(count));
        fragment.insert(fragment.end(), message.begin() + static_cast<std::ptrdiff_t>(at),
                        message.begin() + static_cast<std::ptrdiff_t>(at + len));
        Bytes packet;
        if (link.status.secure) {
            packet.push_back(static_cast<std::uint8_t>(LinkPacket::sealed));
            const Bytes frame = link.channel->seal(fragment);
            packet.insert(packet.end(), frame.begin(), frame.end());
        } else {
            packet = link_header(LinkPacket::plain, link.status.session);
            const Bytes frame = plain_frame(fragment);
            packet.insert(packet.end(), frame.begin(), frame.end());
        }
        send_link_packet(link, packet);
    }
}

void NodeAgent::deliver_fragment(Link& link, ByteView fragment) {
    if (fragment.size() < kFragmentHeader) return;
    const std::uint32_t msg_id = get_u32(fragment, 0);
    const std::uint16_t index = get_u16(fragment, 4);
    const std::uint16_t count = get_u16(fragment, 6);
    if (count == 0 || count > kMaxFragments || index >= count) return;
    const ByteView body = fragment.subspan(kFragmentHeader);
    if (count == 1) {
        if (message_handler_) message_handler_(link.status.peer, Bytes(body.begin(), body.end()));
        return;
    }
    Reassembly& r = link.partial[msg_id];
    if (r.count == 0) {
        r.count = count;
        r.parts.resize(count);
    }
    if (r.count != count || r.parts[index]) return;
    r.parts[index] = Bytes(body.begin(), body.end());
    if (++r.received < r.count) return;
    Bytes whole;
    for (auto& part : r.parts) whole.insert(whole.end(), part->begin(), part->end());
    link.partial.erase(msg_id);
    if (message_handler_) message_handler_(link.status.peer, whole);
    // Bound memory held by messages that will never complete.
    while (link.partial.size() > 64) link.partial.erase(link.partial.begin());
}

void NodeAgent::path_keepalive(Link& link) {
    link.keepalive_timer = transport_.call_later(config_.keepalive_interval, link.lifetime.guard([this, l = &link] {
        if (l->status.path != LinkPath::direct) return;
        send_link_packet(*l, link_header(LinkPacket::keepalive, l->status.session));
        path_keepalive(*l);
    }));
}

const LinkStatus* NodeAgent::link(const std::string& peer) const {
    auto it = links_.find(peer);
    return it == links_.end() ? nullptr : &it->second->status;
}

std::vector<LinkStatus> NodeAgent::links() const {
    std::vector<LinkStatus> out;
    for (const auto& [peer, link] : links_) out.push_back(link->status);
    return out;
}

}  // namespace bdmesh
