#include "bdmesh/traversal.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bdmesh {

namespace {

constexpr std::array<std::uint8_t, 4> kMagic{'B', 'D', 'H', 'P'};

template <typename E, std::size_t N>
std::optional<E> parse_enum(std::string_view s, const std::array<std::pair<E, std::string_view>, N>& table) {
    for (const auto& [value, name] : table)
        if (name == s) return value;
    return std::nullopt;
}

constexpr std::array<std::pair<NatClass, std::string_view>, 5> kNatNames{{
    {NatClass::public_host, "public"},
    {NatClass::easy, "easy"},
    {NatClass::hard, "hard"},
    {NatClass::udp_blocked, "udp_blocked"},
    {NatClass::unknown, "unknown"},
}};

constexpr std::array<std::pair<Role, std::string_view>, 4> kRoleNames{{
    {Role::direct, "direct"},
    {Role::opener, "opener"},
    {Role::prober, "prober"},
    {Role::relay, "relay"},
}};

void send_probe(Transport& t, SocketId socket, const Endpoint& to, ProbePacket::Kind kind, const SessionId& session,
                std::uint64_t nonce) {
    const Bytes wire = ProbePacket{kind, session, nonce}.encode();
    t.send(socket, to, wire);
}

}  // namespace

std::string_view to_string(NatClass c) {
    for (const auto& [value, name] : kNatNames)
        if (value == c) return name;
    return "unknown";
}

std::string_view to_string(Role r) {
    for (const auto& [value, name] : kRoleNames)
        if (value == r) return name;
    return "relay";
}

std::optional<NatClass> parse_nat_class(std::string_view s) { return parse_enum(s, kNatNames); }
std::optional<Role> parse_role(std::string_view s) { return parse_enum(s, kRoleNames); }

SessionId SessionId::from_value(std::uint64_t v) {
    SessionId id;
    Bytes tmp;
    put_u64(tmp, v);
    std::copy(tmp.begin(), tmp.end(), id.bytes.begin());
    return id;
}

std::optional<SessionId> SessionId::from_hex(std::string_view hex) {
    if (hex.size() != 16) return std::nullopt;
    try {
        const Bytes raw = bdmesh::from_hex(hex);
        SessionId id;
        std::copy(raw.begin(), raw.end(), id.bytes.begin());
        return id;
    } catch (const Error&) {
        return std::nullopt;
    }
}

Bytes ProbePacket::encode() const {
    Bytes out(kMagic.begin(), kMagic.end());
    out.reserve(kSize);
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(kind));
    out.insert(out.end(), session.bytes.begin(), session.bytes.end());
    put_u64(out, nonce);
    return out;
}

std::optional<ProbePacket> ProbePacket::decode(ByteView data) {
    if (!looks_like_probe(data)) return std::nullopt;
    if (data.size() != kSize || data[4] != kVersion) return std::nullopt;
    const std::uint8_t kind = data[5];
    if (kind < 0x01 || kind > 0x03) return std::nullopt;
    ProbePacket p;
    p.kind = static_cast<Kind>(kind);
    std::copy(data.begin() + 6, data.begin() + 14, p.session.bytes.begin());
    p.nonce = get_u64(data, 14);
    return p;
}

bool looks_like_probe(ByteView data) {
    return data.size() >= kMagic.size() && std::equal(kMagic.begin(), kMagic.end(), data.begin());
}

// ---------------------------------------------------------------------------

std::string_view to_string(SessionState s) {
    switch (s) {
        case SessionState::idle: return "idle";
        case SessionState::observing: return "observing";
        case SessionState::exchanging: return "exchanging";
        case SessionState::punching: return "punching";
        case SessionState::established_direct: return "established_direct";
        case SessionState::established_relayed: return "established_relayed";
        case SessionState::failed: return "failed";
    }
    return "failed";
}

std::string_view to_string(Failure f) {
    switch (f) {
        case Failure::none: return "none";
        case Failure::timeout: return "timeout";
        case Failure::resources: return "resources";
        case Failure::no_path: return "no_path";
        case Failure::handshake: return "handshake";
    }
    return "none";
}

bool TraversalSession::terminal() const {
    return state_ == SessionState::established_direct || state_ == SessionState::established_relayed ||
           state_ == SessionState::failed;
}

bool TraversalSession::legal(SessionState from, SessionState to) {
    using S = SessionState;
    if (from == S::established_direct || from == S::established_relayed || from == S::failed) return false;
    if (to == S::failed) return true;
    switch (from) {
        case S::idle: return to == S::observing;
        case S::observing: return to == S::exchanging;
        // Relay-only pairings skip punching altogether.
        case S::exchanging: return to == S::punching || to == S::established_relayed;
        case S::punching: return to == S::established_direct || to == S::established_relayed;
        default: return false;
    }
}

void TraversalSession::advance(SessionState next) {
    if (!legal(state_, next))
        throw Error(ErrorCode::protocol, "illegal session transition " + std::string(to_string(state_)) + " -> " +
                                             std::string(to_string(next)));
    state_ = next;
}

void TraversalSession::fail(Failure why) {
    advance(SessionState::failed);
    failure_ = why;
}

// ---------------------------------------------------------------------------

std::int64_t PunchConfig::budget() const {
    return ProbePlan::from_rate(open_ports, probe_rate, max_duration).budget;
}

Micros PunchConfig::probe_interval() const {
    return static_cast<Micros>(std::llround(static_cast<double>(kMicrosPerSecond) / probe_rate));
}

Micros PunchConfig::prober_deadline() const {
    return prober_start_delay + budget() * probe_interval() + ack_grace;
}

Micros PunchConfig::opener_deadline() const {
    return seconds_to_micros(max_duration) + prober_start_delay + 2 * ack_grace;
}

void PunchConfig::validate() const {
    auto bad = [](const std::string& what) { throw Error(ErrorCode::invalid_parameters, what); };
    if (open_ports < 1 || open_ports > space.size()) bad("open_ports must be in [1, K]");
    if (!(probe_rate >= 1.0) || probe_rate > kMaxProbeRate) bad("probe rate must be in [1, 1000] per second");
    if (!(max_duration > 0.0) || !std::isfinite(max_duration)) bad("max duration must be positive");
    if (budget() > space.size()) bad("max_duration * rate exceeds the port space");
    if (refresh_interval <= 0) bad("refresh interval must be positive");
    if (prober_start_delay < 0 || ack_grace < 0) bad("negative delay");
}

// ---------------------------------------------------------------------------
// DirectPunch

DirectPunch::DirectPunch(Transport& transport, SocketId socket, SessionId session, Endpoint peer, std::uint64_t seed,
                         PunchCallback done)
    : transport_(transport), socket_(socket), session_(session), peer_(peer), rng_(seed), done_(std::move(done)) {}

void DirectPunch::start() {
    started_at_ = transport_.now();
    deadline_timer_ = transport_.call_later(kDirectTimeout, lifetime_.guard([this] {
        if (!finished_) finish(PunchResult{false, Failure::timeout, socket_, peer_, stats_});
    }));
    tick();
}

void DirectPunch::tick() {
    if (finished_) return;
    const std::uint64_t nonce = rng_.next();
    sent_nonces_.insert(nonce);
    send_probe(transport_, socket_, peer_, ProbePacket::Kind::probe, session_, nonce);
    ++stats_.sent;
    tick_timer_ = transport_.call_later(kDirectProbeInterval, lifetime_.guard([this] { tick(); }));
}

void DirectPunch::on_packet(const Endpoint& from, const ProbePacket& packet) {
    if (packet.session != session_ || from != peer_) return;
    switch (packet.kind) {
        case ProbePacket::Kind::probe:
            // Keep answering after establishment so a peer that lost our
            // ACKs can still finish.
            ++stats_.received;
            acked_nonces_.insert(packet.nonce);
            send_probe(transport_, socket_, from, ProbePacket::Kind::probe_ack, session_, packet.nonce);
            break;
        case ProbePacket::Kind::probe_ack: {
            if (established_ || !sent_nonces_.count(packet.nonce)) return;
            ++stats_.received;
            const std::uint64_t nonce = packet.nonce;
            send_probe(transport_, socket_, from, ProbePacket::Kind::confirm, session_, nonce);
            for (int i = 1; i <= kConfirmRetransmits; ++i) {
                transport_.call_later(i * kDirectProbeInterval, lifetime_.guard([this, nonce] {
                    send_probe(transport_, socket_, peer_, ProbePacket::Kind::confirm, session_, nonce);
                }));
            }
            finish(PunchResult{true, Failure::none, socket_, from, stats_});
            break;
        }
        case ProbePacket::Kind::confirm:
            if (established_ || !acked_nonces_.count(packet.nonce)) return;
            finish(PunchResult{true, Failure::none, socket_, from, stats_});
            break;
    }
}

void DirectPunch::finish(PunchResult result) {
    if (finished_) return;
    finished_ = true;
    established_ = result.established;
    transport_.cancel(tick_timer_);
    transport_.cancel(deadline_timer_);
    stats_.elapsed = transport_.now() - started_at_;
    result.stats = stats_;
    if (done_) done_(result);
}

// ---------------------------------------------------------------------------
// BirthdayOpener

BirthdayOpener::BirthdayOpener(Transport& transport, SessionId session, PunchConfig config, Endpoint prober,
                               PunchCallback done, DatagramHandler passthrough)
    : transport_(transport),
      session_(session),
      config_(std::move(config)),
      prober_(prober),
      done_(std::move(done)),
      passthrough_(std::move(passthrough)),
      rng_(derive_seed(config_.seed, 0x4f50454e)) {}

BirthdayOpener::~BirthdayOpener() {
    transport_.cancel(refresh_timer_);
    transport_.cancel(deadline_timer_);
    for (SocketId s : sockets_) transport_.close_socket(s);
}

void BirthdayOpener::start() {
    config_.validate();
    started_at_ = transport_.now();
    sockets_.reserve(static_cast<std::size_t>(config_.open_ports));
    for (std::int64_t i = 0; i < config_.open_ports; ++i) {
        auto s = transport_.open_socket(lifetime_.guard(
            [this](SocketId socket, const Endpoint& from, ByteView payload) { on_datagram(socket, from, payload); }));
        if (!s) {
            close_all_except(std::nullopt);
            // Report asynchronously so callers never see a callback from start().
            transport_.call_later(0, lifetime_.guard([this] {
                finish(PunchResult{false, Failure::resources, 0, prober_, stats_});
            }));
            return;
        }
        sockets_.push_back(*s);
    }
    deadline_timer_ = transport_.call_later(config_.opener_deadline(), lifetime_.guard([this] {
        if (finished_) return;
        close_all_except(std::nullopt);
        finish(PunchResult{false, Failure::timeout, 0, prober_, stats_});
    }));
    refresh();
}

void BirthdayOpener::refresh() {
    if (finished_) return;
    for (SocketId s : sockets_) {
        send_probe(transport_, s, prober_, ProbePacket::Kind::probe, session_, rng_.next());
        ++stats_.sent;
    }
    refresh_timer_ = transport_.call_later(config_.refresh_interval, lifetime_.guard([this] { refresh(); }));
}

void BirthdayOpener::on_datagram(SocketId socket, const Endpoint& from, ByteView payload) {
    const auto packet = ProbePacket::decode(payload);
    if (established_socket_) {
        if (socket != *established_socket_) return;
        if (packet) {
            // Re-ACK duplicate probes; everything else is already settled.
            if (packet->session == session_ && packet->kind == ProbePacket::Kind::probe)
                send_probe(transport_, socket, from, ProbePacket::Kind::probe_ack, session_, packet->nonce);
            return;
        }
        if (!looks_like_probe(payload) && passthrough_) passthrough_(socket, from, payload);
        return;
    }
    if (finished_) return;

    if (!packet) {
        // Any other traffic from the peer we acked stands in for a lost CONFIRM.
        auto it = acked_.find(socket);
        if (it == acked_.end() || it->second.from != from || looks_like_probe(payload)) return;
        establish(socket, from);
        if (passthrough_) passthrough_(socket, from, payload);
        return;
    }
    if (packet->session != session_) return;
    switch (packet->kind) {
        case ProbePacket::Kind::probe:
            ++stats_.received;
            acked_[socket] = Acked{from, packet->nonce};
            send_probe(transport_, socket, from, ProbePacket::Kind::probe_ack, session_, packet->nonce);
            break;
        case ProbePacket::Kind::confirm: {
            auto it = acked_.find(socket);
            if (it != acked_.end() && it->second.from == from && it->second.nonce == packet->nonce)
                establish(socket, from);
            break;
        }
        case ProbePacket::Kind::probe_ack:
            break;
    }
}

void BirthdayOpener::establish(SocketId socket, const Endpoint& from) {
    established_socket_ = socket;
    close_all_except(socket);
    finish(PunchResult{true, Failure::none, socket, from, stats_});
}

void BirthdayOpener::close_all_except(std::optional<SocketId> keep) {
    std::vector<SocketId> kept;
    for (SocketId s : sockets_) {
        if (keep && s == *keep)
            kept.push_back(s);
        else
            transport_.close_socket(s);
    }
    sockets_ = std::move(kept);
}

void BirthdayOpener::finish(PunchResult result) {
    if (finished_) return;
    finished_ = true;
    transport_.cancel(refresh_timer_);
    transport_.cancel(deadline_timer_);
    stats_.elapsed = transport_.now() - started_at_;
    result.stats = stats_;
    if (done_) done_(result);
}

// ---------------------------------------------------------------------------
// BirthdayProber

BirthdayProber::BirthdayProber(Transport& transport, SocketId socket, SessionId session, PunchConfig config,
                               Ipv4 opener_ip, PunchCallback done)
    : transport_(transport),
      socket_(socket),
      session_(session),
      config_(std::move(config)),
      opener_ip_(opener_ip),
      done_(std::move(done)),
      rng_(derive_seed(config_.seed, 0x50524f42)) {}

void BirthdayProber::start() {
    config_.validate();
    schedule_ = schedule_ports(config_.space, config_.budget(), config_.seed);
    started_at_ = transport_.now();
    tick_timer_ = transport_.call_later(config_.prober_start_delay, lifetime_.guard([this] { tick(); }));
}

void BirthdayProber::tick() {
    if (finished_) return;
    if (next_ >= schedule_.size()) {
        tick_timer_ = transport_.call_later(config_.ack_grace, lifetime_.guard([this] {
            finish(PunchResult{false, Failure::timeout, socket_, Endpoint{opener_ip_, 0}, stats_});
        }));
        return;
    }
    const std::uint16_t port = schedule_[next_++];
    const std::uint64_t nonce = rng_.next();
    sent_nonces_.insert(nonce);
    send_probe(transport_, socket_, Endpoint{opener_ip_, port}, ProbePacket::Kind::probe, session_, nonce);
    ++stats_.sent;
    tick_timer_ = transport_.call_later(config_.probe_interval(), lifetime_.guard([this] { tick(); }));
}

void BirthdayProber::on_packet(const Endpoint& from, const ProbePacket& packet) {
    // The opener's own PROBEs are ignored: answering them would hand the
    // prober the port without a probe hit and bypass the model being tested.
    if (finished_ || packet.session != session_ || packet.kind != ProbePacket::Kind::probe_ack) return;
    if (from.ip != opener_ip_ || !sent_nonces_.count(packet.nonce)) return;
    ++stats_.received;
    const std::uint64_t nonce = packet.nonce;
    send_probe(transport_, socket_, from, ProbePacket::Kind::confirm, session_, nonce);
    for (int i = 1; i <= kConfirmRetransmits; ++i) {
        transport_.call_later(i * kDirectProbeInterval, lifetime_.guard([this, from, nonce] {
            send_probe(transport_, socket_, from, ProbePacket::Kind::confirm, session_, nonce);
        }));
    }
    finish(PunchResult{true, Failure::none, socket_, from, stats_});
}

void BirthdayProber::finish(PunchResult result) {
    if (finished_) return;
    finished_ = true;
    transport_.cancel(tick_timer_);
    stats_.elapsed = transport_.now() - started_at_;
    result.stats = stats_;
    if (done_) done_(result);
}

// ---------------------------------------------------------------------------
// NAT classification

NatClass classify_observations(const std::optional<Endpoint>& first, const std::optional<Endpoint>& second,
                               const Endpoint& local) {
    if (!first && !second) return NatClass::udp_blocked;
    if (!first || !second) return NatClass::unknown;
    if (*first == local && *second == local) return NatClass::public_host;
    if (*first == *second) return NatClass::easy;
    return NatClass::hard;
}

NatClassifier::NatClassifier(Transport& transport, SocketId socket, std::array<Endpoint, 2> observers,
                             std::string node_id, std::uint64_t seed, Callback done)
    : transport_(transport),
      socket_(socket),
      observers_(observers),
      node_id_(std::move(node_id)),
      done_(std::move(done)) {
    Rng rng(derive_seed(seed, 0x4f425356));
    // Tokens are JSON numbers; keep them inside the exactly representable range.
    for (auto& t : tokens_) t = rng.next() >> 11;
    if (tokens_[0] == tokens_[1]) tokens_[1] ^= 1;
}

void NatClassifier::start() { attempt(0); }

void NatClassifier::attempt(int round) {
    if (finished_) return;
    for (std::size_t i = 0; i < observers_.size(); ++i) {
        if (seen_[i]) continue;
        const nlohmann::json msg{{"type", "observe"}, {"token", tokens_[i]}, {"node_id", node_id_}};
        transport_.send(socket_, observers_[i], to_bytes(msg.dump()));
    }
    if (round + 1 < kObserveTries)
        transport_.call_later(kObserveRetryInterval, lifetime_.guard([this, round] { attempt(round + 1); }));
    else
        transport_.call_later(kObserveRetryInterval, lifetime_.guard([this] { decide(); }));
}

bool NatClassifier::on_observed(std::uint64_t token, const Endpoint& seen) {
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (tokens_[i] != token) continue;
        if (!finished_ && !seen_[i]) {
            seen_[i] = seen;
            if (seen_[0] && seen_[1]) decide();
        }
        return true;
    }
    return false;
}

void NatClassifier::decide() {
    if (finished_) return;
    finished_ = true;
    const NatClass c = classify_observations(seen_[0], seen_[1], transport_.local_endpoint(socket_));
    std::optional<Endpoint> observed = seen_[0] ? seen_[0] : seen_[1];
    if (done_) done_(c, observed);
}

}  // namespace bdmesh
