#pragma once

#include "bdmesh/rendezvous.hpp"
#include "bdmesh/secure_link.hpp"
#include "bdmesh/transport.hpp"
#include "bdmesh/traversal.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace bdmesh {

/// Link packet types, first byte of every non-probe datagram or relay
/// payload exchanged between agents.
enum class LinkPacket : std::uint8_t {
    hs_init = 0x10,
    hs_resp = 0x11,
    sealed = 0x20,
    plain = 0x21,
    keepalive = 0x22,
};

/// App messages are cut into chunks this size so a sealed relay frame stays
/// under 1 KiB.
constexpr std::size_t kFragmentPayload = 960;
constexpr std::size_t kFragmentHeader = 8;  // msg id u32, index u16, count u16
constexpr std::size_t kMaxFragments = 1024;

constexpr Micros kHandshakeRetry = 250 * kMicrosPerMilli;
constexpr Micros kHandshakeTimeout = 5 * kMicrosPerSecond;

enum class LinkPath { none, direct, relayed };
std::string_view to_string(LinkPath p);

struct AgentConfig {
    std::string node_id;
    /// The coordinator's two UDP observation listeners.
    std::array<Endpoint, 2> observers;
    std::uint64_t seed = 1;
    /// Derive handshake ephemerals from the seed (simulation only).
    bool deterministic_ephemerals = false;
    Micros observe_wait = 1 * kMicrosPerSecond;
    Micros relay_wait = 10 * kMicrosPerSecond;
    Micros keepalive_interval = 15 * kMicrosPerSecond;
    Micros ping_interval = 20 * kMicrosPerSecond;
};

struct LinkStatus {
    std::string peer;
    SessionId session;
    Role role = Role::relay;
    SessionState state = SessionState::idle;
    Failure failure = Failure::none;
    HandshakeError handshake_error = HandshakeError::none;
    LinkPath path = LinkPath::none;
    bool secure = true;
    /// Handshake finished (or not needed); app data flows.
    bool ready = false;
    ProbeStats stats;
    Micros started_at = 0;
    Micros settled_at = 0;
    std::uint64_t frames_rejected = 0;
};

/// The per-node agent: registers with the coordinator, classifies its NAT,
/// and drives one traversal session plus link layer per peer.
class NodeAgent {
public:
    using MessageHandler = std::function<void(const std::string& peer, const Bytes& message)>;
    using LinkHandler = std::function<void(const LinkStatus& status)>;
    using ErrorHandler = std::function<void(const std::string& code, const std::string& detail)>;

    NodeAgent(Transport& transport, ControlChannel& control, const Identity& identity, AgentConfig config);
    ~NodeAgent();
    NodeAgent(const NodeAgent&) = delete;
    NodeAgent& operator=(const NodeAgent&) = delete;

    void start();
    /// Feed every line received on the control channel.
    void on_line(const std::string& line);
    /// The control channel is gone.
    void on_control_down();

    void on_ready(std::function<void()> fn) { ready_handler_ = std::move(fn); }
    void on_message(MessageHandler fn) { message_handler_ = std::move(fn); }
    void on_link(LinkHandler fn) { link_handler_ = std::move(fn); }
    void on_error(ErrorHandler fn) { error_handler_ = std::move(fn); }

    bool ready() const { return ready_; }
    const std::string& node_id() const { return config_.node_id; }
    NatClass nat_class() const { return nat_class_; }
    std::optional<Endpoint> observed() const { return observed_; }

    void connect(const std::string& peer, bool secure);
    /// Queues until the link is ready. False when there is no usable link.
    bool send(const std::string& peer, ByteView message);

    const LinkStatus* link(const std::string& peer) const;
    std::vector<LinkStatus> links() const;

private:
    struct Reassembly {
        std::uint16_t count = 0;
        std::uint16_t received = 0;
        std::vector<std::optional<Bytes>> parts;
    };

    struct Link {
        LinkStatus status;
        wire::Introduce intro;
        TraversalSession session;
        PublicKey peer_key{};
        Lifetime lifetime;
        std::unique_ptr<DirectPunch> direct;
        std::unique_ptr<BirthdayOpener> opener;
        std::unique_ptr<BirthdayProber> prober;
        SocketId socket = 0;
        Endpoint peer_endpoint;
        std::uint64_t observe_token = 0;
        bool relay_requested = false;
        bool link_layer_started = false;
        std::unique_ptr<Handshake> handshake;
        std::unique_ptr<SecureChannel> channel;
        TimerHandle observe_timer = 0;
        TimerHandle relay_timer = 0;
        TimerHandle handshake_timer = 0;
        TimerHandle keepalive_timer = 0;
        Micros handshake_started = 0;
        std::uint32_t next_msg_id = 0;
        std::map<std::uint32_t, Reassembly> partial;
        std::deque<Bytes> pending;

        Link(SessionId id, Role role) : session(id, role) {}
    };

    void send_line(const std::string& line);
    void on_main_datagram(SocketId socket, const Endpoint& from, ByteView payload);
    void on_observed_datagram(const Json& msg);
    void on_registered(const Json& msg);
    void on_introduce(const Json& msg);
    void on_relay(const std::string& type, const Json& msg);
    void on_coordinator_error(const Json& msg);
    void schedule_keepalive();
    void schedule_ping();

    Link* find(const SessionId& session);
    void begin_exchange(Link& link);
    void start_punch(Link& link);
    void on_punch_done(Link& link, const PunchResult& result);
    void fallback(Link& link);
    void on_relay_opened(Link& link);
    void fail(Link& link, Failure why);
    void retire_machines(Link& link);
    void settle(Link& link);

    void start_link_layer(Link& link);
    void handshake_tick(Link& link);
    void send_link_packet(Link& link, ByteView packet);
    void handle_link_packet(Link& link, const Endpoint& from, ByteView packet);
    void deliver_fragment(Link& link, ByteView fragment);
    void mark_ready(Link& link);
    void transmit(Link& link, ByteView message);
    void path_keepalive(Link& link);

    Transport& transport_;
    ControlChannel& control_;
    const Identity& identity_;
    AgentConfig config_;
    Lifetime lifetime_;
    Rng rng_;
    std::optional<SocketId> main_socket_;
    std::unique_ptr<NatClassifier> classifier_;
    NatClass nat_class_ = NatClass::unknown;
    std::optional<Endpoint> observed_;
    int registrations_ = 0;
    bool ready_ = false;
    bool control_up_ = true;
    std::uint64_t keepalive_token_ = 0;
    std::map<std::string, bool> wanted_;  // peers we asked for, with secure flag
    std::map<std::string, std::unique_ptr<Link>> links_;
    std::map<SessionId, std::string> by_session_;
    std::vector<std::unique_ptr<DirectPunch>> retired_direct_;
    std::vector<std::unique_ptr<BirthdayOpener>> retired_openers_;
    std::vector<std::unique_ptr<BirthdayProber>> retired_probers_;

    std::function<void()> ready_handler_;
    MessageHandler message_handler_;
    LinkHandler link_handler_;
    ErrorHandler error_handler_;
};

}  // namespace bdmesh
