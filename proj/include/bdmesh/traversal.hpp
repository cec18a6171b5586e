#pragma once

#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"
#include "bdmesh/probability.hpp"
#include "bdmesh/rng.hpp"
#include "bdmesh/transport.hpp"

#include <array>
#include <compare>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace bdmesh {

enum class NatClass { public_host, easy, hard, udp_blocked, unknown };
enum class Role { direct, opener, prober, relay };

std::string_view to_string(NatClass c);
std::string_view to_string(Role r);
std::optional<NatClass> parse_nat_class(std::string_view s);
std::optional<Role> parse_role(std::string_view s);

/// 8-byte identifier shared by both ends of one traversal session.
struct SessionId {
    std::array<std::uint8_t, 8> bytes{};

    auto operator<=>(const SessionId&) const = default;

    std::uint64_t value() const { return get_u64(bytes, 0); }
    std::string hex() const { return to_hex(bytes); }
    static SessionId from_value(std::uint64_t v);
    static std::optional<SessionId> from_hex(std::string_view hex);
};

// ---------------------------------------------------------------------------
// Probe datagrams

/// Fixed 22-byte datagram: "BDHP" | version 0x01 | kind | session id (8) |
/// nonce (8, big-endian).
struct ProbePacket {
    enum class Kind : std::uint8_t { probe = 0x01, probe_ack = 0x02, confirm = 0x03 };

    static constexpr std::size_t kSize = 22;
    static constexpr std::uint8_t kVersion = 0x01;

    Kind kind = Kind::probe;
    SessionId session;
    std::uint64_t nonce = 0;

    Bytes encode() const;
    /// nullopt for anything with the wrong length, magic, version or kind.
    static std::optional<ProbePacket> decode(ByteView data);

    bool operator==(const ProbePacket&) const = default;
};

bool looks_like_probe(ByteView data);

// ---------------------------------------------------------------------------
// Session bookkeeping

enum class SessionState { idle, observing, exchanging, punching, established_direct, established_relayed, failed };
enum class Failure { none, timeout, resources, no_path, handshake };

std::string_view to_string(SessionState s);
std::string_view to_string(Failure f);

struct ProbeStats {
    std::int64_t sent = 0;
    std::int64_t received = 0;
    Micros elapsed = 0;
};

/// State holder for one traversal session. Only the documented transitions
/// are accepted; terminal states are final.
class TraversalSession {
public:
    TraversalSession(SessionId id, Role role) : id_(id), role_(role) {}

    const SessionId& id() const { return id_; }
    Role role() const { return role_; }
    SessionState state() const { return state_; }
    Failure failure() const { return failure_; }
    bool terminal() const;

    /// Throws Error(protocol) on an illegal transition.
    void advance(SessionState next);
    void fail(Failure why);

    static bool legal(SessionState from, SessionState to);

private:
    SessionId id_;
    Role role_;
    SessionState state_ = SessionState::idle;
    Failure failure_ = Failure::none;
};

// ---------------------------------------------------------------------------
// Punch configuration and outcomes

struct PunchConfig {
    static constexpr double kMaxProbeRate = 1000.0;

    std::int64_t open_ports = 256;
    double probe_rate = 100.0;
    double max_duration = 20.0;  // seconds
    Micros refresh_interval = 15 * kMicrosPerSecond;
    std::uint64_t seed = 0;
    PortSpace space;
    /// Head start for the opener's mappings before the first probe leaves.
    Micros prober_start_delay = 200 * kMicrosPerMilli;
    /// How long to wait for a PROBE_ACK after the last probe.
    Micros ack_grace = 1 * kMicrosPerSecond;

    std::int64_t budget() const;
    Micros probe_interval() const;
    Micros prober_deadline() const;
    Micros opener_deadline() const;
    /// Throws Error(invalid_parameters).
    void validate() const;
};

struct PunchResult {
    bool established = false;
    Failure failure = Failure::none;
    SocketId socket = 0;
    Endpoint peer;
    ProbeStats stats;
};

using PunchCallback = std::function<void(const PunchResult&)>;

constexpr Micros kDirectProbeInterval = 100 * kMicrosPerMilli;
constexpr Micros kDirectTimeout = 5 * kMicrosPerSecond;
constexpr int kConfirmRetransmits = 3;

/// Simultaneous-open punch between two endpoints that already know each
/// other's external address. Both sides run the same machine.
class DirectPunch {
public:
    DirectPunch(Transport& transport, SocketId socket, SessionId session, Endpoint peer, std::uint64_t seed,
                PunchCallback done);

    void start();
    void on_packet(const Endpoint& from, const ProbePacket& packet);
    bool finished() const { return finished_; }
    const ProbeStats& stats() const { return stats_; }

private:
    void tick();
    void finish(PunchResult result);

    Transport& transport_;
    SocketId socket_;
    SessionId session_;
    Endpoint peer_;
    Rng rng_;
    PunchCallback done_;
    Lifetime lifetime_;
    std::set<std::uint64_t> sent_nonces_;
    std::set<std::uint64_t> acked_nonces_;
    ProbeStats stats_;
    Micros started_at_ = 0;
    bool finished_ = false;
    bool established_ = false;
    TimerHandle tick_timer_ = 0;
    TimerHandle deadline_timer_ = 0;
};

/// Hard-NAT side of a birthday punch: holds `open_ports` sockets, each of
/// which sends to the prober's exact endpoint so its NAT mapping admits
/// packets from there, and answers whichever one gets probed.
class BirthdayOpener {
public:
    /// `passthrough` receives non-probe datagrams arriving on the socket that
    /// ends up carrying the session.
    BirthdayOpener(Transport& transport, SessionId session, PunchConfig config, Endpoint prober, PunchCallback done,
                   DatagramHandler passthrough = {});
    ~BirthdayOpener();
    BirthdayOpener(const BirthdayOpener&) = delete;
    BirthdayOpener& operator=(const BirthdayOpener&) = delete;

    void start();
    std::size_t open_socket_count() const { return sockets_.size(); }
    const std::vector<SocketId>& sockets() const { return sockets_; }
    bool finished() const { return finished_; }
    const ProbeStats& stats() const { return stats_; }

private:
    struct Acked {
        Endpoint from;
        std::uint64_t nonce = 0;
    };

    void on_datagram(SocketId socket, const Endpoint& from, ByteView payload);
    void refresh();
    void establish(SocketId socket, const Endpoint& from);
    void finish(PunchResult result);
    void close_all_except(std::optional<SocketId> keep);

    Transport& transport_;
    SessionId session_;
    PunchConfig config_;
    Endpoint prober_;
    PunchCallback done_;
    DatagramHandler passthrough_;
    Rng rng_;
    Lifetime lifetime_;
    std::vector<SocketId> sockets_;
    std::map<SocketId, Acked> acked_;
    ProbeStats stats_;
    Micros started_at_ = 0;
    std::optional<SocketId> established_socket_;
    bool finished_ = false;
    TimerHandle refresh_timer_ = 0;
    TimerHandle deadline_timer_ = 0;
};

/// Easy-NAT side of a birthday punch: walks a seeded permutation of the port
/// space on the opener's address at `probe_rate`, one port per tick, never
/// repeating a port.
class BirthdayProber {
public:
    BirthdayProber(Transport& transport, SocketId socket, SessionId session, PunchConfig config, Ipv4 opener_ip,
                   PunchCallback done);

    void start();
    void on_packet(const Endpoint& from, const ProbePacket& packet);
    bool finished() const { return finished_; }
    const ProbeStats& stats() const { return stats_; }
    const std::vector<std::uint16_t>& schedule() const { return schedule_; }
    std::size_t probes_sent() const { return next_; }

private:
    void tick();
    void finish(PunchResult result);

    Transport& transport_;
    SocketId socket_;
    SessionId session_;
    PunchConfig config_;
    Ipv4 opener_ip_;
    PunchCallback done_;
    Rng rng_;
    Lifetime lifetime_;
    std::vector<std::uint16_t> schedule_;
    std::size_t next_ = 0;
    std::set<std::uint64_t> sent_nonces_;
    ProbeStats stats_;
    Micros started_at_ = 0;
    bool finished_ = false;
    TimerHandle tick_timer_ = 0;
};

// ---------------------------------------------------------------------------
// NAT classification

/// Pure decision from two observations of the same local socket.
NatClass classify_observations(const std::optional<Endpoint>& first, const std::optional<Endpoint>& second,
                               const Endpoint& local);

constexpr int kObserveTries = 3;
constexpr Micros kObserveRetryInterval = 1 * kMicrosPerSecond;

/// Asks two observer endpoints what source they see for one socket.
class NatClassifier {
public:
    using Callback = std::function<void(NatClass, std::optional<Endpoint> observed)>;

    NatClassifier(Transport& transport, SocketId socket, std::array<Endpoint, 2> observers, std::string node_id,
                  std::uint64_t seed, Callback done);

    void start();
    /// Feeds an `observed` reply. Returns false if the token is not ours.
    bool on_observed(std::uint64_t token, const Endpoint& seen);
    bool finished() const { return finished_; }

private:
    void attempt(int round);
    void decide();

    Transport& transport_;
    SocketId socket_;
    std::array<Endpoint, 2> observers_;
    std::string node_id_;
    Callback done_;
    Lifetime lifetime_;
    std::array<std::uint64_t, 2> tokens_{};
    std::array<std::optional<Endpoint>, 2> seen_;
    bool finished_ = false;
};

}  // namespace bdmesh
