#pragma once

#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"
#include "bdmesh/rng.hpp"
#include "bdmesh/traversal.hpp"

#include <json.hpp>

#include <functional>
#include <map>
#include <optional>
#include <string>

namespace bdmesh {

using Json = nlohmann::json;

constexpr std::size_t kMaxLineBytes = 8192;
constexpr std::size_t kMaxNodeIdBytes = 64;
constexpr Micros kRegistrationTtl = 60 * kMicrosPerSecond;

namespace wire {

// Error codes carried in {"type":"error","code":...}.
inline constexpr std::string_view kIdentityConflict = "identity-conflict";
inline constexpr std::string_view kNotRegistered = "not-registered";
inline constexpr std::string_view kNoSuchNode = "no-such-node";
inline constexpr std::string_view kNoSuchSession = "no-such-session";
inline constexpr std::string_view kPeerGone = "peer-gone";
inline constexpr std::string_view kUnknownType = "unknown-type";
inline constexpr std::string_view kLineTooLong = "line-too-long";
inline constexpr std::string_view kMalformed = "malformed";
inline constexpr std::string_view kBadRequest = "bad-request";

struct PunchParams {
    std::int64_t open_ports = 256;
    double rate = 100.0;
    double max_seconds = 20.0;
};

struct Introduce {
    SessionId session;
    std::string peer;
    Endpoint peer_endpoint;
    NatClass peer_nat = NatClass::unknown;
    Role role = Role::relay;
    PunchParams punch;
    std::string peer_pubkey_b64;
    bool secure = true;
};

Json endpoint_json(const Endpoint& ep);
/// Throws Error(protocol) on a missing or malformed endpoint object.
Endpoint endpoint_from(const Json& j);

/// Parses one control line. Throws Error(protocol) on bad JSON, a non-object
/// or a missing "type".
Json parse_line(std::string_view line);

std::string register_msg(const std::string& node_id, const std::string& pubkey_b64,
                         std::optional<NatClass> nat = std::nullopt);
std::string registered_msg(const std::string& node_id, const Endpoint& observed);
std::string observe_msg(std::uint64_t token, const std::string& node_id);
std::string observed_msg(std::uint64_t token, const Endpoint& seen);
std::string introduce_request_msg(const std::string& peer, bool secure);
std::string introduce_msg(const Introduce& intro);
Introduce introduce_from(const Json& j);
std::string relay_msg(std::string_view type, const SessionId& session, std::optional<ByteView> payload = std::nullopt);
std::string ping_msg(std::uint64_t nonce);
std::string pong_msg(std::uint64_t nonce);
std::string error_msg(std::string_view code, const std::string& detail);

}  // namespace wire

/// Role for `self` when paired with `peer`. Total and symmetric in the
/// sense that role_for(a, b) and role_for(b, a) always form a valid pair.
Role role_for(NatClass self, NatClass peer);

struct NodeRecord {
    std::string node_id;
    Bytes pubkey;
    /// Source of the latest observe on the first UDP listener; before any,
    /// the stream's source address.
    Endpoint observed;
    bool udp_observed = false;
    NatClass nat_class = NatClass::unknown;
    Micros expiry = 0;
    std::optional<std::uint64_t> conn;
};

struct RelaySession {
    SessionId session;
    std::string a;
    std::string b;
    bool a_open = false;
    bool b_open = false;
    std::uint64_t a_to_b_bytes = 0;
    std::uint64_t b_to_a_bytes = 0;
    std::uint64_t a_to_b_frames = 0;
    std::uint64_t b_to_a_frames = 0;

    bool opened() const { return a_open && b_open; }
};

/// Rendezvous server logic, independent of sockets. The owner feeds it
/// connection events, lines and datagrams and supplies the sinks that carry
/// replies back out.
class Coordinator {
public:
    using ConnId = std::uint64_t;
    using LineSink = std::function<void(const std::string& line)>;
    /// Sends a datagram from UDP listener `listener` (0 or 1).
    using DatagramSink = std::function<void(int listener, const Endpoint& to, const std::string& payload)>;
    using Clock = std::function<Micros()>;

    struct Options {
        wire::PunchParams punch;
        Micros registration_ttl = kRegistrationTtl;
        std::uint64_t seed = 1;
    };

    Coordinator(Options options, Clock clock, DatagramSink datagrams);

    ConnId on_connect(const Endpoint& source, LineSink sink);
    void on_disconnect(ConnId conn);
    void on_line(ConnId conn, std::string_view line);
    void on_datagram(int listener, const Endpoint& from, ByteView payload);

    const NodeRecord* node(const std::string& id) const;
    std::size_t node_count() const { return nodes_.size(); }
    const RelaySession* session(const SessionId& id) const;
    std::size_t session_count() const { return sessions_.size(); }

private:
    struct Conn {
        Endpoint source;
        LineSink sink;
        std::optional<std::string> node_id;
    };

    void send(ConnId conn, const std::string& line);
    void error(ConnId conn, std::string_view code, const std::string& detail);
    bool live(const NodeRecord& rec) const;
    NodeRecord* caller(ConnId conn);

    void handle_register(ConnId conn, const Json& msg);
    void handle_observe_stream(ConnId conn, const Json& msg);
    void handle_introduce_request(ConnId conn, const Json& msg);
    void handle_relay_open(ConnId conn, const Json& msg);
    void handle_relay_data(ConnId conn, const Json& msg);
    void handle_ping(ConnId conn, const Json& msg);

    Options options_;
    Clock clock_;
    DatagramSink datagrams_;
    Rng rng_;
    ConnId next_conn_ = 1;
    std::map<ConnId, Conn> conns_;
    std::map<std::string, NodeRecord> nodes_;
    std::map<SessionId, RelaySession> sessions_;
};

}  // namespace bdmesh
