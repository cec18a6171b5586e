#pragma once

#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"
#include "bdmesh/probability.hpp"
#include "bdmesh/rng.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace bdmesh::sim {

enum class MappingMode { endpoint_independent, endpoint_dependent };
enum class FilteringMode { endpoint_independent, address_dependent, address_and_port_dependent };
enum class PortAllocation { uniform_random, sequential };

std::string_view to_string(MappingMode m);
std::string_view to_string(FilteringMode f);
std::string_view to_string(PortAllocation a);
std::optional<MappingMode> parse_mapping_mode(std::string_view s);
std::optional<FilteringMode> parse_filtering_mode(std::string_view s);
std::optional<PortAllocation> parse_port_allocation(std::string_view s);

constexpr Micros kDefaultMappingTtl = 30 * kMicrosPerSecond;

struct NatProfile {
    std::string nat_id;
    Ipv4 public_ip;
    MappingMode mapping = MappingMode::endpoint_independent;
    FilteringMode filtering = FilteringMode::endpoint_independent;
    PortAllocation allocation = PortAllocation::uniform_random;
    Micros mapping_ttl = kDefaultMappingTtl;
    PortSpace alloc_space;

    /// Endpoint-independent mapping and filtering.
    static NatProfile easy(std::string id, Ipv4 public_ip);
    /// Endpoint-dependent mapping with address-and-port-dependent filtering
    /// (a symmetric NAT).
    static NatProfile hard(std::string id, Ipv4 public_ip);
};

struct MappingEntry {
    Endpoint internal;
    std::optional<Endpoint> remote;  // set iff the NAT maps per destination
    std::uint16_t external_port = 0;
    Micros expiry = 0;
    std::set<Endpoint> contacted;  // destinations sent to through this mapping
};

enum class DropReason { no_mapping, filtered, expired, loss, udp_blocked, no_socket, ports_exhausted };

std::string_view to_string(DropReason r);

struct InboundDecision {
    std::optional<Endpoint> deliver_to;  // internal endpoint when delivered
    DropReason reason = DropReason::no_mapping;
};

/// One NAT device. Live entries never share an external port; an entry is
/// live while now <= expiry.
class Nat {
public:
    Nat(NatProfile profile, std::uint64_t seed);

    const NatProfile& profile() const { return profile_; }

    /// Translates an outbound datagram's source, creating or refreshing the
    /// mapping. Throws Error(ports_exhausted) when no external port is free.
    Endpoint outbound(const Endpoint& internal, const Endpoint& dst, Micros now);

    /// Filtering decision for a datagram from `src` to our public ip.
    InboundDecision inbound(const Endpoint& src, std::uint16_t external_port, Micros now);

    /// Drops entries whose expiry < now. Returns the number removed.
    std::size_t expire(Micros now);

    std::size_t live_mappings(Micros now) const;
    std::vector<MappingEntry> live_entries(Micros now) const;
    const MappingEntry* find_external(std::uint16_t port) const;
    /// External port currently used for (internal -> dst), if any.
    std::optional<std::uint16_t> mapped_port(const Endpoint& internal, const Endpoint& dst, Micros now) const;

    std::uint64_t expired_total() const { return expired_total_; }

private:
    struct Key {
        Endpoint internal;
        std::optional<Endpoint> remote;
        auto operator<=>(const Key&) const = default;
    };

    Key key_for(const Endpoint& internal, const Endpoint& dst) const;
    std::uint16_t allocate_port();
    void remove(std::map<std::uint16_t, MappingEntry>::iterator it, bool expired);

    NatProfile profile_;
    Rng rng_;
    std::map<std::uint16_t, MappingEntry> by_port_;
    std::map<Key, std::uint16_t> by_key_;
    std::map<std::uint16_t, Micros> tombstones_;  // recently expired ports
    std::int64_t next_sequential_;
    Micros earliest_expiry_ = INT64_MAX;
    std::uint64_t expired_total_ = 0;
};

struct LinkPolicy {
    double loss = 0.0;
    Micros latency = 5 * kMicrosPerMilli;
    Micros jitter = 0;  // uniform in [0, jitter]
    bool udp_blocked = false;
};

constexpr std::size_t kMaxDatagramPayload = 1200;

struct Datagram {
    Endpoint src;
    Endpoint dst;
    Bytes payload;
    Micros injected_at = 0;
};

using HostId = std::size_t;
using NatId = std::size_t;
using TimerId = std::uint64_t;

struct TraceEvent {
    Micros t_us = 0;
    std::string kind;
    std::string src;
    std::string dst;
    std::string info;
};

/// One JSON object per line: t_us, kind, src, dst, info.
void write_trace_events(std::ostream& out, const std::vector<TraceEvent>& events);

struct NetworkCounters {
    std::uint64_t sent = 0;
    std::uint64_t delivered = 0;
    std::uint64_t dead_letters = 0;
    std::map<DropReason, std::uint64_t> dropped;
};

/// Deterministic discrete-event network. Events run in (time, sequence)
/// order; every random draw comes from the seeded generator.
class Network {
public:
    using Receiver = std::function<void(const Datagram&)>;
    /// Sees every datagram that leaves a host (after NAT translation) and
    /// every control-channel line; used by tests to look for plaintext.
    using Sniffer = std::function<void(std::string_view where, ByteView bytes)>;

    explicit Network(std::uint64_t seed);
    Network(const Network&) = delete;
    Network& operator=(const Network&) = delete;

    NatId add_nat(NatProfile profile);
    /// Hosts without a NAT get a public address; hosts behind a NAT get a
    /// private one that is not routable from outside.
    HostId add_host(std::string name, std::optional<NatId> nat = std::nullopt, LinkPolicy policy = {});

    Ipv4 host_address(HostId host) const;
    const std::string& host_name(HostId host) const;
    std::optional<NatId> host_nat(HostId host) const;
    std::size_t host_count() const { return hosts_.size(); }
    void set_link_policy(HostId host, LinkPolicy policy);
    const LinkPolicy& link_policy(HostId host) const;

    Nat& nat(NatId id);
    const Nat& nat(NatId id) const;
    std::size_t nat_count() const { return nats_.size(); }

    /// Binds a UDP socket; port 0 picks an unused ephemeral port.
    std::optional<Endpoint> bind(HostId host, std::uint16_t port, Receiver receiver);
    void unbind(HostId host, std::uint16_t port);

    /// Sends from a bound local endpoint. Unknown destinations count as dead
    /// letters; loss and blocking drop silently.
    void send(HostId host, const Endpoint& local, const Endpoint& dst, Bytes payload);

    TimerId schedule_at(Micros at, std::function<void()> fn);
    TimerId schedule_after(Micros delay, std::function<void()> fn) { return schedule_at(now_ + delay, std::move(fn)); }
    void cancel(TimerId id);

    /// Dispatches every event with time <= t. Returns the number dispatched.
    std::size_t run_until(Micros t);
    Micros now() const { return now_; }

    Rng& rng() { return rng_; }
    const NetworkCounters& counters() const { return counters_; }

    void add_sniffer(Sniffer sniffer) { sniffers_.push_back(std::move(sniffer)); }
    void sniff(std::string_view where, ByteView bytes) const;

    /// Tracing is off by default (Monte Carlo runs skip it).
    void enable_trace(bool keep_events);
    void trace(std::string_view kind, const std::string& src, const std::string& dst, const std::string& info);
    std::string trace_hash() const;
    const std::vector<TraceEvent>& trace_events() const { return trace_events_; }
    void write_trace(std::ostream& out) const;

private:
    struct Host {
        std::string name;
        Ipv4 address;
        std::optional<NatId> nat;
        LinkPolicy policy;
        std::map<std::uint16_t, Receiver> sockets;
        std::uint16_t next_ephemeral = 40000;
    };

    struct Event {
        Micros at;
        std::uint64_t seq;
        std::function<void()> fn;
    };
    struct EventOrder {
        bool operator()(const Event& a, const Event& b) const {
            return a.at != b.at ? a.at > b.at : a.seq > b.seq;
        }
    };

    // Returns false when the datagram is dropped on the host's access link.
    bool pass_link(const Host& host, const Endpoint& src, const Endpoint& dst);
    Micros link_delay(const Host& host);
    void arrive(Datagram dgram);
    void deliver_local(HostId host, Datagram dgram);
    void drop(DropReason reason, const Endpoint& src, const Endpoint& dst);

    Rng rng_;
    std::uint64_t seed_;
    Micros now_ = 0;
    std::uint64_t next_seq_ = 0;
    std::priority_queue<Event, std::vector<Event>, EventOrder> queue_;
    std::unordered_set<std::uint64_t> cancelled_;

    std::vector<Host> hosts_;
    std::vector<std::unique_ptr<Nat>> nats_;
    std::unordered_map<Ipv4, HostId> public_hosts_;
    std::unordered_map<Ipv4, NatId> nat_by_ip_;
    std::uint32_t next_public_ = 0;

    NetworkCounters counters_;
    std::vector<Sniffer> sniffers_;

    bool tracing_ = false;
    bool keep_events_ = false;
    std::vector<TraceEvent> trace_events_;
    struct HashState;
    std::shared_ptr<HashState> trace_state_;
};

}  // namespace bdmesh::sim
