#include "bdmesh/netsim.hpp"

#include <json.hpp>
#include <sodium.h>

#include <algorithm>
#include <ostream>

namespace bdmesh::sim {

std::string_view to_string(MappingMode m) {
    return m == MappingMode::endpoint_independent ? "endpoint_independent" : "endpoint_dependent";
}

std::string_view to_string(FilteringMode f) {
    switch (f) {
        case FilteringMode::endpoint_independent: return "endpoint_independent";
        case FilteringMode::address_dependent: return "address_dependent";
        case FilteringMode::address_and_port_dependent: return "address_and_port_dependent";
    }
    return "?";
}

std::string_view to_string(PortAllocation a) {
    return a == PortAllocation::uniform_random ? "uniform_random" : "sequential";
}

std::optional<MappingMode> parse_mapping_mode(std::string_view s) {
    if (s == "endpoint_independent") return MappingMode::endpoint_independent;
    if (s == "endpoint_dependent") return MappingMode::endpoint_dependent;
    return std::nullopt;
}

std::optional<FilteringMode> parse_filtering_mode(std::string_view s) {
    if (s == "endpoint_independent") return FilteringMode::endpoint_independent;
    if (s == "address_dependent") return FilteringMode::address_dependent;
    if (s == "address_and_port_dependent") return FilteringMode::address_and_port_dependent;
    return std::nullopt;
}

std::optional<PortAllocation> parse_port_allocation(std::string_view s) {
    if (s == "uniform_random") return PortAllocation::uniform_random;
    if (s == "sequential") return PortAllocation::sequential;
    return std::nullopt;
}

std::string_view to_string(DropReason r) {
    switch (r) {
        case DropReason::no_mapping: return "no-mapping";
        case DropReason::filtered: return "filtered";
        case DropReason::expired: return "expired";
        case DropReason::loss: return "loss";
        case DropReason::udp_blocked: return "udp-blocked";
        case DropReason::no_socket: return "no-socket";
        case DropReason::ports_exhausted: return "ports-exhausted";
    }
    return "?";
}

NatProfile NatProfile::easy(std::string id, Ipv4 public_ip) {
    NatProfile p;
    p.nat_id = std::move(id);
    p.public_ip = public_ip;
    p.mapping = MappingMode::endpoint_independent;
    p.filtering = FilteringMode::endpoint_independent;
    return p;
}

NatProfile NatProfile::hard(std::string id, Ipv4 public_ip) {
    NatProfile p;
    p.nat_id = std::move(id);
    p.public_ip = public_ip;
    p.mapping = MappingMode::endpoint_dependent;
    p.filtering = FilteringMode::address_and_port_dependent;
    return p;
}

// ---------------------------------------------------------------------------
// Nat

Nat::Nat(NatProfile profile, std::uint64_t seed)
    : profile_(std::move(profile)), rng_(seed), next_sequential_(profile_.alloc_space.lo()) {
    if (profile_.mapping_ttl <= 0) throw Error(ErrorCode::invalid_parameters, "mapping ttl must be positive");
}

Nat::Key Nat::key_for(const Endpoint& internal, const Endpoint& dst) const {
    if (profile_.mapping == MappingMode::endpoint_independent) return {internal, std::nullopt};
    return {internal, dst};
}

std::uint16_t Nat::allocate_port() {
    const auto& space = profile_.alloc_space;
    const auto size = space.size();
    if (static_cast<std::int64_t>(by_port_.size()) >= size) {
        throw Error(ErrorCode::ports_exhausted, "NAT " + profile_.nat_id + " has no free external port");
    }
    if (profile_.allocation == PortAllocation::uniform_random) {
        // Rejection sampling keeps the draw uniform over the free ports.
        while (true) {
            const auto port = static_cast<std::uint16_t>(space.lo() + rng_.below(static_cast<std::uint64_t>(size)));
            if (!by_port_.contains(port)) return port;
        }
    }
    for (std::int64_t tried = 0; tried < size; ++tried) {
        if (next_sequential_ > space.hi()) next_sequential_ = space.lo();
        const auto port = static_cast<std::uint16_t>(next_sequential_++);
        if (!by_port_.contains(port)) return port;
    }
    throw Error(ErrorCode::ports_exhausted, "NAT " + profile_.nat_id + " has no free external port");
}

void Nat::remove(std::map<std::uint16_t, MappingEntry>::iterator it, bool expired) {
    by_key_.erase(Key{it->second.internal, it->second.remote});
    if (expired) {
        tombstones_[it->first] = it->second.expiry;
        ++expired_total_;
    }
    by_port_.erase(it);
}

Endpoint Nat::outbound(const Endpoint& internal, const Endpoint& dst, Micros now) {
    expire(now);
    const Key key = key_for(internal, dst);
    if (auto found = by_key_.find(key); found != by_key_.end()) {
        auto& entry = by_port_.at(found->second);
        entry.expiry = now + profile_.mapping_ttl;
        entry.contacted.insert(dst);
        return {profile_.public_ip, entry.external_port};
    }
    const auto port = allocate_port();
    MappingEntry entry;
    entry.internal = internal;
    entry.remote = key.remote;
    entry.external_port = port;
    entry.expiry = now + profile_.mapping_ttl;
    entry.contacted.insert(dst);
    by_port_.emplace(port, std::move(entry));
    by_key_.emplace(key, port);
    tombstones_.erase(port);
    earliest_expiry_ = std::min(earliest_expiry_, now + profile_.mapping_ttl);
    return {profile_.public_ip, port};
}

InboundDecision Nat::inbound(const Endpoint& src, std::uint16_t external_port, Micros now) {
    expire(now);
    auto it = by_port_.find(external_port);
    if (it == by_port_.end()) {
        return {std::nullopt, tombstones_.contains(external_port) ? DropReason::expired : DropReason::no_mapping};
    }
    const MappingEntry& entry = it->second;
    bool allowed = false;
    switch (profile_.filtering) {
        case FilteringMode::endpoint_independent:
            allowed = true;
            break;
        case FilteringMode::address_dependent:
            // Any live mapping of the same internal endpoint that has sent to
            // this source address opens the filter.
            for (const auto& [port, other] : by_port_) {
                if (other.internal != entry.internal) continue;
                for (const auto& c : other.contacted) {
                    if (c.ip == src.ip) allowed = true;
                }
            }
            break;
        case FilteringMode::address_and_port_dependent:
            allowed = entry.contacted.contains(src);
            break;
    }
    if (!allowed) return {std::nullopt, DropReason::filtered};
    return {entry.internal, DropReason::no_mapping};
}

std::size_t Nat::expire(Micros now) {
    if (now <= earliest_expiry_) return 0;
    std::size_t removed = 0;
    Micros earliest = INT64_MAX;
    for (auto it = by_port_.begin(); it != by_port_.end();) {
        if (it->second.expiry < now) {
            auto victim = it++;
            remove(victim, true);
            ++removed;
        } else {
            earliest = std::min(earliest, it->second.expiry);
            ++it;
        }
    }
    earliest_expiry_ = earliest;
    return removed;
}

std::size_t Nat::live_mappings(Micros now) const {
    return static_cast<std::size_t>(
        std::count_if(by_port_.begin(), by_port_.end(), [now](const auto& kv) { return kv.second.expiry >= now; }));
}

std::vector<MappingEntry> Nat::live_entries(Micros now) const {
    std::vector<MappingEntry> out;
    for (const auto& [port, entry] : by_port_) {
        if (entry.expiry >= now) out.push_back(entry);
    }
    return out;
}

const MappingEntry* Nat::find_external(std::uint16_t port) const {
    auto it = by_port_.find(port);
    return it == by_port_.end() ? nullptr : &it->second;
}

std::optional<std::uint16_t> Nat::mapped_port(const Endpoint& internal, const Endpoint& dst, Micros now) const {
    auto it = by_key_.find(key_for(internal, dst));
    if (it == by_key_.end()) return std::nullopt;
    if (by_port_.at(it->second).expiry < now) return std::nullopt;
    return it->second;
}

// ---------------------------------------------------------------------------
// Network

struct Network::HashState {
    crypto_hash_sha256_state state;
};

namespace {
constexpr std::uint32_t kPublicBase = (198u << 24) | (51u << 16);  // 198.51.0.0
constexpr std::uint32_t kPrivateBase = (172u << 24) | (16u << 16);  // 172.16.0.0
}  // namespace

Network::Network(std::uint64_t seed) : rng_(seed), seed_(seed) {
    if (sodium_init() < 0) throw Error(ErrorCode::protocol, "libsodium failed to initialize");
}

NatId Network::add_nat(NatProfile profile) {
    if (profile.public_ip.value == 0) profile.public_ip = Ipv4{kPublicBase + (++next_public_)};
    if (nat_by_ip_.contains(profile.public_ip) || public_hosts_.contains(profile.public_ip)) {
        throw Error(ErrorCode::invalid_parameters, "public address " + profile.public_ip.to_string() + " in use");
    }
    const NatId id = nats_.size();
    nat_by_ip_[profile.public_ip] = id;
    nats_.push_back(std::make_unique<Nat>(std::move(profile), derive_seed(seed_, 0x4e41540000ULL + id)));
    return id;
}

HostId Network::add_host(std::string name, std::optional<NatId> nat, LinkPolicy policy) {
    if (nat && *nat >= nats_.size()) throw Error(ErrorCode::invalid_parameters, "unknown NAT id");
    if (policy.loss < 0.0 || policy.loss > 1.0) throw Error(ErrorCode::invalid_parameters, "loss outside [0,1]");
    const HostId id = hosts_.size();
    Host host;
    host.name = std::move(name);
    host.nat = nat;
    host.policy = policy;
    if (nat) {
        host.address = Ipv4{kPrivateBase + static_cast<std::uint32_t>(id) + 1};
    } else {
        Ipv4 addr;
        do {
            addr = Ipv4{kPublicBase + (++next_public_)};
        } while (nat_by_ip_.contains(addr));
        host.address = addr;
        public_hosts_[addr] = id;
    }
    hosts_.push_back(std::move(host));
    return id;
}

Ipv4 Network::host_address(HostId host) const { return hosts_.at(host).address; }
const std::string& Network::host_name(HostId host) const { return hosts_.at(host).name; }
std::optional<NatId> Network::host_nat(HostId host) const { return hosts_.at(host).nat; }

void Network::set_link_policy(HostId host, LinkPolicy policy) {
    if (policy.loss < 0.0 || policy.loss > 1.0) throw Error(ErrorCode::invalid_parameters, "loss outside [0,1]");
    hosts_.at(host).policy = policy;
}

const LinkPolicy& Network::link_policy(HostId host) const { return hosts_.at(host).policy; }

Nat& Network::nat(NatId id) { return *nats_.at(id); }
const Nat& Network::nat(NatId id) const { return *nats_.at(id); }

std::optional<Endpoint> Network::bind(HostId host_id, std::uint16_t port, Receiver receiver) {
    Host& host = hosts_.at(host_id);
    if (port == 0) {
        for (int tries = 0; tries < 65535; ++tries) {
            const auto candidate = host.next_ephemeral;
            host.next_ephemeral = candidate == 65535 ? 40000 : static_cast<std::uint16_t>(candidate + 1);
            if (!host.sockets.contains(candidate)) {
                port = candidate;
                break;
            }
        }
        if (port == 0) return std::nullopt;
    } else if (host.sockets.contains(port)) {
        return std::nullopt;
    }
    host.sockets.emplace(port, std::move(receiver));
    return Endpoint{host.address, port};
}

void Network::unbind(HostId host, std::uint16_t port) { hosts_.at(host).sockets.erase(port); }

bool Network::pass_link(const Host& host, const Endpoint& src, const Endpoint& dst) {
    if (host.policy.udp_blocked) {
        drop(DropReason::udp_blocked, src, dst);
        return false;
    }
    if (host.policy.loss > 0.0 && rng_.chance(host.policy.loss)) {
        drop(DropReason::loss, src, dst);
        return false;
    }
    return true;
}

Micros Network::link_delay(const Host& host) {
    Micros d = host.policy.latency;
    if (host.policy.jitter > 0) d += rng_.between(0, host.policy.jitter);
    return d;
}

void Network::drop(DropReason reason, const Endpoint& src, const Endpoint& dst) {
    ++counters_.dropped[reason];
    if (tracing_) trace("drop", src.to_string(), dst.to_string(), std::string(to_string(reason)));
}

void Network::send(HostId host_id, const Endpoint& local, const Endpoint& dst, Bytes payload) {
    Host& host = hosts_.at(host_id);
    if (!host.sockets.contains(local.port) || local.ip != host.address) {
        throw Error(ErrorCode::invalid_parameters, "send from unbound endpoint " + local.to_string());
    }
    if (payload.size() > kMaxDatagramPayload) {
        throw Error(ErrorCode::invalid_parameters, "datagram payload exceeds " + std::to_string(kMaxDatagramPayload));
    }
    ++counters_.sent;
    if (!pass_link(host, local, dst)) return;

    Endpoint src = local;
    if (host.nat) {
        try {
            src = nats_[*host.nat]->outbound(local, dst, now_);
        } catch (const Error&) {
            drop(DropReason::ports_exhausted, local, dst);
            return;
        }
    }
    if (!sniffers_.empty()) sniff("udp", payload);
    if (tracing_) trace("send", src.to_string(), dst.to_string(), std::to_string(payload.size()));

    Datagram dgram{src, dst, std::move(payload), now_};
    const Micros at = now_ + link_delay(host);
    schedule_at(at, [this, d = std::move(dgram)]() mutable { arrive(std::move(d)); });
}

void Network::arrive(Datagram dgram) {
    if (auto it = public_hosts_.find(dgram.dst.ip); it != public_hosts_.end()) {
        deliver_local(it->second, std::move(dgram));
        return;
    }
    auto nat_it = nat_by_ip_.find(dgram.dst.ip);
    if (nat_it == nat_by_ip_.end()) {
        ++counters_.dead_letters;
        if (tracing_) trace("dead_letter", dgram.src.to_string(), dgram.dst.to_string(), "");
        return;
    }
    auto decision = nats_[nat_it->second]->inbound(dgram.src, dgram.dst.port, now_);
    if (!decision.deliver_to) {
        drop(decision.reason, dgram.src, dgram.dst);
        return;
    }
    const Endpoint internal = *decision.deliver_to;
    // Private addresses are allocated from a dense counter.
    const HostId host = internal.ip.value - kPrivateBase - 1;
    dgram.dst = internal;
    deliver_local(host, std::move(dgram));
}

void Network::deliver_local(HostId host_id, Datagram dgram) {
    Host& host = hosts_.at(host_id);
    if (!pass_link(host, dgram.src, dgram.dst)) return;
    const Micros delay = link_delay(host);
    auto finish = [this, host_id](Datagram d) {
        Host& h = hosts_.at(host_id);
        auto sock = h.sockets.find(d.dst.port);
        if (sock == h.sockets.end()) {
            drop(DropReason::no_socket, d.src, d.dst);
            return;
        }
        ++counters_.delivered;
        if (tracing_) trace("deliver", d.src.to_string(), d.dst.to_string(), std::to_string(d.payload.size()));
        // Copy the receiver: the callback may unbind its own socket.
        auto receiver = sock->second;
        receiver(d);
    };
    if (delay == 0) {
        finish(std::move(dgram));
    } else {
        schedule_at(now_ + delay, [finish, d = std::move(dgram)]() mutable { finish(std::move(d)); });
    }
}

TimerId Network::schedule_at(Micros at, std::function<void()> fn) {
    const auto seq = next_seq_++;
    queue_.push(Event{std::max(at, now_), seq, std::move(fn)});
    return seq;
}

void Network::cancel(TimerId id) {
    if (id < next_seq_) cancelled_.insert(id);
}

std::size_t Network::run_until(Micros t) {
    std::size_t processed = 0;
    while (!queue_.empty() && queue_.top().at <= t) {
        // The top element is moved out before pop; priority_queue exposes
        // only a const reference.
        Event ev = std::move(const_cast<Event&>(queue_.top()));
        queue_.pop();
        if (auto c = cancelled_.find(ev.seq); c != cancelled_.end()) {
            cancelled_.erase(c);
            continue;
        }
        now_ = ev.at;
        for (auto& nat : nats_) {
            const auto removed = nat->expire(now_);
            if (removed > 0 && tracing_) {
                trace("nat_expire", nat->profile().public_ip.to_string(), "", std::to_string(removed));
            }
        }
        ev.fn();
        ++processed;
    }
    now_ = std::max(now_, t);
    return processed;
}

void Network::sniff(std::string_view where, ByteView bytes) const {
    for (const auto& s : sniffers_) s(where, bytes);
}

void Network::enable_trace(bool keep_events) {
    tracing_ = true;
    keep_events_ = keep_events;
    trace_state_ = std::make_shared<HashState>();
    crypto_hash_sha256_init(&trace_state_->state);
}

void Network::trace(std::string_view kind, const std::string& src, const std::string& dst, const std::string& info) {
    if (!tracing_) return;
    nlohmann::ordered_json line;
    line["t_us"] = now_;
    line["kind"] = kind;
    line["src"] = src;
    line["dst"] = dst;
    line["info"] = info;
    const std::string text = line.dump() + "\n";
    crypto_hash_sha256_update(&trace_state_->state, reinterpret_cast<const unsigned char*>(text.data()), text.size());
    if (keep_events_) trace_events_.push_back({now_, std::string(kind), src, dst, info});
}

std::string Network::trace_hash() const {
    if (!trace_state_) return {};
    auto copy = trace_state_->state;
    std::uint8_t digest[crypto_hash_sha256_BYTES];
    crypto_hash_sha256_final(&copy, digest);
    return to_hex(digest);
}

void Network::write_trace(std::ostream& out) const { write_trace_events(out, trace_events_); }

void write_trace_events(std::ostream& out, const std::vector<TraceEvent>& events) {
    for (const auto& ev : events) {
        nlohmann::ordered_json line;
        line["t_us"] = ev.t_us;
        line["kind"] = ev.kind;
        line["src"] = ev.src;
        line["dst"] = ev.dst;
        line["info"] = ev.info;
        out << line.dump() << "\n";
    }
}

}  // namespace bdmesh::sim
