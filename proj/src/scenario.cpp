#include "bdmesh/scenario.hpp"

#include "bdmesh/experiment.hpp"
#include "bdmesh/sim_world.hpp"

#include <algorithm>
#include <atomic>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace bdmesh {

namespace {

using json = nlohmann::json;

std::string at(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }
std::string at(const std::string& path, std::size_t i) { return path + "[" + std::to_string(i) + "]"; }

void only_keys(const json& obj, const std::string& path, std::initializer_list<std::string_view> keys) {
    if (!obj.is_object()) throw ScenarioError(path, "expected an object");
    for (const auto& [k, v] : obj.items())
        if (std::find(keys.begin(), keys.end(), k) == keys.end()) throw ScenarioError(at(path, k), "unknown field");
}

const json& need(const json& obj, const std::string& path, const std::string& key) {
    if (!obj.contains(key)) throw ScenarioError(at(path, key), "required");
    return obj.at(key);
}

std::string get_string(const json& v, const std::string& path) {
    if (!v.is_string()) throw ScenarioError(path, "expected a string");
    return v.get<std::string>();
}

std::string get_id(const json& v, const std::string& path) {
    std::string s = get_string(v, path);
    if (s.empty() || s.size() > kMaxNodeIdBytes) throw ScenarioError(path, "must be 1 to 64 bytes");
    return s;
}

double get_number(const json& v, const std::string& path, double lo, double hi) {
    if (!v.is_number()) throw ScenarioError(path, "expected a number");
    const double d = v.get<double>();
    if (!(d >= lo && d <= hi)) {
        std::ostringstream msg;
        msg << "must be in [" << lo << ", " << hi << "]";
        throw ScenarioError(path, msg.str());
    }
    return d;
}

std::int64_t get_int(const json& v, const std::string& path, std::int64_t lo, std::int64_t hi) {
    if (!v.is_number_integer()) throw ScenarioError(path, "expected an integer");
    const auto i = v.get<std::int64_t>();
    if (i < lo || i > hi)
        throw ScenarioError(path, "must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return i;
}

bool get_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) throw ScenarioError(path, "expected true or false");
    return v.get<bool>();
}

int get_bit(const json& obj, const std::string& path, const std::string& key) {
    return static_cast<int>(get_int(need(obj, path, key), at(path, key), 0, 1));
}

sim::NatProfile parse_nat(const json& n, const std::string& path) {
    only_keys(n, path,
              {"id", "preset", "public_ip", "mapping", "filtering", "allocation", "mapping_ttl_us", "alloc_lo",
               "alloc_hi"});
    const std::string id = get_id(need(n, path, "id"), at(path, "id"));
    std::string preset = "easy";
    if (n.contains("preset")) preset = get_string(n["preset"], at(path, "preset"));
    sim::NatProfile p;
    if (preset == "easy")
        p = sim::NatProfile::easy(id, Ipv4{});
    else if (preset == "hard")
        p = sim::NatProfile::hard(id, Ipv4{});
    else
        throw ScenarioError(at(path, "preset"), "expected easy or hard");
    if (n.contains("public_ip")) {
        auto ip = Ipv4::parse(get_string(n["public_ip"], at(path, "public_ip")));
        if (!ip) throw ScenarioError(at(path, "public_ip"), "not a dotted quad");
        p.public_ip = *ip;
    }
    if (n.contains("mapping")) {
        auto m = sim::parse_mapping_mode(get_string(n["mapping"], at(path, "mapping")));
        if (!m) throw ScenarioError(at(path, "mapping"), "expected endpoint_independent or endpoint_dependent");
        p.mapping = *m;
    }
    if (n.contains("filtering")) {
        auto f = sim::parse_filtering_mode(get_string(n["filtering"], at(path, "filtering")));
        if (!f)
            throw ScenarioError(at(path, "filtering"),
                                "expected endpoint_independent, address_dependent or address_and_port_dependent");
        p.filtering = *f;
    }
    if (n.contains("allocation")) {
        auto a = sim::parse_port_allocation(get_string(n["allocation"], at(path, "allocation")));
        if (!a) throw ScenarioError(at(path, "allocation"), "expected uniform_random or sequential");
        p.allocation = *a;
    }
    if (n.contains("mapping_ttl_us"))
        p.mapping_ttl = get_int(n["mapping_ttl_us"], at(path, "mapping_ttl_us"), 1, 3600 * kMicrosPerSecond);
    std::int64_t lo = p.alloc_space.lo();
    std::int64_t hi = p.alloc_space.hi();
    if (n.contains("alloc_lo")) lo = get_int(n["alloc_lo"], at(path, "alloc_lo"), 1, 65535);
    if (n.contains("alloc_hi")) hi = get_int(n["alloc_hi"], at(path, "alloc_hi"), 1, 65535);
    if (lo > hi) throw ScenarioError(at(path, "alloc_lo"), "must not exceed alloc_hi");
    p.alloc_space = PortSpace(lo, hi);
    return p;
}

}  // namespace

Scenario parse_scenario(const json& doc) {
    only_keys(doc, "", {"hosts", "nats", "links", "scheme", "subnets", "experiment"});
    Scenario s;

    std::set<std::string> nat_ids;
    if (doc.contains("nats")) {
        const json& nats = doc["nats"];
        if (!nats.is_array()) throw ScenarioError("nats", "expected an array");
        for (std::size_t i = 0; i < nats.size(); ++i) {
            const std::string path = at("nats", i);
            ScenarioNat n{.id = {}, .profile = parse_nat(nats[i], path)};
            n.id = n.profile.nat_id;
            if (!nat_ids.insert(n.id).second) throw ScenarioError(at(path, "id"), "duplicate nat id " + n.id);
            s.nats.push_back(std::move(n));
        }
    }

    const json& hosts = need(doc, "", "hosts");
    if (!hosts.is_array() || hosts.empty()) throw ScenarioError("hosts", "expected a non-empty array");
    std::map<std::string, NodeKind> host_kind;
    for (std::size_t i = 0; i < hosts.size(); ++i) {
        const std::string path = at("hosts", i);
        only_keys(hosts[i], path, {"id", "nat", "kind"});
        ScenarioHost h;
        h.id = get_id(need(hosts[i], path, "id"), at(path, "id"));
        if (hosts[i].contains("nat") && !hosts[i]["nat"].is_null()) {
            h.nat = get_string(hosts[i]["nat"], at(path, "nat"));
            if (!nat_ids.count(*h.nat)) throw ScenarioError(at(path, "nat"), "unknown nat " + *h.nat);
        }
        if (hosts[i].contains("kind")) {
            auto k = parse_node_kind(get_string(hosts[i]["kind"], at(path, "kind")));
            if (!k) throw ScenarioError(at(path, "kind"), "expected point or gateway");
            h.kind = *k;
        }
        if (!host_kind.emplace(h.id, h.kind).second) throw ScenarioError(at(path, "id"), "duplicate host id " + h.id);
        s.hosts.push_back(std::move(h));
    }

    if (doc.contains("links")) {
        const json& links = doc["links"];
        if (!links.is_array()) throw ScenarioError("links", "expected an array");
        std::set<std::string> seen;
        for (std::size_t i = 0; i < links.size(); ++i) {
            const std::string path = at("links", i);
            only_keys(links[i], path, {"host", "loss", "latency_us", "jitter_us", "udp_blocked"});
            ScenarioLink l;
            l.host = get_id(need(links[i], path, "host"), at(path, "host"));
            if (!host_kind.count(l.host)) throw ScenarioError(at(path, "host"), "unknown host " + l.host);
            if (!seen.insert(l.host).second) throw ScenarioError(at(path, "host"), "second link for " + l.host);
            if (links[i].contains("loss")) l.policy.loss = get_number(links[i]["loss"], at(path, "loss"), 0.0, 0.99);
            if (links[i].contains("latency_us"))
                l.policy.latency = get_int(links[i]["latency_us"], at(path, "latency_us"), 0, 10 * kMicrosPerSecond);
            if (links[i].contains("jitter_us"))
                l.policy.jitter = get_int(links[i]["jitter_us"], at(path, "jitter_us"), 0, 10 * kMicrosPerSecond);
            if (links[i].contains("udp_blocked"))
                l.policy.udp_blocked = get_bool(links[i]["udp_blocked"], at(path, "udp_blocked"));
            s.links.push_back(std::move(l));
        }
    }

    const json& scheme = need(doc, "", "scheme");
    only_keys(scheme, "scheme", {"G", "P", "theta"});
    s.scheme = {get_bit(scheme, "scheme", "G"), get_bit(scheme, "scheme", "P"), get_bit(scheme, "scheme", "theta")};

    if (doc.contains("subnets")) {
        const json& subnets = doc["subnets"];
        if (!subnets.is_array()) throw ScenarioError("subnets", "expected an array");
        for (std::size_t i = 0; i < subnets.size(); ++i) {
            const std::string path = at("subnets", i);
            only_keys(subnets[i], path, {"gateway", "cidr"});
            ScenarioSubnet sn;
            sn.gateway = get_id(need(subnets[i], path, "gateway"), at(path, "gateway"));
            auto kind = host_kind.find(sn.gateway);
            if (kind == host_kind.end()) throw ScenarioError(at(path, "gateway"), "unknown host " + sn.gateway);
            if (kind->second != NodeKind::gateway)
                throw ScenarioError(at(path, "gateway"), sn.gateway + " is not a gateway");
            auto cidr = Cidr::parse(get_string(need(subnets[i], path, "cidr"), at(path, "cidr")));
            if (!cidr) throw ScenarioError(at(path, "cidr"), "not an a.b.c.d/len prefix");
            sn.cidr = *cidr;
            s.subnets.push_back(sn);
        }
    }

    if (doc.contains("experiment")) {
        const json& e = doc["experiment"];
        only_keys(e, "experiment", {"trials", "seed", "punch"});
        if (e.contains("trials")) s.trials = get_int(e["trials"], "experiment.trials", 1, 1000000);
        if (e.contains("seed")) {
            if (!e["seed"].is_number_unsigned() && !e["seed"].is_number_integer())
                throw ScenarioError("experiment.seed", "expected a non-negative integer");
            if (e["seed"].is_number_integer() && e["seed"].get<std::int64_t>() < 0)
                throw ScenarioError("experiment.seed", "expected a non-negative integer");
            s.seed = e["seed"].get<std::uint64_t>();
        }
        if (e.contains("punch")) {
            const json& p = e["punch"];
            only_keys(p, "experiment.punch", {"open_ports", "rate", "max_seconds"});
            if (p.contains("open_ports"))
                s.punch.open_ports = get_int(p["open_ports"], "experiment.punch.open_ports", 1, 65535);
            if (p.contains("rate"))
                s.punch.rate = get_number(p["rate"], "experiment.punch.rate", 1.0, PunchConfig::kMaxProbeRate);
            if (p.contains("max_seconds"))
                s.punch.max_seconds = get_number(p["max_seconds"], "experiment.punch.max_seconds", 0.01, 3600.0);
            PunchConfig cfg;
            cfg.open_ports = s.punch.open_ports;
            cfg.probe_rate = s.punch.rate;
            cfg.max_duration = s.punch.max_seconds;
            try {
                cfg.validate();
            } catch (const Error& err) {
                throw ScenarioError("experiment.punch", err.what());
            }
        }
    }
    return s;
}

Scenario load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ScenarioError(path, "cannot open file");
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ScenarioError(path, std::string("not valid JSON: ") + e.what());
    }
    return parse_scenario(doc);
}

// ---------------------------------------------------------------------------
// Realization

namespace {

/// Forwards overlay packets for one node and records what arrives locally.
struct Router {
    const MeshPlan* plan = nullptr;
    sim::SimWorld* world = nullptr;
    std::string self;
    std::map<std::uint32_t, std::string> received_hash;  // by source address
    std::set<std::string> replies;

    bool send(OverlayPacket p) {
        const RouteDecision d = route_lookup(*plan, self, p.dst);
        if (d.kind != RouteKind::next_hop) return false;
        return world->agent(self).send(d.next_hop, p.encode());
    }

    void on_message(const Bytes& msg) {
        auto p = OverlayPacket::decode(msg);
        if (!p) return;
        const RouteDecision d = route_lookup(*plan, self, p->dst);
        if (d.kind == RouteKind::no_route) return;
        if (d.kind == RouteKind::next_hop) {
            if (p->ttl == 0) return;
            --p->ttl;
            world->agent(self).send(d.next_hop, p->encode());
            return;
        }
        switch (p->kind) {
            case OverlayPacket::Kind::data:
                received_hash[p->src.value] = sha256_hex(p->payload);
                break;
            case OverlayPacket::Kind::echo_request: {
                OverlayPacket reply;
                reply.kind = OverlayPacket::Kind::echo_reply;
                reply.src = p->dst;
                reply.dst = p->src;
                reply.payload = p->payload;
                send(reply);
                break;
            }
            case OverlayPacket::Kind::echo_reply:
                replies.insert(to_string(p->payload));
                break;
        }
    }
};

bool contains(ByteView hay, std::string_view needle) {
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

}  // namespace

Realization realize(const Scenario& scenario, std::uint64_t seed, const RealizeOptions& options) {
    const SchemeKind scheme = classify_scheme(scenario.scheme);

    std::vector<PlanNode> plan_nodes;
    for (const auto& h : scenario.hosts) {
        PlanNode n;
        n.id = h.id;
        n.kind = h.kind;
        for (const auto& sn : scenario.subnets)
            if (sn.gateway == h.id) n.subnets.push_back(sn.cidr);
        plan_nodes.push_back(std::move(n));
    }
    Realization r;
    r.plan = plan_links(scheme, std::move(plan_nodes));

    sim::SimWorld::Options wo;
    wo.seed = seed;
    wo.punch = scenario.punch;
    wo.trace = options.trace;
    wo.keep_trace_events = options.keep_trace_events;
    sim::SimWorld world(wo);
    std::map<std::string, sim::NatId> nat_ids;
    for (const auto& n : scenario.nats) nat_ids[n.id] = world.add_nat(n.profile);
    for (const auto& h : scenario.hosts) {
        sim::LinkPolicy policy;
        for (const auto& l : scenario.links)
            if (l.host == h.id) policy = l.policy;
        std::optional<sim::NatId> nat;
        if (h.nat) nat = nat_ids.at(*h.nat);
        world.add_node(h.id, nat, policy);
    }
    world.add_wire_sniffer([&r](ByteView bytes) {
        if (!r.plaintext_marker_seen && contains(bytes, kPlaintextMarker)) r.plaintext_marker_seen = true;
    });

    std::map<std::string, Router> routers;
    for (const auto& n : r.plan.nodes) {
        Router& rt = routers[n.id];
        rt.plan = &r.plan;
        rt.world = &world;
        rt.self = n.id;
        world.on_message(n.id, [&rt](const std::string&, const Bytes& msg) { rt.on_message(msg); });
    }

    if (!world.start()) throw Error(ErrorCode::protocol, "nodes did not finish registering");
    for (const auto& n : r.plan.nodes) r.nat_classes.emplace_back(to_string(world.agent(n.id).nat_class()));

    std::vector<std::tuple<std::string, std::string, bool>> wanted;
    for (const auto& l : r.plan.links) wanted.emplace_back(l.a, l.b, l.encrypted);
    const std::vector<LinkStatus> statuses = world.connect_all(wanted);

    // Test payload across every link, both ways.
    std::vector<std::array<std::string, 2>> expected(r.plan.links.size());
    for (std::size_t i = 0; i < r.plan.links.size(); ++i) {
        const auto& l = r.plan.links[i];
        const PlanNode* ends[2] = {r.plan.node(l.a), r.plan.node(l.b)};
        for (int dir = 0; dir < 2; ++dir) {
            Rng rng(derive_seed(seed, 0x5041594c + i * 2 + static_cast<std::uint64_t>(dir)));
            OverlayPacket p;
            p.src = ends[dir]->overlay;
            p.dst = ends[1 - dir]->overlay;
            p.payload = to_bytes(kPlaintextMarker);
            while (p.payload.size() < std::max(options.payload_bytes, kPlaintextMarker.size()))
                p.payload.push_back(static_cast<std::uint8_t>(rng.next()));
            expected[i][static_cast<std::size_t>(dir)] = sha256_hex(p.payload);
            routers[ends[dir]->id].send(std::move(p));
        }
    }

    if (options.pings) {
        const auto source_addr = [](const PlanNode& n) {
            return n.subnets.empty() ? n.overlay : n.subnets.front().first_host();
        };
        for (const auto& from : r.plan.nodes) {
            for (const auto& to : r.plan.nodes) {
                if (from.id == to.id) continue;
                std::vector<Ipv4> targets{to.overlay};
                for (const auto& c : to.subnets) targets.push_back(c.first_host());
                for (Ipv4 dst : targets) {
                    PingOutcome ping;
                    ping.from = from.id;
                    ping.to = to.id;
                    ping.dst = dst;
                    ping.via = route_lookup(r.plan, from.id, dst).next_hop;
                    OverlayPacket p;
                    p.kind = OverlayPacket::Kind::echo_request;
                    p.src = source_addr(from);
                    p.dst = dst;
                    p.payload = to_bytes("ping " + std::to_string(r.pings.size()));
                    routers[from.id].send(std::move(p));
                    r.pings.push_back(ping);
                }
            }
        }
    }
    world.run_for(5 * kMicrosPerSecond);
    for (std::size_t i = 0; i < r.pings.size(); ++i)
        r.pings[i].ok = routers[r.pings[i].from].replies.count("ping " + std::to_string(i)) > 0;

    // Outcomes and connectivity.
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < r.plan.nodes.size(); ++i) index[r.plan.nodes[i].id] = i;
    std::vector<std::size_t> parent(r.plan.nodes.size());
    std::iota(parent.begin(), parent.end(), std::size_t{0});
    const auto root = [&](std::size_t x) {
        while (parent[x] != x) x = parent[x] = parent[parent[x]];
        return x;
    };
    r.fully_direct = true;
    for (std::size_t i = 0; i < r.plan.links.size(); ++i) {
        const auto& l = r.plan.links[i];
        const LinkStatus& s = statuses[i];
        LinkOutcome o;
        o.planned = l;
        o.path = std::string(to_string(s.path));
        o.role = std::string(to_string(s.role));
        o.state = std::string(to_string(s.state));
        o.failure = std::string(to_string(s.failure));
        // Count the prober's probes; the opener's sends only open mappings.
        o.probes_sent = s.stats.sent;
        if (const LinkStatus* other = world.agent(l.b).link(l.a); other && other->role == Role::prober)
            o.probes_sent = other->stats.sent;
        o.elapsed_ms = static_cast<double>(s.settled_at - s.started_at) / 1000.0;
        const PlanNode* a = r.plan.node(l.a);
        const PlanNode* b = r.plan.node(l.b);
        const auto got_b = routers[l.b].received_hash.find(a->overlay.value);
        const auto got_a = routers[l.a].received_hash.find(b->overlay.value);
        o.payload_ok = got_b != routers[l.b].received_hash.end() && got_b->second == expected[i][0] &&
                       got_a != routers[l.a].received_hash.end() && got_a->second == expected[i][1];
        const bool up = s.ready && s.failure == Failure::none;
        if (up) parent[root(index[l.a])] = root(index[l.b]);
        if (!up || s.path != LinkPath::direct) r.fully_direct = false;
        r.links.push_back(std::move(o));
    }
    r.connected = true;
    for (std::size_t i = 0; i < parent.size(); ++i) r.connected = r.connected && root(i) == root(0);

    r.trace_hash = world.net().trace_hash();
    if (options.keep_trace_events) r.trace = world.net().trace_events();
    return r;
}

ScenarioSummary realize_trials(const Scenario& scenario, std::int64_t trials, std::uint64_t seed, unsigned workers) {
    RealizeOptions options;
    options.pings = false;
    options.payload_bytes = 64;
    ScenarioSummary summary;
    summary.trials = trials;
    std::atomic<std::int64_t> connected{0};
    const auto direct = run_monte_carlo(trials, seed, workers, [&](std::uint64_t s) {
        const Realization r = realize(scenario, s, options);
        if (r.connected) ++connected;
        return r.fully_direct;
    });
    summary.fully_direct = direct.successes;
    summary.connected = connected.load();
    return summary;
}

nlohmann::ordered_json plan_json(const MeshPlan& plan) {
    nlohmann::ordered_json j;
    j["scheme"] = to_string(plan.scheme);
    const SchemeParams p = scheme_params(plan.scheme);
    j["params"] = {{"G", p.gateway}, {"P", p.traversal}, {"theta", p.theta}};
    j["nodes"] = nlohmann::ordered_json::array();
    for (const auto& n : plan.nodes) {
        nlohmann::ordered_json node{{"id", n.id}, {"kind", to_string(n.kind)}, {"overlay", n.overlay.to_string()}};
        node["subnets"] = nlohmann::ordered_json::array();
        for (const auto& c : n.subnets) node["subnets"].push_back(c.to_string());
        j["nodes"].push_back(node);
    }
    j["links"] = nlohmann::ordered_json::array();
    for (const auto& l : plan.links) j["links"].push_back({{"a", l.a}, {"b", l.b}, {"encrypted", l.encrypted}});
    j["routes"] = nlohmann::ordered_json::array();
    for (const auto& r : plan.routes) j["routes"].push_back({{"prefix", r.prefix.to_string()}, {"owner", r.owner}});
    return j;
}

nlohmann::ordered_json report_json(const Realization& r, std::uint64_t seed) {
    nlohmann::ordered_json j;
    j["scheme"] = to_string(r.plan.scheme);
    const SchemeParams p = scheme_params(r.plan.scheme);
    j["params"] = {{"G", p.gateway}, {"P", p.traversal}, {"theta", p.theta}};
    j["seed"] = seed;
    j["nodes"] = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < r.plan.nodes.size(); ++i) {
        const auto& n = r.plan.nodes[i];
        nlohmann::ordered_json node{{"id", n.id},
                                    {"kind", to_string(n.kind)},
                                    {"nat_class", r.nat_classes.at(i)},
                                    {"overlay", n.overlay.to_string()}};
        node["subnets"] = nlohmann::ordered_json::array();
        for (const auto& c : n.subnets) node["subnets"].push_back(c.to_string());
        j["nodes"].push_back(node);
    }
    j["links"] = nlohmann::ordered_json::array();
    nlohmann::ordered_json dead = nlohmann::ordered_json::array();
    for (const auto& l : r.links) {
        j["links"].push_back({{"a", l.planned.a},
                              {"b", l.planned.b},
                              {"encrypted", l.planned.encrypted},
                              {"path", l.path},
                              {"role", l.role},
                              {"state", l.state},
                              {"failure", l.failure},
                              {"probes_sent", l.probes_sent},
                              {"elapsed_ms", l.elapsed_ms},
                              {"payload_ok", l.payload_ok}});
        if (l.failure != "none") dead.push_back(l.planned.a + "-" + l.planned.b);
    }
    j["routes"] = nlohmann::ordered_json::array();
    for (const auto& rt : r.plan.routes) j["routes"].push_back({{"prefix", rt.prefix.to_string()}, {"owner", rt.owner}});
    j["pings"] = nlohmann::ordered_json::array();
    for (const auto& pg : r.pings)
        j["pings"].push_back(
            {{"from", pg.from}, {"to", pg.to}, {"dst", pg.dst.to_string()}, {"via", pg.via}, {"ok", pg.ok}});
    j["connected"] = r.connected;
    j["fully_direct"] = r.fully_direct;
    j["dead_links"] = dead;
    j["plaintext_marker_seen"] = r.plaintext_marker_seen;
    j["trace_hash"] = r.trace_hash;
    return j;
}

}  // namespace bdmesh
