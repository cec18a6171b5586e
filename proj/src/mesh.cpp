#include "bdmesh/mesh.hpp"

#include <algorithm>
#include <array>
#include <set>

namespace bdmesh {

std::string SchemeParams::to_string() const {
    return "(G=" + std::to_string(gateway) + ", P=" + std::to_string(traversal) + ", theta=" + std::to_string(theta) +
           ")";
}

std::string_view to_string(SchemeKind k) {
    switch (k) {
        case SchemeKind::point_to_site: return "PointToSite";
        case SchemeKind::site_to_site: return "SiteToSite";
        case SchemeKind::site_mesh: return "SiteMesh";
        case SchemeKind::full_mesh: return "FullMesh";
    }
    return "?";
}

namespace {

constexpr std::array<std::pair<SchemeKind, std::array<int, 3>>, 4> kSchemes{{
    {SchemeKind::point_to_site, {1, 0, 1}},
    {SchemeKind::site_to_site, {1, 0, 0}},
    {SchemeKind::site_mesh, {1, 1, 1}},
    {SchemeKind::full_mesh, {0, 1, 1}},
}};

}  // namespace

SchemeKind classify_scheme(const SchemeParams& p) {
    const std::array<int, 3> t{p.gateway, p.traversal, p.theta};
    for (int v : t)
        if (v != 0 && v != 1) throw Error(ErrorCode::invalid_parameters, "scheme fields must be 0 or 1: " + p.to_string());
    for (const auto& [kind, triple] : kSchemes)
        if (triple == t) return kind;
    // Nearest by Hamming distance, ties broken by table order.
    const auto* best = &kSchemes[0];
    int best_d = 4;
    for (const auto& entry : kSchemes) {
        int d = 0;
        for (std::size_t i = 0; i < 3; ++i) d += entry.second[i] != t[i];
        if (d < best_d) best_d = d, best = &entry;
    }
    throw Error(ErrorCode::unsupported_combination, "unsupported scheme " + p.to_string() + "; nearest supported is " +
                                                        std::string(to_string(best->first)) + " " +
                                                        scheme_params(best->first).to_string());
}

SchemeParams scheme_params(SchemeKind kind) {
    for (const auto& [k, t] : kSchemes)
        if (k == kind) return {t[0], t[1], t[2]};
    return {};
}

bool scheme_encrypted(SchemeKind kind) { return scheme_params(kind).theta == 1; }

std::string_view to_string(NodeKind k) { return k == NodeKind::gateway ? "gateway" : "point"; }

std::optional<NodeKind> parse_node_kind(std::string_view s) {
    if (s == "point") return NodeKind::point;
    if (s == "gateway") return NodeKind::gateway;
    return std::nullopt;
}

const PlanNode* MeshPlan::node(const std::string& id) const {
    for (const auto& n : nodes)
        if (n.id == id) return &n;
    return nullptr;
}

bool MeshPlan::linked(const std::string& a, const std::string& b) const {
    return std::any_of(links.begin(), links.end(),
                       [&](const PlannedLink& l) { return (l.a == a && l.b == b) || (l.a == b && l.b == a); });
}

MeshPlan plan_links(SchemeKind scheme, std::vector<PlanNode> nodes) {
    std::set<std::string> ids;
    std::vector<std::string> points;
    std::vector<std::string> gateways;
    for (const auto& n : nodes) {
        if (!ids.insert(n.id).second) throw Error(ErrorCode::invalid_parameters, "duplicate node id " + n.id);
        (n.kind == NodeKind::gateway ? gateways : points).push_back(n.id);
        if (n.kind == NodeKind::point && !n.subnets.empty())
            throw Error(ErrorCode::node_kind_mismatch, "point " + n.id + " cannot advertise subnets");
    }
    if (nodes.size() > 250) throw Error(ErrorCode::invalid_parameters, "at most 250 nodes");

    const auto mismatch = [&](const std::string& want) {
        return Error(ErrorCode::node_kind_mismatch, std::string(to_string(scheme)) + " needs " + want + ", got " +
                                                        std::to_string(points.size()) + " points and " +
                                                        std::to_string(gateways.size()) + " gateways");
    };
    switch (scheme) {
        case SchemeKind::point_to_site:
            if (points.empty() || gateways.size() != 1) throw mismatch("at least 1 point and exactly 1 gateway");
            break;
        case SchemeKind::site_to_site:
            if (gateways.size() != 2 || !points.empty()) throw mismatch("exactly 2 gateways");
            break;
        case SchemeKind::site_mesh:
            if (gateways.size() < 2 || !points.empty()) throw mismatch("at least 2 gateways");
            break;
        case SchemeKind::full_mesh:
            if (points.size() < 2 || !gateways.empty()) throw mismatch("at least 2 points and no gateways");
            break;
    }

    std::vector<std::pair<Cidr, std::string>> advertised;
    for (const auto& n : nodes) {
        for (const auto& c : n.subnets) {
            if (c.overlaps(kOverlayRange))
                throw Error(ErrorCode::overlapping_subnets, c.to_string() + " overlaps the overlay range");
            for (const auto& [other, owner] : advertised)
                if (c.overlaps(other))
                    throw Error(ErrorCode::overlapping_subnets,
                                c.to_string() + " (" + n.id + ") overlaps " + other.to_string() + " (" + owner + ")");
            advertised.emplace_back(c, n.id);
        }
    }

    MeshPlan plan;
    plan.scheme = scheme;
    plan.nodes = std::move(nodes);
    for (std::size_t i = 0; i < plan.nodes.size(); ++i)
        plan.nodes[i].overlay = Ipv4{kOverlayBase.value + static_cast<std::uint32_t>(i)};

    const bool enc = scheme_encrypted(scheme);
    const auto pairs = [&](const std::vector<std::string>& ids_in) {
        for (std::size_t i = 0; i < ids_in.size(); ++i)
            for (std::size_t j = i + 1; j < ids_in.size(); ++j) plan.links.push_back({ids_in[i], ids_in[j], enc});
    };
    switch (scheme) {
        case SchemeKind::point_to_site:
            for (const auto& p : points) plan.links.push_back({p, gateways[0], enc});
            break;
        case SchemeKind::site_to_site:
        case SchemeKind::site_mesh:
            pairs(gateways);
            break;
        case SchemeKind::full_mesh:
            pairs(points);
            break;
    }

    for (const auto& n : plan.nodes) plan.routes.push_back({Cidr(n.overlay, 32), n.id});
    for (const auto& [c, owner] : advertised) plan.routes.push_back({c, owner});
    return plan;
}

std::string_view to_string(RouteKind k) {
    switch (k) {
        case RouteKind::local: return "local";
        case RouteKind::next_hop: return "next_hop";
        case RouteKind::no_route: return "no_route";
    }
    return "?";
}

RouteDecision route_lookup(const MeshPlan& plan, const std::string& self, Ipv4 dst) {
    const Route* best = nullptr;
    for (const auto& r : plan.routes)
        if (r.prefix.contains(dst) && (!best || r.prefix.prefix_len() > best->prefix.prefix_len())) best = &r;
    RouteDecision d;
    if (!best) return d;
    d.owner = best->owner;
    if (best->owner == self) {
        d.kind = RouteKind::local;
        return d;
    }
    if (plan.linked(self, best->owner)) {
        d.kind = RouteKind::next_hop;
        d.next_hop = best->owner;
        return d;
    }
    for (const auto& n : plan.nodes) {
        if (n.kind == NodeKind::gateway && plan.linked(self, n.id) && plan.linked(n.id, best->owner)) {
            d.kind = RouteKind::next_hop;
            d.next_hop = n.id;
            return d;
        }
    }
    return d;
}

std::string next_hop_or_throw(const MeshPlan& plan, const std::string& self, Ipv4 dst) {
    const RouteDecision d = route_lookup(plan, self, dst);
    if (d.kind == RouteKind::no_route) throw Error(ErrorCode::no_route, "no route to " + dst.to_string());
    return d.kind == RouteKind::local ? self : d.next_hop;
}

Bytes OverlayPacket::encode() const {
    Bytes out;
    out.reserve(kHeaderSize + payload.size());
    out.push_back(kVersion);
    out.push_back(static_cast<std::uint8_t>(kind));
    out.push_back(ttl);
    put_u32(out, src.value);
    put_u32(out, dst.value);
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

std::optional<OverlayPacket> OverlayPacket::decode(ByteView bytes) {
    if (bytes.size() < kHeaderSize || bytes[0] != kVersion || bytes[1] > 2) return std::nullopt;
    OverlayPacket p;
    p.kind = static_cast<Kind>(bytes[1]);
    p.ttl = bytes[2];
    p.src = Ipv4{get_u32(bytes, 3)};
    p.dst = Ipv4{get_u32(bytes, 7)};
    p.payload.assign(bytes.begin() + kHeaderSize, bytes.end());
    return p;
}

}  // namespace bdmesh
