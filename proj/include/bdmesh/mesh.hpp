#pragma once

#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"

#include <optional>
#include <string>
#include <vector>

namespace bdmesh {

/// Gateway present, traversal expected to succeed, end-to-end encryption.
struct SchemeParams {
    int gateway = 0;
    int traversal = 1;
    int theta = 1;

    std::string to_string() const;
};

enum class SchemeKind { point_to_site, site_to_site, site_mesh, full_mesh };
std::string_view to_string(SchemeKind k);

/// Throws Error(unsupported_combination) naming the triple and the nearest
/// supported scheme; Error(invalid_parameters) for non-binary fields.
SchemeKind classify_scheme(const SchemeParams& params);
SchemeParams scheme_params(SchemeKind kind);
/// Whether overlay links of this scheme are encrypted.
bool scheme_encrypted(SchemeKind kind);

enum class NodeKind { point, gateway };
std::string_view to_string(NodeKind k);
std::optional<NodeKind> parse_node_kind(std::string_view s);

struct PlanNode {
    std::string id;
    NodeKind kind = NodeKind::point;
    std::vector<Cidr> subnets;
    /// Assigned by plan_links.
    Ipv4 overlay;
};

struct PlannedLink {
    std::string a;
    std::string b;
    bool encrypted = true;
};

/// Forwarding entry: addresses under `prefix` belong to `owner`.
struct Route {
    Cidr prefix;
    std::string owner;
};

/// First overlay address; nodes get consecutive /32s from here.
inline const Ipv4 kOverlayBase{(100u << 24) | (64u << 16) | 1u};
inline const Cidr kOverlayRange{Ipv4{(100u << 24) | (64u << 16)}, 16};

struct MeshPlan {
    SchemeKind scheme = SchemeKind::full_mesh;
    std::vector<PlanNode> nodes;
    std::vector<PlannedLink> links;
    std::vector<Route> routes;

    const PlanNode* node(const std::string& id) const;
    bool linked(const std::string& a, const std::string& b) const;
};

/// Throws Error(node_kind_mismatch) or Error(overlapping_subnets).
MeshPlan plan_links(SchemeKind scheme, std::vector<PlanNode> nodes);

enum class RouteKind { local, next_hop, no_route };
std::string_view to_string(RouteKind k);

struct RouteDecision {
    RouteKind kind = RouteKind::no_route;
    std::string next_hop;
    /// Node that owns the destination.
    std::string owner;
};

/// Longest-prefix match from `self`'s point of view. A destination owned by
/// a node without a direct link is reached through a gateway linked to both.
RouteDecision route_lookup(const MeshPlan& plan, const std::string& self, Ipv4 dst);
/// Throws Error(no_route) when nothing matches.
std::string next_hop_or_throw(const MeshPlan& plan, const std::string& self, Ipv4 dst);

/// Overlay packet carried inside link messages.
/// Layout: version (1) | kind (1) | ttl (1) | src (4) | dst (4) | payload.
struct OverlayPacket {
    enum class Kind : std::uint8_t { data = 0, echo_request = 1, echo_reply = 2 };
    static constexpr std::uint8_t kVersion = 1;
    static constexpr std::size_t kHeaderSize = 11;

    Kind kind = Kind::data;
    std::uint8_t ttl = 2;
    Ipv4 src;
    Ipv4 dst;
    Bytes payload;

    Bytes encode() const;
    static std::optional<OverlayPacket> decode(ByteView bytes);
};

}  // namespace bdmesh
