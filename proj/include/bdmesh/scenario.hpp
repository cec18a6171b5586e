#pragma once

#include "bdmesh/mesh.hpp"
#include "bdmesh/netsim.hpp"
#include "bdmesh/rendezvous.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace bdmesh {

/// Validation failure with the JSON path of the offending field.
class ScenarioError : public Error {
public:
    ScenarioError(std::string path, const std::string& message)
        : Error(ErrorCode::invalid_scenario, path + ": " + message), path_(std::move(path)) {}
    const std::string& path() const { return path_; }

private:
    std::string path_;
};

struct ScenarioHost {
    std::string id;
    std::optional<std::string> nat;
    NodeKind kind = NodeKind::point;
};

struct ScenarioNat {
    std::string id;
    sim::NatProfile profile;
};

struct ScenarioLink {
    std::string host;
    sim::LinkPolicy policy;
};

struct ScenarioSubnet {
    std::string gateway;
    Cidr cidr;
};

struct Scenario {
    std::vector<ScenarioHost> hosts;
    std::vector<ScenarioNat> nats;
    std::vector<ScenarioLink> links;
    SchemeParams scheme;
    std::vector<ScenarioSubnet> subnets;
    std::int64_t trials = 1;
    std::uint64_t seed = 1;
    wire::PunchParams punch;
};

/// Throws ScenarioError. The scheme triple is checked for being binary but
/// not for being supported; that is classify_scheme's job.
Scenario parse_scenario(const nlohmann::json& doc);
Scenario load_scenario(const std::string& path);

struct LinkOutcome {
    PlannedLink planned;
    std::string path;  // direct, relayed, none
    std::string role;
    std::string state;
    std::string failure;
    std::int64_t probes_sent = 0;
    double elapsed_ms = 0.0;
    bool payload_ok = false;
};

struct PingOutcome {
    std::string from;
    std::string to;
    Ipv4 dst;
    std::string via;
    bool ok = false;
};

struct Realization {
    MeshPlan plan;
    std::vector<std::string> nat_classes;  // per plan node
    std::vector<LinkOutcome> links;
    std::vector<PingOutcome> pings;
    bool connected = false;
    bool fully_direct = false;
    bool plaintext_marker_seen = false;
    std::string trace_hash;
    std::vector<sim::TraceEvent> trace;
};

/// Marker carried in every test payload; a sniffer looks for it on the wire.
inline constexpr std::string_view kPlaintextMarker = "BDMESH-PLAINTEXT-MARKER";

struct RealizeOptions {
    bool trace = false;
    bool keep_trace_events = false;
    /// Test payload size per link direction.
    std::size_t payload_bytes = 4096;
    bool pings = true;
};

/// Builds the simulated world, plans the scheme and drives every planned
/// link. Throws Error(unsupported_combination) and the plan_links errors;
/// Error(protocol) when nodes never become ready.
Realization realize(const Scenario& scenario, std::uint64_t seed, const RealizeOptions& options = {});

struct ScenarioSummary {
    std::int64_t trials = 0;
    std::int64_t connected = 0;
    std::int64_t fully_direct = 0;
};

/// Runs `trials` realizations with seeds derive_seed(seed, i).
ScenarioSummary realize_trials(const Scenario& scenario, std::int64_t trials, std::uint64_t seed, unsigned workers);

nlohmann::ordered_json report_json(const Realization& r, std::uint64_t seed);
nlohmann::ordered_json plan_json(const MeshPlan& plan);

}  // namespace bdmesh
