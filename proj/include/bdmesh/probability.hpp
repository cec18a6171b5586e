#pragma once

#include "bdmesh/common.hpp"

#include <cstdint>
#include <vector>

namespace bdmesh {

/// Inclusive range of ports a prober draws from and a NAT allocates from.
/// The default excludes the well-known range: 1025..65535, K = 64511.
class PortSpace {
public:
    constexpr PortSpace() = default;
    PortSpace(std::int64_t lo, std::int64_t hi);

    std::uint16_t lo() const { return lo_; }
    std::uint16_t hi() const { return hi_; }
    std::int64_t size() const { return std::int64_t{hi_} - lo_ + 1; }
    bool contains(std::int64_t port) const { return port >= lo_ && port <= hi_; }

    bool operator==(const PortSpace&) const = default;

private:
    std::uint16_t lo_ = 1025;
    std::uint16_t hi_ = 65535;
};

/// Parameters of one birthday punch. `open_ports` is the number of mappings
/// the hard side holds open, `budget` the number of distinct probes the easy
/// side may send.
struct ProbePlan {
    std::int64_t open_ports = 256;
    double probe_rate = 100.0;  // probes per second
    double duration = 10.0;     // seconds
    std::int64_t budget = 1000;

    /// budget = floor(duration * probe_rate).
    static ProbePlan from_rate(std::int64_t open_ports, double probe_rate, double duration);
};

struct ProbabilityResult {
    double value = 0.0;
};

/// Probability that at least one of `probes` distinct, uniformly drawn ports
/// lands among `open_ports` open ones in the space:
///   1 - prod_{i=0}^{probes-1} (K - open_ports - i) / (K - i)
/// Accumulated in log space; exactly 1 once probes > K - open_ports.
ProbabilityResult success_probability(const PortSpace& space, std::int64_t open_ports, std::int64_t probes);

/// Smallest probe count whose success probability reaches `target`.
std::int64_t min_probes(const PortSpace& space, std::int64_t open_ports, double target);

struct CurveRow {
    std::int64_t open_ports = 0;
    std::int64_t probes = 0;
    double probability = 0.0;
};

/// Rows for probes = 0, step, 2*step, ..., max_probes (max_probes is always
/// the last row) for each entry of `open_ports_list`, in input order.
std::vector<CurveRow> probability_curve(const PortSpace& space, const std::vector<std::int64_t>& open_ports_list,
                                        std::int64_t max_probes, std::int64_t step);

/// First `count` entries of a seeded uniform permutation of the space.
std::vector<std::uint16_t> schedule_ports(const PortSpace& space, std::int64_t count, std::uint64_t seed);

}  // namespace bdmesh
