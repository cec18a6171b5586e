#pragma once

#include "bdmesh/probability.hpp"
#include "bdmesh/traversal.hpp"

#include <cstdint>
#include <functional>
#include <string>

namespace bdmesh {

/// One easy-NAT prober against one hard-NAT opener, both on fresh NATs.
struct BirthdayTrialParams {
    std::int64_t open_ports = 256;
    double probe_rate = 100.0;
    double max_seconds = 10.0;
    /// Loss on the prober's access link, switched on after the prober has
    /// learned its external endpoint.
    double loss = 0.0;
    PortSpace space;
};

struct BirthdayTrialOutcome {
    bool prober_established = false;
    bool opener_established = false;
    /// Both ends recorded the same (prober external endpoint, opener port).
    bool paths_agree = false;
    std::int64_t probes_sent = 0;
    Micros elapsed = 0;
    std::size_t opener_live_mappings = 0;
    std::string trace_hash;
};

BirthdayTrialOutcome run_birthday_trial(const BirthdayTrialParams& params, std::uint64_t seed, bool trace = false);

struct DirectTrialParams {
    /// Loss applied to both peers' access links.
    double loss = 0.0;
    bool first_udp_blocked = false;
};

struct DirectTrialOutcome {
    bool first_established = false;
    bool second_established = false;
    Micros first_elapsed = 0;
};

DirectTrialOutcome run_direct_trial(const DirectTrialParams& params, std::uint64_t seed);

struct MonteCarloSummary {
    std::int64_t trials = 0;
    std::int64_t successes = 0;

    double rate() const { return trials ? static_cast<double>(successes) / static_cast<double>(trials) : 0.0; }
};

/// Runs `trials` independent trials with seeds derive_seed(master, i).
/// `workers` = 0 picks the hardware concurrency. The summary depends only
/// on (trials, master), never on the worker count.
MonteCarloSummary run_monte_carlo(std::int64_t trials, std::uint64_t master, unsigned workers,
                                  const std::function<bool(std::uint64_t seed)>& trial);

/// Success probability when every probe and every ACK is independently lost
/// with probability `loss`. A hit whose probe or ACK is lost burns that open
/// port, since the prober never revisits a port. Exact dynamic program over
/// the number of still-unhit open ports.
double lossy_success_probability(const PortSpace& space, std::int64_t open_ports, std::int64_t probes, double loss);

/// Half-width of the 3-sigma binomial interval around p for n trials.
double three_sigma(double p, std::int64_t n);

}  // namespace bdmesh
