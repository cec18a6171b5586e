#include "bdmesh/probability.hpp"

#include "bdmesh/rng.hpp"

#include <cmath>
#include <string>
#include <unordered_map>

namespace bdmesh {

namespace {

// Neumaier-compensated running sum of log((K-B-i)/(K-i)). Shared by every
// entry point so they agree bit-for-bit at the same probe count.
class MissLogAccumulator {
public:
    MissLogAccumulator(std::int64_t space_size, std::int64_t open_ports)
        : space_size_(space_size), open_ports_(open_ports) {}

    // Folds in the factor for probe index `steps_` and advances.
    void step() {
        const std::int64_t remaining = space_size_ - steps_;
        if (remaining - open_ports_ <= 0) {
            certain_ = true;
        } else if (!certain_) {
            add(std::log1p(-static_cast<double>(open_ports_) / static_cast<double>(remaining)));
        }
        ++steps_;
    }

    std::int64_t steps() const { return steps_; }

    double success() const {
        if (certain_) return 1.0;
        const double p = -std::expm1(sum_ + compensation_);
        return p <= 0.0 ? 0.0 : (p > 1.0 ? 1.0 : p);
    }

private:
    void add(double term) {
        const double t = sum_ + term;
        if (std::fabs(sum_) >= std::fabs(term)) {
            compensation_ += (sum_ - t) + term;
        } else {
            compensation_ += (term - t) + sum_;
        }
        sum_ = t;
    }

    std::int64_t space_size_;
    std::int64_t open_ports_;
    std::int64_t steps_ = 0;
    double sum_ = 0.0;
    double compensation_ = 0.0;
    bool certain_ = false;
};

void check_open_ports(const PortSpace& space, std::int64_t open_ports) {
    if (open_ports < 0 || open_ports > space.size()) {
        throw Error(ErrorCode::invalid_parameters,
                    "open ports " + std::to_string(open_ports) + " outside [0, " + std::to_string(space.size()) + "]");
    }
}

}  // namespace

PortSpace::PortSpace(std::int64_t lo, std::int64_t hi) {
    if (lo < 1 || hi > 65535 || lo > hi) {
        throw Error(ErrorCode::invalid_parameters,
                    "port space [" + std::to_string(lo) + ", " + std::to_string(hi) + "] is not within 1..65535");
    }
    lo_ = static_cast<std::uint16_t>(lo);
    hi_ = static_cast<std::uint16_t>(hi);
}

ProbePlan ProbePlan::from_rate(std::int64_t open_ports, double probe_rate, double duration) {
    if (open_ports < 0 || !(probe_rate >= 0.0) || !(duration >= 0.0)) {
        throw Error(ErrorCode::invalid_parameters, "probe plan parameters must be non-negative");
    }
    ProbePlan plan;
    plan.open_ports = open_ports;
    plan.probe_rate = probe_rate;
    plan.duration = duration;
    // Guard against 10 * 100.0 landing a hair under 1000.
    plan.budget = static_cast<std::int64_t>(std::floor(duration * probe_rate + 1e-9));
    return plan;
}

ProbabilityResult success_probability(const PortSpace& space, std::int64_t open_ports, std::int64_t probes) {
    check_open_ports(space, open_ports);
    if (probes < 0) throw Error(ErrorCode::invalid_parameters, "probe count must be non-negative");
    if (probes > space.size() - open_ports) return {1.0};
    MissLogAccumulator acc(space.size(), open_ports);
    for (std::int64_t i = 0; i < probes; ++i) acc.step();
    return {acc.success()};
}

std::int64_t min_probes(const PortSpace& space, std::int64_t open_ports, double target) {
    if (!(target > 0.0) || target > 1.0) {
        throw Error(ErrorCode::invalid_parameters, "target probability must lie in (0, 1]");
    }
    check_open_ports(space, open_ports);
    if (open_ports == 0) throw Error(ErrorCode::unreachable_target, "no open ports: target is unreachable");
    const std::int64_t pigeonhole = space.size() - open_ports + 1;
    if (target >= 1.0) return pigeonhole;
    MissLogAccumulator acc(space.size(), open_ports);
    while (acc.success() < target && acc.steps() < pigeonhole) acc.step();
    return acc.steps();
}

std::vector<CurveRow> probability_curve(const PortSpace& space, const std::vector<std::int64_t>& open_ports_list,
                                        std::int64_t max_probes, std::int64_t step) {
    if (step < 1) throw Error(ErrorCode::invalid_parameters, "curve step must be >= 1");
    if (max_probes < 0) throw Error(ErrorCode::invalid_parameters, "max probes must be non-negative");
    for (auto b : open_ports_list) check_open_ports(space, b);

    std::vector<CurveRow> rows;
    for (auto b : open_ports_list) {
        MissLogAccumulator acc(space.size(), b);
        std::int64_t a = 0;
        while (true) {
            while (acc.steps() < a) acc.step();
            const double p = a > space.size() - b ? 1.0 : acc.success();
            rows.push_back({b, a, p});
            if (a == max_probes) break;
            a = std::min(a + step, max_probes);
        }
    }
    return rows;
}

std::vector<std::uint16_t> schedule_ports(const PortSpace& space, std::int64_t count, std::uint64_t seed) {
    if (count < 0 || count > space.size()) {
        throw Error(ErrorCode::invalid_parameters,
                    "cannot schedule " + std::to_string(count) + " distinct ports from a space of " +
                        std::to_string(space.size()));
    }
    // Partial Fisher-Yates over a virtual identity array; only displaced
    // slots are stored, so memory is O(count).
    Rng rng(seed);
    std::unordered_map<std::int64_t, std::int64_t> displaced;
    displaced.reserve(static_cast<std::size_t>(count) * 2);
    auto slot = [&](std::int64_t i) {
        auto it = displaced.find(i);
        return it == displaced.end() ? i : it->second;
    };
    const std::int64_t n = space.size();
    std::vector<std::uint16_t> ports;
    ports.reserve(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t j = i + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(n - i)));
        const std::int64_t picked = slot(j);
        displaced[j] = slot(i);
        ports.push_back(static_cast<std::uint16_t>(space.lo() + picked));
    }
    return ports;
}

}  // namespace bdmesh
