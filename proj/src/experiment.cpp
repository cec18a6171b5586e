#include "bdmesh/experiment.hpp"

#include "bdmesh/sim_transport.hpp"

#include <atomic>
#include <cmath>
#include <memory>
#include <thread>
#include <vector>

namespace bdmesh {

namespace {

using sim::Network;
using sim::NatProfile;
using sim::SimTransport;

constexpr Micros kStunSettle = 100 * kMicrosPerMilli;

// Learns the endpoint a public observer sees for `socket`.
Endpoint pre_stun(Network& net, SimTransport& t, SocketId socket, std::optional<Endpoint>& seen_slot,
                  const Endpoint& observer) {
    t.send(socket, observer, to_bytes("stun"));
    net.run_until(net.now() + kStunSettle);
    if (!seen_slot) throw Error(ErrorCode::protocol, "observation lost");
    return *seen_slot;
}

}  // namespace

BirthdayTrialOutcome run_birthday_trial(const BirthdayTrialParams& params, std::uint64_t seed, bool trace) {
    Network net(seed);
    if (trace) net.enable_trace(false);

    auto easy = NatProfile::easy("nat-easy", Ipv4{});
    auto hard = NatProfile::hard("nat-hard", Ipv4{});
    hard.alloc_space = params.space;
    const auto easy_nat = net.add_nat(easy);
    const auto hard_nat = net.add_nat(hard);

    const auto observer_host = net.add_host("observer");
    const auto prober_host = net.add_host("prober", easy_nat);
    const auto opener_host = net.add_host("opener", hard_nat);

    std::optional<Endpoint> observed;
    const auto observer = net.bind(observer_host, 3478, [&](const sim::Datagram& d) { observed = d.src; });

    SimTransport prober_t(net, prober_host);
    SimTransport opener_t(net, opener_host);

    PunchConfig cfg;
    cfg.open_ports = params.open_ports;
    cfg.probe_rate = params.probe_rate;
    cfg.max_duration = params.max_seconds;
    cfg.space = params.space;
    cfg.seed = derive_seed(seed, 1);

    BirthdayTrialOutcome out;
    std::unique_ptr<BirthdayProber> prober;
    std::optional<Endpoint> prober_path;
    std::optional<Endpoint> opener_path;

    const auto prober_socket = prober_t.open_socket([&](SocketId, const Endpoint& from, ByteView payload) {
        if (auto p = ProbePacket::decode(payload); p && prober) prober->on_packet(from, *p);
    });
    const Endpoint prober_external = pre_stun(net, prober_t, *prober_socket, observed, *observer);
    const Ipv4 opener_ip = net.nat(hard_nat).profile().public_ip;

    auto policy = net.link_policy(prober_host);
    policy.loss = params.loss;
    net.set_link_policy(prober_host, policy);

    const SessionId session = SessionId::from_value(derive_seed(seed, 2));
    BirthdayOpener opener(opener_t, session, cfg, prober_external, [&](const PunchResult& r) {
        out.opener_established = r.established;
        if (r.established) opener_path = Endpoint{opener_ip, opener_t.local_endpoint(r.socket).port};
    });
    prober = std::make_unique<BirthdayProber>(prober_t, *prober_socket, session, cfg, opener_ip,
                                              [&](const PunchResult& r) {
                                                  out.prober_established = r.established;
                                                  out.probes_sent = r.stats.sent;
                                                  out.elapsed = r.stats.elapsed;
                                                  if (r.established) prober_path = r.peer;
                                              });

    const Micros start = net.now();
    opener.start();
    prober->start();
    net.schedule_after(cfg.prober_start_delay, [&] { out.opener_live_mappings = net.nat(hard_nat).live_mappings(net.now()); });
    net.run_until(start + std::max(cfg.opener_deadline(), cfg.prober_deadline()) + kMicrosPerSecond);

    if (prober_path && opener_path && out.opener_established) {
        // The opener knows its socket, not its external port; ask its NAT.
        const auto ext = net.nat(hard_nat).mapped_port(opener_t.local_endpoint(opener.sockets().front()),
                                                        prober_external, net.now());
        out.paths_agree = ext && *ext == prober_path->port && prober_path->ip == opener_ip;
    }
    if (trace) out.trace_hash = net.trace_hash();
    return out;
}

DirectTrialOutcome run_direct_trial(const DirectTrialParams& params, std::uint64_t seed) {
    Network net(seed);
    const auto nat_a = net.add_nat(NatProfile::easy("nat-a", Ipv4{}));
    const auto nat_b = net.add_nat(NatProfile::easy("nat-b", Ipv4{}));
    const auto observer_host = net.add_host("observer");
    const auto a = net.add_host("a", nat_a);
    const auto b = net.add_host("b", nat_b);

    std::optional<Endpoint> observed;
    const auto observer = net.bind(observer_host, 3478, [&](const sim::Datagram& d) { observed = d.src; });

    SimTransport ta(net, a);
    SimTransport tb(net, b);
    std::unique_ptr<DirectPunch> pa;
    std::unique_ptr<DirectPunch> pb;
    const auto sa = ta.open_socket([&](SocketId, const Endpoint& from, ByteView payload) {
        if (auto p = ProbePacket::decode(payload); p && pa) pa->on_packet(from, *p);
    });
    const auto sb = tb.open_socket([&](SocketId, const Endpoint& from, ByteView payload) {
        if (auto p = ProbePacket::decode(payload); p && pb) pb->on_packet(from, *p);
    });
    const Endpoint ea = pre_stun(net, ta, *sa, observed, *observer);
    observed.reset();
    const Endpoint eb = pre_stun(net, tb, *sb, observed, *observer);

    for (auto host : {a, b}) {
        auto policy = net.link_policy(host);
        policy.loss = params.loss;
        if (host == a) policy.udp_blocked = params.first_udp_blocked;
        net.set_link_policy(host, policy);
    }

    DirectTrialOutcome out;
    const SessionId session = SessionId::from_value(derive_seed(seed, 2));
    pa = std::make_unique<DirectPunch>(ta, *sa, session, eb, derive_seed(seed, 3), [&](const PunchResult& r) {
        out.first_established = r.established;
        out.first_elapsed = r.stats.elapsed;
    });
    pb = std::make_unique<DirectPunch>(tb, *sb, session, ea, derive_seed(seed, 4),
                                       [&](const PunchResult& r) { out.second_established = r.established; });
    const Micros start = net.now();
    pa->start();
    pb->start();
    net.run_until(start + kDirectTimeout + kMicrosPerSecond);
    return out;
}

MonteCarloSummary run_monte_carlo(std::int64_t trials, std::uint64_t master, unsigned workers,
                                  const std::function<bool(std::uint64_t seed)>& trial) {
    if (trials < 0) throw Error(ErrorCode::invalid_parameters, "trials must be non-negative");
    if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
    workers = static_cast<unsigned>(std::min<std::int64_t>(workers, std::max<std::int64_t>(trials, 1)));

    std::vector<std::uint8_t> results(static_cast<std::size_t>(trials), 0);
    std::atomic<std::int64_t> next{0};
    auto work = [&] {
        for (std::int64_t i = next++; i < trials; i = next++)
            results[static_cast<std::size_t>(i)] = trial(derive_seed(master, static_cast<std::uint64_t>(i))) ? 1 : 0;
    };
    if (workers == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work);
    }

    MonteCarloSummary s;
    s.trials = trials;
    for (auto r : results) s.successes += r;
    return s;
}

double lossy_success_probability(const PortSpace& space, std::int64_t open_ports, std::int64_t probes, double loss) {
    const std::int64_t k = space.size();
    if (open_ports < 0 || open_ports > k || probes < 0 || probes > k || !(loss >= 0.0 && loss <= 1.0))
        throw Error(ErrorCode::invalid_parameters, "invalid lossy oracle parameters");
    const double q = (1.0 - loss) * (1.0 - loss);
    // miss[b] = P(no success yet and b open ports still unprobed).
    std::vector<double> miss(static_cast<std::size_t>(open_ports) + 1, 0.0);
    miss[static_cast<std::size_t>(open_ports)] = 1.0;
    for (std::int64_t i = 0; i < probes; ++i) {
        const double remaining = static_cast<double>(k - i);
        std::vector<double> next(miss.size(), 0.0);
        for (std::size_t b = 0; b < miss.size(); ++b) {
            if (miss[b] == 0.0) continue;
            const double hit = static_cast<double>(b) / remaining;
            next[b] += miss[b] * (1.0 - hit);
            if (b > 0) next[b - 1] += miss[b] * hit * (1.0 - q);
        }
        miss.swap(next);
    }
    double survive = 0.0;
    for (double m : miss) survive += m;
    return std::clamp(1.0 - survive, 0.0, 1.0);
}

double three_sigma(double p, std::int64_t n) {
    if (n <= 0) return 0.0;
    return 3.0 * std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

}  // namespace bdmesh
