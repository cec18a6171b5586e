#include "bdmesh/experiment.hpp"
#include "bdmesh/sim_transport.hpp"
#include "bdmesh/traversal.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <memory>
#include <set>

using namespace bdmesh;
using sim::NatProfile;
using sim::Network;
using sim::SimTransport;

namespace {

const SessionId kSession = SessionId::from_value(0x0123456789abcdefULL);

// Hard-NAT opener host and easy-NAT prober host with a pre-learned prober
// external endpoint.
struct PunchBench {
    explicit PunchBench(std::uint64_t seed, PortSpace hard_space = {}, std::size_t opener_socket_limit = 4096)
        : net(seed) {
        auto hard = NatProfile::hard("nat-hard", Ipv4{});
        hard.alloc_space = hard_space;
        easy_nat = net.add_nat(NatProfile::easy("nat-easy", Ipv4{}));
        hard_nat = net.add_nat(hard);
        prober_host = net.add_host("prober", easy_nat);
        opener_host = net.add_host("opener", hard_nat);
        const auto observer_host = net.add_host("observer");
        observer = *net.bind(observer_host, 3478, [this](const sim::Datagram& d) { seen = d.src; });
        prober_t = std::make_unique<SimTransport>(net, prober_host);
        opener_t = std::make_unique<SimTransport>(net, opener_host, opener_socket_limit);
        prober_socket = *prober_t->open_socket([this](SocketId, const Endpoint& from, ByteView payload) {
            prober_inbox.emplace_back(from, Bytes(payload.begin(), payload.end()));
            if (auto p = ProbePacket::decode(payload); p && prober) prober->on_packet(from, *p);
        });
        prober_t->send(prober_socket, observer, to_bytes("stun"));
        net.run_until(100 * kMicrosPerMilli);
        prober_external = *seen;
        opener_ip = net.nat(hard_nat).profile().public_ip;
    }

    Network net;
    sim::NatId easy_nat{};
    sim::NatId hard_nat{};
    sim::HostId prober_host{};
    sim::HostId opener_host{};
    Endpoint observer;
    std::optional<Endpoint> seen;
    std::unique_ptr<SimTransport> prober_t;
    std::unique_ptr<SimTransport> opener_t;
    SocketId prober_socket = 0;
    Endpoint prober_external;
    Ipv4 opener_ip;
    std::vector<std::pair<Endpoint, Bytes>> prober_inbox;
    std::unique_ptr<BirthdayProber> prober;
};

PunchConfig small_config(std::int64_t open_ports, double seconds) {
    PunchConfig cfg;
    cfg.open_ports = open_ports;
    cfg.max_duration = seconds;
    cfg.seed = 99;
    return cfg;
}

}  // namespace

// ---------------------------------------------------------------------------
// Wire format

TEST(ProbePacketTest, EncodesExactLayout) {
    ProbePacket p{ProbePacket::Kind::probe_ack, kSession, 0x1122334455667788ULL};
    const Bytes wire = p.encode();
    ASSERT_EQ(wire.size(), 22u);
    EXPECT_EQ(to_hex(wire), "42444850" "01" "02" "0123456789abcdef" "1122334455667788");
    EXPECT_EQ(ProbePacket::decode(wire), p);
}

TEST(ProbePacketTest, RejectsMalformedDatagrams) {
    const Bytes good = ProbePacket{ProbePacket::Kind::confirm, kSession, 7}.encode();
    auto mutate = [&](std::size_t at, std::uint8_t v) {
        Bytes b = good;
        b[at] = v;
        return b;
    };
    EXPECT_FALSE(ProbePacket::decode(mutate(0, 'X')));
    EXPECT_FALSE(ProbePacket::decode(mutate(4, 0x02)));
    EXPECT_FALSE(ProbePacket::decode(mutate(5, 0x00)));
    EXPECT_FALSE(ProbePacket::decode(mutate(5, 0x04)));
    Bytes longer = good;
    longer.push_back(0);
    EXPECT_FALSE(ProbePacket::decode(longer));
    EXPECT_FALSE(ProbePacket::decode(Bytes(good.begin(), good.end() - 1)));
    EXPECT_FALSE(ProbePacket::decode(Bytes{}));
}

TEST(SessionIdTest, HexRoundTrip) {
    EXPECT_EQ(kSession.hex(), "0123456789abcdef");
    EXPECT_EQ(SessionId::from_hex("0123456789abcdef"), kSession);
    EXPECT_FALSE(SessionId::from_hex("0123"));
    EXPECT_FALSE(SessionId::from_hex("0123456789abcdeg"));
}

TEST(NamesTest, NatClassAndRoleRoundTrip) {
    for (auto c : {NatClass::public_host, NatClass::easy, NatClass::hard, NatClass::udp_blocked, NatClass::unknown})
        EXPECT_EQ(parse_nat_class(to_string(c)), c);
    for (auto r : {Role::direct, Role::opener, Role::prober, Role::relay}) EXPECT_EQ(parse_role(to_string(r)), r);
    EXPECT_EQ(to_string(NatClass::public_host), "public");
    EXPECT_FALSE(parse_nat_class("medium"));
}

// ---------------------------------------------------------------------------
// Session state machine

TEST(TraversalSessionTest, FollowsTheLadder) {
    TraversalSession s(kSession, Role::prober);
    s.advance(SessionState::observing);
    s.advance(SessionState::exchanging);
    s.advance(SessionState::punching);
    s.advance(SessionState::established_relayed);
    EXPECT_TRUE(s.terminal());
    EXPECT_THROW(s.advance(SessionState::established_direct), Error);
    EXPECT_THROW(s.fail(Failure::timeout), Error);
}

TEST(TraversalSessionTest, RejectsSkippedSteps) {
    TraversalSession s(kSession, Role::direct);
    EXPECT_THROW(s.advance(SessionState::punching), Error);
    EXPECT_THROW(s.advance(SessionState::established_direct), Error);
    s.advance(SessionState::observing);
    EXPECT_THROW(s.advance(SessionState::established_relayed), Error);
    s.advance(SessionState::exchanging);
    EXPECT_THROW(s.advance(SessionState::established_direct), Error);
    s.fail(Failure::no_path);
    EXPECT_EQ(s.state(), SessionState::failed);
    EXPECT_EQ(s.failure(), Failure::no_path);
}

TEST(TraversalSessionTest, RelayPairsSkipPunching) {
    TraversalSession s(kSession, Role::relay);
    s.advance(SessionState::observing);
    s.advance(SessionState::exchanging);
    s.advance(SessionState::established_relayed);
    EXPECT_EQ(s.state(), SessionState::established_relayed);
}

TEST(PunchConfigTest, Defaults) {
    PunchConfig cfg;
    EXPECT_EQ(cfg.open_ports, 256);
    EXPECT_EQ(cfg.probe_rate, 100.0);
    EXPECT_EQ(cfg.max_duration, 20.0);
    EXPECT_EQ(cfg.refresh_interval, sim::kDefaultMappingTtl / 2);
    EXPECT_EQ(cfg.budget(), 2000);
    EXPECT_EQ(cfg.probe_interval(), 10 * kMicrosPerMilli);
    EXPECT_NO_THROW(cfg.validate());
}

TEST(PunchConfigTest, RejectsBadValues) {
    auto expect_bad = [](auto tweak) {
        PunchConfig cfg;
        tweak(cfg);
        EXPECT_THROW(cfg.validate(), Error);
    };
    expect_bad([](PunchConfig& c) { c.open_ports = 0; });
    expect_bad([](PunchConfig& c) { c.probe_rate = 0.5; });
    expect_bad([](PunchConfig& c) { c.probe_rate = 1001; });
    expect_bad([](PunchConfig& c) { c.max_duration = 0; });
    expect_bad([](PunchConfig& c) {
        c.probe_rate = 1000;
        c.max_duration = 65;  // 65000 probes > K
    });
    expect_bad([](PunchConfig& c) { c.open_ports = 70000; });
}

// ---------------------------------------------------------------------------
// Birthday opener

TEST(BirthdayOpenerTest, HoldsDistinctMappingsTowardTheProber) {
    PunchBench bench(5);
    std::optional<PunchResult> result;
    BirthdayOpener opener(*bench.opener_t, kSession, small_config(256, 10), bench.prober_external,
                          [&](const PunchResult& r) { result = r; });
    opener.start();
    bench.net.run_until(bench.net.now() + 300 * kMicrosPerMilli);

    EXPECT_EQ(opener.open_socket_count(), 256u);
    const auto entries = bench.net.nat(bench.hard_nat).live_entries(bench.net.now());
    ASSERT_EQ(entries.size(), 256u);
    std::set<std::uint16_t> ports;
    for (const auto& e : entries) {
        ports.insert(e.external_port);
        ASSERT_TRUE(e.remote);
        EXPECT_EQ(*e.remote, bench.prober_external);
    }
    EXPECT_EQ(ports.size(), 256u);
    EXPECT_FALSE(result);
}

TEST(BirthdayOpenerTest, AnswersThroughTheProbedMapping) {
    PunchBench bench(6);
    std::optional<PunchResult> result;
    BirthdayOpener opener(*bench.opener_t, kSession, small_config(16, 10), bench.prober_external,
                          [&](const PunchResult& r) { result = r; });
    opener.start();
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);

    const auto entries = bench.net.nat(bench.hard_nat).live_entries(bench.net.now());
    const std::uint16_t port = entries[7].external_port;
    const Endpoint target{bench.opener_ip, port};
    bench.prober_inbox.clear();
    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::probe, kSession, 42}.encode());
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);

    std::vector<Endpoint> ack_sources;
    for (const auto& [from, bytes] : bench.prober_inbox) {
        auto p = ProbePacket::decode(bytes);
        if (p && p->kind == ProbePacket::Kind::probe_ack) {
            EXPECT_EQ(p->nonce, 42u);
            ack_sources.push_back(from);
        }
    }
    ASSERT_EQ(ack_sources.size(), 1u);
    EXPECT_EQ(ack_sources[0], target);

    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::confirm, kSession, 42}.encode());
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    ASSERT_TRUE(result);
    EXPECT_TRUE(result->established);
    EXPECT_EQ(result->peer, bench.prober_external);
    EXPECT_EQ(opener.open_socket_count(), 1u);
}

TEST(BirthdayOpenerTest, WrongConfirmNonceIsIgnored) {
    PunchBench bench(7);
    std::optional<PunchResult> result;
    BirthdayOpener opener(*bench.opener_t, kSession, small_config(4, 10), bench.prober_external,
                          [&](const PunchResult& r) { result = r; });
    opener.start();
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    const Endpoint target{bench.opener_ip, bench.net.nat(bench.hard_nat).live_entries(bench.net.now())[0].external_port};
    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::probe, kSession, 1}.encode());
    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::confirm, kSession, 2}.encode());
    const SessionId other = SessionId::from_value(5);
    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::confirm, other, 1}.encode());
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    EXPECT_FALSE(result);
}

TEST(BirthdayOpenerTest, DataAfterAckActsAsConfirm) {
    PunchBench bench(8);
    std::optional<PunchResult> result;
    Bytes passed;
    BirthdayOpener opener(
        *bench.opener_t, kSession, small_config(4, 10), bench.prober_external,
        [&](const PunchResult& r) { result = r; },
        [&](SocketId, const Endpoint&, ByteView payload) { passed.assign(payload.begin(), payload.end()); });
    opener.start();
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    const Endpoint target{bench.opener_ip, bench.net.nat(bench.hard_nat).live_entries(bench.net.now())[0].external_port};
    bench.prober_t->send(bench.prober_socket, target, ProbePacket{ProbePacket::Kind::probe, kSession, 1}.encode());
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    bench.prober_t->send(bench.prober_socket, target, to_bytes("app-data"));
    bench.net.run_until(bench.net.now() + 100 * kMicrosPerMilli);
    ASSERT_TRUE(result);
    EXPECT_TRUE(result->established);
    EXPECT_EQ(to_string(passed), "app-data");
}

TEST(BirthdayOpenerTest, TimesOutWhenNothingLands) {
    PunchBench bench(9);
    std::optional<PunchResult> result;
    const auto cfg = small_config(32, 2);
    BirthdayOpener opener(*bench.opener_t, kSession, cfg, bench.prober_external,
                          [&](const PunchResult& r) { result = r; });
    const Micros start = bench.net.now();
    opener.start();
    bench.net.run_until(start + cfg.opener_deadline() - 1);
    EXPECT_FALSE(result);
    bench.net.run_until(start + cfg.opener_deadline());
    ASSERT_TRUE(result);
    EXPECT_FALSE(result->established);
    EXPECT_EQ(result->failure, Failure::timeout);
    EXPECT_EQ(opener.open_socket_count(), 0u);
    EXPECT_EQ(bench.opener_t->open_sockets(), 0u);
}

TEST(BirthdayOpenerTest, RefreshOutlivesShortMappingTimers) {
    Network net(11);
    auto hard = NatProfile::hard("nat-hard", Ipv4{});
    hard.mapping_ttl = 8 * kMicrosPerSecond;
    const auto nat = net.add_nat(hard);
    const auto host = net.add_host("opener", nat);
    net.add_host("prober");
    SimTransport t(net, host);
    auto cfg = small_config(64, 20);
    cfg.refresh_interval = hard.mapping_ttl / 2;
    BirthdayOpener opener(t, kSession, cfg, Endpoint{net.host_address(1), 4000}, [](const PunchResult&) {});
    opener.start();
    net.run_until(cfg.opener_deadline() - 1);
    EXPECT_EQ(net.nat(nat).expired_total(), 0u);
    EXPECT_EQ(net.nat(nat).live_mappings(net.now()), 64u);
}

TEST(BirthdayOpenerTest, TooFewSocketsFailsWithResources) {
    PunchBench bench(10, PortSpace{}, 100);
    std::optional<PunchResult> result;
    BirthdayOpener opener(*bench.opener_t, kSession, small_config(256, 10), bench.prober_external,
                          [&](const PunchResult& r) { result = r; });
    opener.start();
    EXPECT_FALSE(result);  // reported asynchronously
    bench.net.run_until(bench.net.now() + 1);
    ASSERT_TRUE(result);
    EXPECT_EQ(result->failure, Failure::resources);
    EXPECT_EQ(bench.opener_t->open_sockets(), 0u);
}

// ---------------------------------------------------------------------------
// Birthday prober

TEST(BirthdayProberTest, ForcedHitEstablishesAfterOneProbe) {
    auto cfg = small_config(1, 10);
    const std::uint16_t first = schedule_ports(cfg.space, cfg.budget(), cfg.seed).front();
    PunchBench bench(12, PortSpace(first, first));

    std::optional<PunchResult> opened;
    std::optional<PunchResult> probed;
    BirthdayOpener opener(*bench.opener_t, kSession, cfg, bench.prober_external,
                          [&](const PunchResult& r) { opened = r; });
    bench.prober = std::make_unique<BirthdayProber>(*bench.prober_t, bench.prober_socket, kSession, cfg,
                                                    bench.opener_ip, [&](const PunchResult& r) { probed = r; });
    opener.start();
    bench.prober->start();
    bench.net.run_until(bench.net.now() + 2 * kMicrosPerSecond);

    ASSERT_TRUE(probed);
    EXPECT_TRUE(probed->established);
    // The first probe is the hit; two more leave during the 20 ms round trip.
    EXPECT_EQ(probed->peer, (Endpoint{bench.opener_ip, first}));
    EXPECT_LE(probed->stats.sent, 3);
    EXPECT_EQ(probed->stats.elapsed, cfg.prober_start_delay + 20 * kMicrosPerMilli);
    ASSERT_TRUE(opened);
    EXPECT_TRUE(opened->established);
    EXPECT_EQ(opened->peer, bench.prober_external);
}

TEST(BirthdayProberTest, AbsentOpenerExhaustsBudgetWithoutRepeats) {
    PunchBench bench(13);
    auto cfg = small_config(256, 3);
    std::optional<PunchResult> probed;
    bench.prober = std::make_unique<BirthdayProber>(*bench.prober_t, bench.prober_socket, kSession, cfg,
                                                    bench.opener_ip, [&](const PunchResult& r) { probed = r; });
    const Micros start = bench.net.now();
    bench.prober->start();
    bench.net.run_until(start + cfg.prober_deadline() - 1);
    EXPECT_FALSE(probed);
    bench.net.run_until(start + cfg.prober_deadline());
    ASSERT_TRUE(probed);
    EXPECT_FALSE(probed->established);
    EXPECT_EQ(probed->failure, Failure::timeout);
    EXPECT_EQ(probed->stats.sent, 300);
    const auto& schedule = bench.prober->schedule();
    EXPECT_EQ(std::set<std::uint16_t>(schedule.begin(), schedule.end()).size(), schedule.size());
    EXPECT_EQ(bench.prober->probes_sent(), schedule.size());
}

TEST(BirthdayProberTest, IgnoresAcksItDidNotAskFor) {
    PunchBench bench(14);
    auto cfg = small_config(256, 1);
    std::optional<PunchResult> probed;
    bench.prober = std::make_unique<BirthdayProber>(*bench.prober_t, bench.prober_socket, kSession, cfg,
                                                    bench.opener_ip, [&](const PunchResult& r) { probed = r; });
    bench.prober->start();
    bench.prober->on_packet(Endpoint{bench.opener_ip, 2000}, ProbePacket{ProbePacket::Kind::probe_ack, kSession, 77});
    bench.prober->on_packet(Endpoint{bench.opener_ip, 2000}, ProbePacket{ProbePacket::Kind::probe, kSession, 77});
    EXPECT_FALSE(probed);
}

TEST(BirthdayTrialTest, EstablishmentIsSymmetric) {
    BirthdayTrialParams params;
    params.max_seconds = 10;
    int established = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto out = run_birthday_trial(params, seed);
        EXPECT_EQ(out.opener_live_mappings, 256u);
        if (!out.prober_established) continue;
        ++established;
        EXPECT_TRUE(out.opener_established) << "seed " << seed;
        EXPECT_TRUE(out.paths_agree) << "seed " << seed;
    }
    EXPECT_GT(established, 30);
}

TEST(BirthdayTrialTest, SameSeedSameTrace) {
    BirthdayTrialParams params;
    params.max_seconds = 2;
    const auto a = run_birthday_trial(params, 77, true);
    const auto b = run_birthday_trial(params, 77, true);
    const auto c = run_birthday_trial(params, 78, true);
    EXPECT_EQ(a.trace_hash, b.trace_hash);
    EXPECT_EQ(a.probes_sent, b.probes_sent);
    EXPECT_NE(a.trace_hash, c.trace_hash);
}

// Zero-loss agreement between simulated punches and the closed form, for
// several (open ports, probes) pairs.
class MonteCarloAgreement : public ::testing::TestWithParam<std::pair<std::int64_t, std::int64_t>> {};

TEST_P(MonteCarloAgreement, WithinThreeSigma) {
    const auto [open_ports, probes] = GetParam();
    BirthdayTrialParams params;
    params.open_ports = open_ports;
    params.max_seconds = static_cast<double>(probes) / params.probe_rate;
    constexpr std::int64_t kTrials = 5000;
    const auto summary = run_monte_carlo(kTrials, 0xb1d7 + open_ports * 31 + probes, 0, [&](std::uint64_t seed) {
        return run_birthday_trial(params, seed).prober_established;
    });
    const double p = success_probability(PortSpace{}, open_ports, probes).value;
    EXPECT_NEAR(summary.rate(), p, three_sigma(p, kTrials));
}

INSTANTIATE_TEST_SUITE_P(Pairs, MonteCarloAgreement,
                         ::testing::Values(std::pair<std::int64_t, std::int64_t>{128, 1000},
                                           std::pair<std::int64_t, std::int64_t>{256, 500},
                                           std::pair<std::int64_t, std::int64_t>{256, 1000},
                                           std::pair<std::int64_t, std::int64_t>{512, 500}));

TEST(LossyOracleTest, ReducesToTheClosedFormWithoutLoss) {
    const PortSpace space;
    for (std::int64_t b : {1, 128, 256}) {
        for (std::int64_t a : {0, 10, 500, 1000}) {
            EXPECT_NEAR(lossy_success_probability(space, b, a, 0.0), success_probability(space, b, a).value, 1e-12);
        }
    }
    EXPECT_EQ(lossy_success_probability(space, 256, 1000, 1.0), 0.0);
}

TEST(LossyOracleTest, MatchesEnumerationOnATinySpace) {
    // K = 4, B = 1, A = 2: hit on probe 1 w.p. 1/4, else on probe 2 w.p. 1/3.
    const PortSpace space(1, 4);
    const double q = 0.64;
    const double expected = 0.25 * q + 0.75 * (1.0 / 3.0) * q;
    EXPECT_NEAR(lossy_success_probability(space, 1, 2, 0.2), expected, 1e-15);
}

TEST(LossyAgreementTest, TwentyPercentLossMatchesAdjustedOracle) {
    BirthdayTrialParams params;
    params.loss = 0.2;
    constexpr std::int64_t kTrials = 2000;
    const auto summary = run_monte_carlo(kTrials, 7, 0, [&](std::uint64_t seed) {
        return run_birthday_trial(params, seed).prober_established;
    });
    const double p = lossy_success_probability(PortSpace{}, 256, 1000, 0.2);
    EXPECT_NEAR(summary.rate(), p, three_sigma(p, kTrials));
}

TEST(MonteCarloTest, WorkerCountDoesNotChangeResults) {
    BirthdayTrialParams params;
    params.max_seconds = 3;
    auto trial = [&](std::uint64_t seed) { return run_birthday_trial(params, seed).prober_established; };
    const auto one = run_monte_carlo(60, 3, 1, trial);
    const auto four = run_monte_carlo(60, 3, 4, trial);
    EXPECT_EQ(one.successes, four.successes);
    EXPECT_GT(one.successes, 0);
    EXPECT_LT(one.successes, 60);
}

// ---------------------------------------------------------------------------
// Direct punch

TEST(DirectPunchTest, ZeroLossEstablishesWithinTwoRoundTrips) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto out = run_direct_trial({}, seed);
        EXPECT_TRUE(out.first_established);
        EXPECT_TRUE(out.second_established);
        // One-way delay is 10 ms between two NATted hosts.
        EXPECT_LE(out.first_elapsed, 2 * 2 * 10 * kMicrosPerMilli);
    }
}

TEST(DirectPunchTest, BlockedSideTimesOut) {
    const auto out = run_direct_trial({0.0, true}, 1);
    EXPECT_FALSE(out.first_established);
    EXPECT_FALSE(out.second_established);
}

TEST(DirectPunchTest, TwentyPercentLossStillEstablishes) {
    constexpr std::int64_t kTrials = 1000;
    const auto summary = run_monte_carlo(kTrials, 20, 0, [](std::uint64_t seed) {
        const auto out = run_direct_trial({0.2, false}, seed);
        return out.first_established && out.second_established;
    });
    EXPECT_GT(summary.rate(), 0.99);
}

TEST(DirectPunchTest, DuplicatesLeaveStateUnchanged) {
    Network net(3);
    const auto a = net.add_host("a");
    const auto b = net.add_host("b");
    SimTransport ta(net, a);
    SimTransport tb(net, b);
    std::unique_ptr<DirectPunch> pa;
    std::unique_ptr<DirectPunch> pb;
    std::vector<ProbePacket> seen_by_a;
    Endpoint from_b;
    const auto sa = *ta.open_socket([&](SocketId, const Endpoint& from, ByteView payload) {
        if (auto p = ProbePacket::decode(payload)) {
            seen_by_a.push_back(*p);
            from_b = from;
            pa->on_packet(from, *p);
        }
    });
    const auto sb = *tb.open_socket([&](SocketId, const Endpoint& from, ByteView payload) {
        if (auto p = ProbePacket::decode(payload)) pb->on_packet(from, *p);
    });
    int a_done = 0;
    int b_done = 0;
    pa = std::make_unique<DirectPunch>(ta, sa, kSession, tb.local_endpoint(sb), 1, [&](const PunchResult&) { ++a_done; });
    pb = std::make_unique<DirectPunch>(tb, sb, kSession, ta.local_endpoint(sa), 2, [&](const PunchResult&) { ++b_done; });
    pa->start();
    pb->start();
    net.run_until(kMicrosPerSecond);
    ASSERT_EQ(a_done, 1);
    ASSERT_EQ(b_done, 1);

    const auto stats = pa->stats();
    for (const auto& p : seen_by_a) {
        if (p.kind == ProbePacket::Kind::probe) continue;
        pa->on_packet(from_b, p);
    }
    EXPECT_EQ(a_done, 1);
    EXPECT_EQ(pa->stats().received, stats.received);
    EXPECT_TRUE(pa->finished());
}

// ---------------------------------------------------------------------------
// NAT classification

namespace {

struct ClassifyBench {
    explicit ClassifyBench(std::optional<NatProfile> profile, bool blocked = false, bool second_dead = false)
        : net(21) {
        std::optional<sim::NatId> nat;
        if (profile) nat = net.add_nat(*profile);
        const auto server = net.add_host("coord");
        sim::LinkPolicy policy;
        policy.udp_blocked = blocked;
        host = net.add_host("node", nat, policy);
        for (int i = 0; i < 2; ++i) {
            const std::uint16_t port = static_cast<std::uint16_t>(3478 + i);
            observers[static_cast<std::size_t>(i)] = Endpoint{net.host_address(server), port};
            if (i == 1 && second_dead) continue;
            net.bind(server, port, [this, server, port](const sim::Datagram& d) {
                const auto msg = nlohmann::json::parse(to_string(d.payload));
                const nlohmann::json reply{{"type", "observed"},
                                           {"token", msg["token"]},
                                           {"endpoint", {{"ip", d.src.ip.to_string()}, {"port", d.src.port}}}};
                net.send(server, Endpoint{net.host_address(server), port}, d.src, to_bytes(reply.dump()));
            });
        }
        t = std::make_unique<SimTransport>(net, host);
        socket = *t->open_socket([this](SocketId, const Endpoint&, ByteView payload) {
            const auto msg = nlohmann::json::parse(to_string(payload));
            classifier->on_observed(msg["token"].get<std::uint64_t>(),
                                    Endpoint{*Ipv4::parse(msg["endpoint"]["ip"].get<std::string>()),
                                             msg["endpoint"]["port"].get<std::uint16_t>()});
        });
    }

    NatClass run() {
        classifier = std::make_unique<NatClassifier>(*t, socket, observers, "node", 5,
                                                     [this](NatClass c, std::optional<Endpoint>) {
                                                         result = c;
                                                         decided_at = net.now();
                                                     });
        classifier->start();
        net.run_until(10 * kMicrosPerSecond);
        return result.value_or(NatClass::unknown);
    }

    Network net;
    sim::HostId host{};
    std::array<Endpoint, 2> observers;
    std::unique_ptr<SimTransport> t;
    SocketId socket = 0;
    std::unique_ptr<NatClassifier> classifier;
    std::optional<NatClass> result;
    Micros decided_at = 0;
};

}  // namespace

TEST(NatClassifierTest, EasyPreset) { EXPECT_EQ(ClassifyBench(NatProfile::easy("n", Ipv4{})).run(), NatClass::easy); }

TEST(NatClassifierTest, HardPreset) { EXPECT_EQ(ClassifyBench(NatProfile::hard("n", Ipv4{})).run(), NatClass::hard); }

TEST(NatClassifierTest, PublicHost) { EXPECT_EQ(ClassifyBench(std::nullopt).run(), NatClass::public_host); }

TEST(NatClassifierTest, BlockedLink) {
    ClassifyBench bench(NatProfile::easy("n", Ipv4{}), true);
    EXPECT_EQ(bench.run(), NatClass::udp_blocked);
    EXPECT_EQ(bench.decided_at, kObserveTries * kObserveRetryInterval);
}

TEST(NatClassifierTest, OneObserverSilent) {
    EXPECT_EQ(ClassifyBench(NatProfile::easy("n", Ipv4{}), false, true).run(), NatClass::unknown);
}

TEST(NatClassifierTest, PureDecisionTable) {
    const Endpoint local{Ipv4{0x0a000001}, 5000};
    const Endpoint e1{Ipv4{0xc6336401}, 6000};
    const Endpoint e2{Ipv4{0xc6336401}, 6001};
    EXPECT_EQ(classify_observations(std::nullopt, std::nullopt, local), NatClass::udp_blocked);
    EXPECT_EQ(classify_observations(e1, std::nullopt, local), NatClass::unknown);
    EXPECT_EQ(classify_observations(std::nullopt, e1, local), NatClass::unknown);
    EXPECT_EQ(classify_observations(local, local, local), NatClass::public_host);
    EXPECT_EQ(classify_observations(e1, e1, local), NatClass::easy);
    EXPECT_EQ(classify_observations(e1, e2, local), NatClass::hard);
}
