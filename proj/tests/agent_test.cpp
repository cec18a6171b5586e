#include "bdmesh/sim_world.hpp"

#include <gtest/gtest.h>

#include <algorithm>

using namespace bdmesh;
using namespace bdmesh::sim;

namespace {

std::optional<NatId> easy(SimWorld& w, const std::string& id) { return w.add_nat(NatProfile::easy(id, Ipv4{})); }
std::optional<NatId> hard(SimWorld& w, const std::string& id) { return w.add_nat(NatProfile::hard(id, Ipv4{})); }

bool contains(ByteView hay, std::string_view needle) {
    return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

void echo(SimWorld& w, const std::string& from, const std::string& to, const std::string& text) {
    ASSERT_TRUE(w.agent(from).send(to, to_bytes(text)));
    w.run_for(2 * kMicrosPerSecond);
    const auto& inbox = w.inbox(to);
    ASSERT_FALSE(inbox.empty());
    EXPECT_EQ(inbox.back().first, from);
    EXPECT_EQ(to_string(inbox.back().second), text);
}

}  // namespace

TEST(AgentTest, ClassifiesAndBecomesReady) {
    SimWorld w({.seed = 3});
    w.add_node("pub", std::nullopt);
    w.add_node("e", easy(w, "ne"));
    w.add_node("h", hard(w, "nh"));
    w.add_node("b", std::nullopt, LinkPolicy{.udp_blocked = true});
    ASSERT_TRUE(w.start());
    EXPECT_EQ(w.agent("pub").nat_class(), NatClass::public_host);
    EXPECT_EQ(w.agent("e").nat_class(), NatClass::easy);
    EXPECT_EQ(w.agent("h").nat_class(), NatClass::hard);
    EXPECT_EQ(w.agent("b").nat_class(), NatClass::udp_blocked);
    EXPECT_EQ(w.coordinator().node("h")->nat_class, NatClass::hard);
}

TEST(AgentTest, EasyPairLinksDirectlyAndEncrypted) {
    SimWorld w({.seed = 4});
    w.add_node("a", easy(w, "na"));
    w.add_node("b", easy(w, "nb"));
    ASSERT_TRUE(w.start());
    const LinkStatus s = w.connect("a", "b", true);
    EXPECT_EQ(s.failure, Failure::none);
    EXPECT_EQ(s.path, LinkPath::direct);
    EXPECT_EQ(s.state, SessionState::established_direct);
    EXPECT_TRUE(s.ready);
    EXPECT_TRUE(w.agent("b").link("a")->ready);
    echo(w, "a", "b", "hello b");
    echo(w, "b", "a", "hello a");
}

TEST(AgentTest, EasyHardPairUsesBirthdayPunch) {
    SimWorld w({.seed = 5});
    w.add_node("e", easy(w, "ne"));
    w.add_node("h", hard(w, "nh"));
    ASSERT_TRUE(w.start());
    const LinkStatus s = w.connect("e", "h", true);
    ASSERT_EQ(s.failure, Failure::none);
    EXPECT_EQ(s.role, Role::prober);
    EXPECT_EQ(w.agent("h").link("e")->role, Role::opener);
    EXPECT_EQ(s.path, LinkPath::direct);
    EXPECT_GT(s.stats.sent, 0);
    echo(w, "h", "e", "through the birthday hole");
}

TEST(AgentTest, HardPairFallsBackToRelay) {
    SimWorld w({.seed = 6});
    w.add_node("h1", hard(w, "n1"));
    w.add_node("h2", hard(w, "n2"));
    ASSERT_TRUE(w.start());
    const LinkStatus s = w.connect("h1", "h2", true);
    ASSERT_EQ(s.failure, Failure::none);
    EXPECT_EQ(s.role, Role::relay);
    EXPECT_EQ(s.path, LinkPath::relayed);
    EXPECT_EQ(s.state, SessionState::established_relayed);
    echo(w, "h1", "h2", "via coordinator");
    const RelaySession* relay = w.coordinator().session(s.session);
    ASSERT_TRUE(relay);
    EXPECT_GT(relay->a_to_b_frames + relay->b_to_a_frames, 0u);
}

TEST(AgentTest, BlockedNodeIsRelayed) {
    SimWorld w({.seed = 7});
    w.add_node("b", std::nullopt, LinkPolicy{.udp_blocked = true});
    w.add_node("e", easy(w, "ne"));
    ASSERT_TRUE(w.start());
    const LinkStatus s = w.connect("e", "b", true);
    ASSERT_EQ(s.failure, Failure::none);
    EXPECT_EQ(s.path, LinkPath::relayed);
    echo(w, "e", "b", "blocked but reachable");
}

TEST(AgentTest, LargeRelayedMessageArrivesIntact) {
    SimWorld w({.seed = 8});
    w.add_node("h1", hard(w, "n1"));
    w.add_node("h2", hard(w, "n2"));
    ASSERT_TRUE(w.start());
    ASSERT_EQ(w.connect("h1", "h2", true).failure, Failure::none);
    Bytes big(64 * 1024);
    Rng rng(9);
    for (auto& b : big) b = static_cast<std::uint8_t>(rng.next());
    ASSERT_TRUE(w.agent("h1").send("h2", big));
    w.run_for(3 * kMicrosPerSecond);
    ASSERT_EQ(w.inbox("h2").size(), 1u);
    EXPECT_EQ(w.inbox("h2")[0].second, big);
}

TEST(AgentTest, LargeDirectMessageArrivesIntact) {
    SimWorld w({.seed = 10});
    w.add_node("a", easy(w, "na"));
    w.add_node("b", std::nullopt);
    ASSERT_TRUE(w.start());
    ASSERT_EQ(w.connect("a", "b", false).path, LinkPath::direct);
    Bytes big(20000, 0x5a);
    ASSERT_TRUE(w.agent("a").send("b", big));
    w.run_for(2 * kMicrosPerSecond);
    ASSERT_EQ(w.inbox("b").size(), 1u);
    EXPECT_EQ(w.inbox("b")[0].second, big);
}

TEST(AgentTest, MessagesSentBeforeReadyAreQueued) {
    SimWorld w({.seed = 11});
    w.add_node("a", easy(w, "na"));
    w.add_node("b", easy(w, "nb"));
    ASSERT_TRUE(w.start());
    w.agent("a").connect("b", true);
    w.run_for(300 * kMicrosPerMilli);
    ASSERT_TRUE(w.agent("a").link("b"));
    EXPECT_TRUE(w.agent("a").send("b", to_bytes("early")));
    w.run_for(5 * kMicrosPerSecond);
    ASSERT_EQ(w.inbox("b").size(), 1u);
    EXPECT_EQ(to_string(w.inbox("b")[0].second), "early");
}

class SnifferTest : public ::testing::TestWithParam<bool> {};

TEST_P(SnifferTest, MarkerVisibleOnlyWithoutEncryption) {
    const bool secure = GetParam();
    SimWorld w({.seed = 12});
    w.add_node("a", easy(w, "na"));
    w.add_node("b", easy(w, "nb"));
    w.add_node("h1", hard(w, "n1"));
    w.add_node("h2", hard(w, "n2"));
    bool seen = false;
    w.add_wire_sniffer([&](ByteView bytes) { seen = seen || contains(bytes, "MARKER-7f3a"); });
    ASSERT_TRUE(w.start());
    ASSERT_EQ(w.connect("a", "b", secure).failure, Failure::none);
    ASSERT_EQ(w.connect("h1", "h2", secure).failure, Failure::none);
    echo(w, "a", "b", "MARKER-7f3a direct");
    echo(w, "h1", "h2", "MARKER-7f3a relayed");
    EXPECT_EQ(seen, !secure);
}

INSTANTIATE_TEST_SUITE_P(Modes, SnifferTest, ::testing::Values(true, false),
                         [](const auto& info) { return info.param ? "Encrypted" : "Plain"; });

TEST(AgentTest, WrongPinnedKeyFailsTheHandshake) {
    SimWorld w({.seed = 13});
    w.add_node("a", easy(w, "na"));
    w.add_node("b", easy(w, "nb"));
    ASSERT_TRUE(w.start());
    // A tampering coordinator hands a a key that b does not hold.
    const Identity impostor = Identity::from_seed(999);
    w.rewrite_lines_to("a", [&](std::string line) {
        Json msg = Json::parse(line);
        if (msg["type"] == "introduce") msg["peer_pubkey_b64"] = impostor.public_key_b64();
        return msg.dump();
    });
    const LinkStatus s = w.connect("a", "b", true, 20 * kMicrosPerSecond);
    // b sees a hello bound to a key it does not hold; a gives up waiting.
    EXPECT_EQ(s.failure, Failure::handshake);
    EXPECT_FALSE(s.ready);
    const LinkStatus* sb = w.agent("b").link("a");
    ASSERT_TRUE(sb);
    EXPECT_EQ(sb->failure, Failure::handshake);
    EXPECT_EQ(sb->handshake_error, HandshakeError::identity);
    EXPECT_FALSE(w.agent("a").send("b", to_bytes("x")));
}

TEST(AgentTest, ControlLossDuringRelayGivesNoPath) {
    SimWorld w({.seed = 14});
    w.add_node("h1", hard(w, "n1"));
    w.add_node("h2", hard(w, "n2"));
    ASSERT_TRUE(w.start());
    w.agent("h1").connect("h2", true);
    w.run_for(50 * kMicrosPerMilli);
    w.cut_control("h1");
    w.run_for(15 * kMicrosPerSecond);
    const LinkStatus* s = w.agent("h1").link("h2");
    ASSERT_TRUE(s);
    EXPECT_EQ(s->failure, Failure::no_path);
}

TEST(AgentTest, UnknownPeerIsReported) {
    SimWorld w({.seed = 15});
    w.add_node("a", easy(w, "na"));
    ASSERT_TRUE(w.start());
    std::string code;
    w.agent("a").on_error([&](const std::string& c, const std::string&) { code = c; });
    const LinkStatus s = w.connect("a", "ghost", true, 2 * kMicrosPerSecond);
    EXPECT_EQ(code, wire::kNoSuchNode);
    EXPECT_EQ(s.failure, Failure::no_path);
}

TEST(AgentTest, SameSeedSameTrace) {
    auto run = [] {
        SimWorld w({.seed = 16, .trace = true});
        w.add_node("e", easy(w, "ne"));
        w.add_node("h", hard(w, "nh"));
        w.add_node("h2", hard(w, "nh2"));
        EXPECT_TRUE(w.start());
        w.connect("e", "h", true);
        w.connect("h", "h2", true);
        w.agent("e").send("h", to_bytes("x"));
        w.run_for(kMicrosPerSecond);
        return w.net().trace_hash();
    };
    const std::string first = run();
    EXPECT_FALSE(first.empty());
    EXPECT_EQ(first, run());
}
