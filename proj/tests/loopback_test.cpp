#include "bdmesh/service.hpp"

#include <gtest/gtest.h>

using namespace bdmesh;
using namespace bdmesh::io;

namespace {

const Ipv4 kLoopback{0x7f000001};

struct Loopback {
    EventLoop loop{kLoopback};
    CoordinatorService coord{loop, Coordinator::Options{}};

    Loopback() { EXPECT_TRUE(coord.start({kLoopback, 0}, {kLoopback, 0})); }

    NodeService::Options node_options(const std::string& id) {
        NodeService::Options o;
        o.node_id = id;
        o.coord = coord.observer(0);
        o.coord_secondary = coord.observer(1);
        return o;
    }
};

}  // namespace

TEST(LoopbackTest, CoordinatorSharesThePrimaryPort) {
    Loopback w;
    EXPECT_EQ(w.coord.stream_endpoint(), w.coord.observer(0));
    EXPECT_NE(w.coord.observer(0).port, w.coord.observer(1).port);
}

TEST(LoopbackTest, TwoNodesEchoOverAnEncryptedDirectLink) {
    Loopback w;
    const Identity ida = Identity::generate();
    const Identity idb = Identity::generate();
    NodeService a(w.loop, ida, w.node_options("alice"));
    NodeService b(w.loop, idb, w.node_options("bob"));
    ASSERT_TRUE(a.start());
    ASSERT_TRUE(b.start());
    ASSERT_TRUE(w.loop.run_until([&] { return a.agent().ready() && b.agent().ready(); }, 5 * kMicrosPerSecond));
    EXPECT_EQ(a.agent().nat_class(), NatClass::public_host);

    b.agent().on_message([&](const std::string& peer, const Bytes& msg) {
        Bytes reply = to_bytes("echo:");
        reply.insert(reply.end(), msg.begin(), msg.end());
        b.agent().send(peer, reply);
    });
    std::string got;
    a.agent().on_message([&](const std::string&, const Bytes& msg) { got = to_string(msg); });

    a.agent().connect("bob", true);
    ASSERT_TRUE(w.loop.run_until(
        [&] {
            const LinkStatus* s = a.agent().link("bob");
            return s && (s->ready || s->failure != Failure::none);
        },
        10 * kMicrosPerSecond));
    const LinkStatus* s = a.agent().link("bob");
    ASSERT_TRUE(s->ready);
    EXPECT_EQ(s->path, LinkPath::direct);
    EXPECT_TRUE(s->secure);

    ASSERT_TRUE(a.agent().send("bob", to_bytes("hello over udp")));
    ASSERT_TRUE(w.loop.run_until([&] { return !got.empty(); }, 5 * kMicrosPerSecond));
    EXPECT_EQ(got, "echo:hello over udp");
}

TEST(LoopbackTest, DuplicateIdWithAnotherKeyIsAConflict) {
    Loopback w;
    const Identity first = Identity::generate();
    const Identity second = Identity::generate();
    NodeService a(w.loop, first, w.node_options("same"));
    ASSERT_TRUE(a.start());
    ASSERT_TRUE(w.loop.run_until([&] { return a.agent().ready(); }, 5 * kMicrosPerSecond));
    NodeService b(w.loop, second, w.node_options("same"));
    ASSERT_TRUE(b.start());
    w.loop.run_until([&] { return b.status() != NodeService::Status::running; }, 5 * kMicrosPerSecond);
    EXPECT_EQ(b.status(), NodeService::Status::identity_conflict);
    EXPECT_EQ(a.status(), NodeService::Status::running);
}

TEST(LoopbackTest, UnreachableCoordinatorGivesUpAfterRetries) {
    EventLoop loop{kLoopback};
    // Grab a free port and release it so nothing listens there.
    Endpoint dead;
    {
        EventLoop probe{kLoopback};
        auto s = probe.open_socket([](SocketId, const Endpoint&, ByteView) {});
        dead = probe.local_endpoint(*s);
    }
    const Identity id = Identity::generate();
    NodeService::Options o;
    o.node_id = "lonely";
    o.coord = dead;
    o.coord_secondary = dead;
    o.retry_wait = 20 * kMicrosPerMilli;
    NodeService n(loop, id, o);
    const Micros t0 = loop.now();
    EXPECT_FALSE(n.start());
    EXPECT_EQ(n.status(), NodeService::Status::coord_unreachable);
    EXPECT_GE(loop.now() - t0, 2 * o.retry_wait);
}

TEST(LineConnectionTest, OversizedLinesAreRejectedAndTheStreamRecovers) {
    Loopback w;
    auto conn = LineConnection::connect(w.loop, w.coord.stream_endpoint(), kMicrosPerSecond, kMaxLineBytes);
    ASSERT_TRUE(conn);
    std::vector<std::string> lines;
    conn->on_line([&](const std::string& l) { lines.push_back(l); });
    conn->send_line(std::string(3 * kMaxLineBytes, 'x'));
    conn->send_line(wire::ping_msg(5));
    ASSERT_TRUE(w.loop.run_until([&] { return lines.size() >= 2; }, 5 * kMicrosPerSecond));
    EXPECT_NE(lines[0].find("line-too-long"), std::string::npos) << lines[0];
    EXPECT_NE(lines[1].find("pong"), std::string::npos) << lines[1];
}
