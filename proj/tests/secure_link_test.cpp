#include "bdmesh/secure_link.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace bdmesh;

namespace {

const SessionId kSession = SessionId::from_value(0xfeedfacecafebeefULL);

struct Pair {
    Identity alice = Identity::from_seed(1);
    Identity bob = Identity::from_seed(2);
};

std::pair<SessionKeys, SessionKeys> handshake(const Pair& p) {
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 10);
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 11);
    const auto hs2 = resp.respond(init.hello());
    EXPECT_TRUE(hs2);
    EXPECT_TRUE(init.finish(*hs2));
    return {*init.keys(), *resp.keys()};
}

}  // namespace

TEST(IdentityTest, SeededIdentityIsStable) {
    EXPECT_EQ(Identity::from_seed(7).public_key(), Identity::from_seed(7).public_key());
    EXPECT_NE(Identity::from_seed(7).public_key(), Identity::from_seed(8).public_key());
    const Identity id = Identity::generate();
    EXPECT_EQ(Identity::from_seed_bytes(id.seed_bytes()).public_key(), id.public_key());
}

TEST(IdentityTest, SignVerify) {
    const Identity id = Identity::from_seed(3);
    const Bytes msg = to_bytes("hello");
    const Bytes sig = id.sign(msg);
    EXPECT_TRUE(Identity::verify(id.public_key(), msg, sig));
    EXPECT_FALSE(Identity::verify(id.public_key(), to_bytes("hellp"), sig));
    EXPECT_FALSE(Identity::verify(Identity::from_seed(4).public_key(), msg, sig));
}

TEST(HandshakeTest, HonestPairAgrees) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    EXPECT_EQ(ki.send, kr.recv);
    EXPECT_EQ(ki.recv, kr.send);
    EXPECT_NE(ki.send, ki.recv);
    SessionKeys mirrored{kr.recv, kr.send};
    EXPECT_EQ(ki.fingerprint(), mirrored.fingerprint());
}

TEST(HandshakeTest, MessagesHaveFixedSize) {
    Pair p;
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 1);
    EXPECT_EQ(init.hello().size(), Handshake::kMessageSize);
    EXPECT_EQ(init.hello()[0], kSuiteX25519ChaChaPoly);
    EXPECT_EQ(init.hello(), init.hello());
}

TEST(HandshakeTest, FreshEphemeralsGiveFreshKeys) {
    Pair p;
    Handshake i1(p.alice, p.bob.public_key(), kSession, true);
    Handshake r1(p.bob, p.alice.public_key(), kSession, false);
    ASSERT_TRUE(i1.finish(*r1.respond(i1.hello())));
    Handshake i2(p.alice, p.bob.public_key(), kSession, true);
    Handshake r2(p.bob, p.alice.public_key(), kSession, false);
    ASSERT_TRUE(i2.finish(*r2.respond(i2.hello())));
    EXPECT_NE(i1.keys()->send, i2.keys()->send);
}

TEST(HandshakeTest, SubstitutedInitiatorKeyFailsOnIdentity) {
    Pair p;
    const Identity mallory = Identity::from_seed(66);
    Handshake attacker(mallory, p.bob.public_key(), kSession, true, 1);
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 2);
    EXPECT_FALSE(resp.respond(attacker.hello()));
    EXPECT_EQ(resp.error(), HandshakeError::identity);
    EXPECT_FALSE(resp.done());
}

TEST(HandshakeTest, SubstitutedResponderKeyFailsOnIdentity) {
    Pair p;
    const Identity mallory = Identity::from_seed(66);
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 1);
    // Mallory cannot accept a hello signed for bob...
    Handshake fake(mallory, p.alice.public_key(), kSession, false, 2);
    EXPECT_FALSE(fake.respond(init.hello()));
    // ...and splicing her key into a genuine response is caught by pinning.
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 3);
    Bytes spliced = *resp.respond(init.hello());
    std::copy(mallory.public_key().begin(), mallory.public_key().end(), spliced.begin() + 41);
    EXPECT_FALSE(init.finish(spliced));
    EXPECT_EQ(init.error(), HandshakeError::identity);
}

TEST(HandshakeTest, TamperedSignatureFails) {
    Pair p;
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 1);
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 2);
    Bytes hs1 = init.hello();
    hs1[20] ^= 0x01;  // inside the ephemeral key, covered by the signature
    EXPECT_FALSE(resp.respond(hs1));
    EXPECT_EQ(resp.error(), HandshakeError::identity);
}

TEST(HandshakeTest, StaleSessionIsRejected) {
    Pair p;
    const SessionId old_session = SessionId::from_value(1);
    Handshake old_init(p.alice, p.bob.public_key(), old_session, true, 1);
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 2);
    EXPECT_FALSE(resp.respond(old_init.hello()));
    EXPECT_EQ(resp.error(), HandshakeError::session);
}

TEST(HandshakeTest, ReplayedTranscriptFromOldSessionFails) {
    Pair p;
    const SessionId old_session = SessionId::from_value(1);
    Handshake old_init(p.alice, p.bob.public_key(), old_session, true, 1);
    Handshake old_resp(p.bob, p.alice.public_key(), old_session, false, 2);
    const Bytes old_hs2 = *old_resp.respond(old_init.hello());

    Handshake init(p.alice, p.bob.public_key(), kSession, true, 3);
    EXPECT_FALSE(init.finish(old_hs2));
    EXPECT_EQ(init.error(), HandshakeError::session);
}

TEST(HandshakeTest, MalformedMessages) {
    Pair p;
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 2);
    EXPECT_FALSE(resp.respond(Bytes(10, 0)));
    EXPECT_EQ(resp.error(), HandshakeError::malformed);
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 1);
    Bytes bad_suite = init.hello();
    bad_suite[0] = 0x02;
    EXPECT_FALSE(resp.respond(bad_suite));
    EXPECT_EQ(resp.error(), HandshakeError::malformed);
}

TEST(HandshakeTest, DuplicateHelloGetsSameResponse) {
    Pair p;
    Handshake init(p.alice, p.bob.public_key(), kSession, true, 1);
    Handshake resp(p.bob, p.alice.public_key(), kSession, false, 2);
    const auto first = resp.respond(init.hello());
    const auto second = resp.respond(init.hello());
    ASSERT_TRUE(first && second);
    EXPECT_EQ(*first, *second);
    ASSERT_TRUE(init.finish(*first));
    EXPECT_TRUE(init.finish(*second));
}

// ---------------------------------------------------------------------------
// Framing

TEST(SecureChannelTest, RoundTripsEmptyAndFullPayloads) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    SecureChannel b(kr, kSession);
    for (std::size_t size : {std::size_t{0}, std::size_t{1}, std::size_t{1200}}) {
        Bytes pt(size);
        for (std::size_t i = 0; i < size; ++i) pt[i] = static_cast<std::uint8_t>(i);
        const Bytes frame = a.seal(pt);
        EXPECT_EQ(frame.size(), size + SecureChannel::kOverhead);
        Bytes out;
        ASSERT_EQ(b.open(frame, out), OpenResult::ok);
        EXPECT_EQ(out, pt);
    }
    Bytes out;
    ASSERT_EQ(a.open(b.seal(to_bytes("back")), out), OpenResult::ok);
    EXPECT_EQ(to_string(out), "back");
}

TEST(SecureChannelTest, FrameLayout) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    a.seal(Bytes{});
    const Bytes frame = a.seal(to_bytes("x"));
    EXPECT_EQ(to_hex(ByteView(frame).subspan(0, 8)), kSession.hex());
    EXPECT_EQ(get_u64(frame, 8), 1u);
}

TEST(SecureChannelTest, AnyBitFlipFailsAuthentication) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    const Bytes frame = a.seal(to_bytes("secret payload"));
    for (std::size_t byte = 8; byte < frame.size(); ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
            SecureChannel b(kr, kSession);
            Bytes bad = frame;
            bad[byte] ^= static_cast<std::uint8_t>(1u << bit);
            Bytes out;
            EXPECT_EQ(b.open(bad, out), OpenResult::auth_failure) << byte << ":" << bit;
            EXPECT_TRUE(out.empty());
            EXPECT_EQ(b.rejected(), 1u);
        }
    }
}

TEST(SecureChannelTest, WrongChannelOrShortFrameIsMalformed) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    SecureChannel other(kr, SessionId::from_value(9));
    Bytes out;
    EXPECT_EQ(other.open(a.seal(to_bytes("x")), out), OpenResult::malformed);
    SecureChannel b(kr, kSession);
    EXPECT_EQ(b.open(Bytes(20, 0), out), OpenResult::malformed);
}

TEST(SecureChannelTest, ReplayIsRejected) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    SecureChannel b(kr, kSession);
    std::vector<Bytes> frames;
    for (int i = 0; i < 8; ++i) frames.push_back(a.seal(to_bytes("m" + std::to_string(i))));
    Bytes out;
    for (int i = 0; i < 5; ++i) ASSERT_EQ(b.open(frames[static_cast<std::size_t>(i)], out), OpenResult::ok);
    ASSERT_EQ(b.open(frames[5], out), OpenResult::ok);
    EXPECT_EQ(b.open(frames[5], out), OpenResult::replay);
    // Out of order inside the window is fine, once.
    ASSERT_EQ(b.open(frames[7], out), OpenResult::ok);
    ASSERT_EQ(b.open(frames[6], out), OpenResult::ok);
    EXPECT_EQ(b.open(frames[6], out), OpenResult::replay);
}

TEST(SecureChannelTest, FramesOlderThanTheWindowOverflow) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    SecureChannel b(kr, kSession);
    const Bytes old = a.seal(to_bytes("old"));
    std::vector<Bytes> later;
    for (int i = 0; i < 70; ++i) later.push_back(a.seal(to_bytes("n")));
    Bytes out;
    ASSERT_EQ(b.open(later.back(), out), OpenResult::ok);
    EXPECT_EQ(b.open(old, out), OpenResult::window_overflow);
    EXPECT_EQ(b.open(later[70 - 64], out), OpenResult::ok);
    EXPECT_EQ(b.open(later[70 - 65], out), OpenResult::window_overflow);
}

TEST(SecureChannelTest, ForgedFrameDoesNotPoisonTheWindow) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    SecureChannel b(kr, kSession);
    const Bytes genuine = a.seal(to_bytes("x"));
    Bytes forged = genuine;
    put_u64(forged, 0);  // junk tail changes the tag
    forged.resize(genuine.size());
    forged[8 + 7] = 0x50;  // far-future counter
    Bytes out;
    EXPECT_EQ(b.open(forged, out), OpenResult::auth_failure);
    EXPECT_EQ(b.open(genuine, out), OpenResult::ok);
}

TEST(SecureChannelTest, CountersNeverRepeat) {
    Pair p;
    const auto [ki, kr] = handshake(p);
    SecureChannel a(ki, kSession);
    std::set<std::uint64_t> counters;
    for (int i = 0; i < 1000; ++i) counters.insert(get_u64(a.seal(Bytes{}), 8));
    EXPECT_EQ(counters.size(), 1000u);
    EXPECT_EQ(a.next_send_counter(), 1000u);
}

TEST(PlainFrameTest, LengthPrefix) {
    const Bytes frame = plain_frame(to_bytes("MARK"));
    EXPECT_EQ(to_hex(frame), "00044d41524b");
    EXPECT_EQ(open_plain_frame(frame), to_bytes("MARK"));
    EXPECT_FALSE(open_plain_frame(Bytes{0x00, 0x05, 0x41}));
    EXPECT_FALSE(open_plain_frame(Bytes{0x00}));
}
