#pragma once

#include "bdmesh/common.hpp"
#include "bdmesh/traversal.hpp"

#include <array>
#include <cstdint>
#include <optional>
#include <string>

namespace bdmesh {

/// Single supported suite: X25519 key agreement, Ed25519 signatures,
/// BLAKE2b key derivation, ChaCha20-Poly1305 (IETF) framing.
constexpr std::uint8_t kSuiteX25519ChaChaPoly = 0x01;

using PublicKey = std::array<std::uint8_t, 32>;

/// Long-term Ed25519 signing identity of a node.
class Identity {
public:
    static Identity generate();
    /// Deterministic identity, used by the simulator.
    static Identity from_seed(std::uint64_t seed);
    /// 32-byte seed as stored in a key file.
    static Identity from_seed_bytes(ByteView seed);

    const PublicKey& public_key() const { return public_; }
    std::string public_key_b64() const { return to_base64(public_); }
    Bytes seed_bytes() const;
    Bytes sign(ByteView message) const;
    static bool verify(const PublicKey& key, ByteView message, ByteView signature);

private:
    PublicKey public_{};
    std::array<std::uint8_t, 64> secret_{};
};

struct SessionKeys {
    std::array<std::uint8_t, 32> send{};
    std::array<std::uint8_t, 32> recv{};

    /// Short digest for tests to compare both ends without exposing keys.
    std::string fingerprint() const;
};

enum class HandshakeError { none, identity, session, malformed, timeout };
std::string_view to_string(HandshakeError e);

/// Two-message authenticated ephemeral key agreement bound to both pinned
/// identities and the session id.
///
/// HS1 = suite | session | eph_i | id_i | sig_i("bdmesh-hs1" | suite | session | eph_i | id_i | id_r)
/// HS2 = suite | session | eph_r | id_r | sig_r("bdmesh-hs2" | HS1 | eph_r | id_r)
class Handshake {
public:
    static constexpr std::size_t kMessageSize = 1 + 8 + 32 + 32 + 64;

    /// `ephemeral_seed` makes the ephemeral key reproducible in simulation;
    /// without it the key comes from the system RNG.
    Handshake(const Identity& self, PublicKey pinned_peer, SessionId session, bool initiator,
              std::optional<std::uint64_t> ephemeral_seed = std::nullopt);

    bool initiator() const { return initiator_; }
    /// Initiator: the HS1 body. Identical on every call.
    const Bytes& hello() const { return hs1_; }
    /// Responder: consumes HS1 and returns HS2. A repeat of the same HS1
    /// returns the same HS2.
    std::optional<Bytes> respond(ByteView hs1);
    /// Initiator: consumes HS2.
    bool finish(ByteView hs2);

    bool done() const { return keys_.has_value(); }
    const std::optional<SessionKeys>& keys() const { return keys_; }
    HandshakeError error() const { return error_; }
    const Bytes& response() const { return hs2_; }

private:
    bool check_header(ByteView msg);
    void derive(const std::array<std::uint8_t, 32>& peer_ephemeral, ByteView transcript);

    const Identity& self_;
    PublicKey peer_;
    SessionId session_;
    bool initiator_;
    std::array<std::uint8_t, 32> eph_public_{};
    std::array<std::uint8_t, 32> eph_secret_{};
    Bytes hs1_;
    Bytes hs2_;
    std::optional<SessionKeys> keys_;
    HandshakeError error_ = HandshakeError::none;
};

enum class OpenResult { ok, auth_failure, replay, window_overflow, malformed };
std::string_view to_string(OpenResult r);

/// Authenticated framing over one direction pair of session keys.
/// Frame = channel id (8) | counter (8, big-endian) | ciphertext | tag (16).
class SecureChannel {
public:
    static constexpr std::size_t kHeaderSize = 16;
    static constexpr std::size_t kTagSize = 16;
    static constexpr std::size_t kOverhead = kHeaderSize + kTagSize;
    static constexpr std::uint64_t kReplayWindow = 64;

    SecureChannel(const SessionKeys& keys, SessionId channel);

    Bytes seal(ByteView plaintext);
    OpenResult open(ByteView frame, Bytes& plaintext);

    std::uint64_t next_send_counter() const { return send_counter_; }
    std::uint64_t rejected() const { return rejected_; }

private:
    SessionKeys keys_;
    SessionId channel_;
    std::uint64_t send_counter_ = 0;
    std::uint64_t highest_ = 0;
    std::uint64_t window_ = 0;  // bit i set: counter highest - i seen
    bool any_ = false;
    std::uint64_t rejected_ = 0;
};

/// Frames for links without encryption: 2-byte big-endian length, payload.
Bytes plain_frame(ByteView payload);
std::optional<Bytes> open_plain_frame(ByteView frame);

}  // namespace bdmesh
