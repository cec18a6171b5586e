#include "bdmesh/secure_link.hpp"

#include <sodium.h>

#include <algorithm>
#include <cstring>

namespace bdmesh {

namespace {

void ensure_sodium() {
    static const bool ready = sodium_init() >= 0;
    if (!ready) throw Error(ErrorCode::protocol, "libsodium failed to initialize");
}

void append(Bytes& out, ByteView data) { out.insert(out.end(), data.begin(), data.end()); }

void append(Bytes& out, std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }

std::array<std::uint8_t, 32> hash32(ByteView data) {
    std::array<std::uint8_t, 32> out{};
    crypto_generichash(out.data(), out.size(), data.data(), data.size(), nullptr, 0);
    return out;
}

std::array<std::uint8_t, 32> seed_from_u64(std::string_view label, std::uint64_t seed) {
    Bytes material;
    append(material, label);
    put_u64(material, seed);
    return hash32(material);
}

// Offsets inside a handshake message.
constexpr std::size_t kSuiteAt = 0;
constexpr std::size_t kSessionAt = 1;
constexpr std::size_t kEphAt = 9;
constexpr std::size_t kIdAt = 41;
constexpr std::size_t kSigAt = 73;

template <std::size_t N>
std::array<std::uint8_t, N> slice(ByteView data, std::size_t at) {
    std::array<std::uint8_t, N> out{};
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(at), N, out.begin());
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Identity

Identity Identity::generate() {
    ensure_sodium();
    Identity id;
    crypto_sign_keypair(id.public_.data(), id.secret_.data());
    return id;
}

Identity Identity::from_seed(std::uint64_t seed) {
    const auto bytes = seed_from_u64("bdmesh-identity", seed);
    return from_seed_bytes(bytes);
}

Identity Identity::from_seed_bytes(ByteView seed) {
    ensure_sodium();
    if (seed.size() != crypto_sign_SEEDBYTES) throw Error(ErrorCode::invalid_parameters, "identity seed must be 32 bytes");
    Identity id;
    crypto_sign_seed_keypair(id.public_.data(), id.secret_.data(), seed.data());
    return id;
}

Bytes Identity::seed_bytes() const {
    Bytes seed(crypto_sign_SEEDBYTES);
    crypto_sign_ed25519_sk_to_seed(seed.data(), secret_.data());
    return seed;
}

Bytes Identity::sign(ByteView message) const {
    Bytes sig(crypto_sign_BYTES);
    crypto_sign_detached(sig.data(), nullptr, message.data(), message.size(), secret_.data());
    return sig;
}

bool Identity::verify(const PublicKey& key, ByteView message, ByteView signature) {
    ensure_sodium();
    if (signature.size() != crypto_sign_BYTES) return false;
    return crypto_sign_verify_detached(signature.data(), message.data(), message.size(), key.data()) == 0;
}

std::string SessionKeys::fingerprint() const {
    Bytes both(send.begin(), send.end());
    both.insert(both.end(), recv.begin(), recv.end());
    return sha256_hex(both).substr(0, 16);
}

// ---------------------------------------------------------------------------
// Handshake

std::string_view to_string(HandshakeError e) {
    switch (e) {
        case HandshakeError::none: return "none";
        case HandshakeError::identity: return "identity";
        case HandshakeError::session: return "session";
        case HandshakeError::malformed: return "malformed";
        case HandshakeError::timeout: return "timeout";
    }
    return "none";
}

Handshake::Handshake(const Identity& self, PublicKey pinned_peer, SessionId session, bool initiator,
                     std::optional<std::uint64_t> ephemeral_seed)
    : self_(self), peer_(pinned_peer), session_(session), initiator_(initiator) {
    ensure_sodium();
    if (ephemeral_seed) {
        Bytes label;
        append(label, std::string_view("bdmesh-ephemeral"));
        put_u64(label, *ephemeral_seed);
        append(label, session_.bytes);
        eph_secret_ = hash32(label);
    } else {
        randombytes_buf(eph_secret_.data(), eph_secret_.size());
    }
    crypto_scalarmult_base(eph_public_.data(), eph_secret_.data());

    if (initiator_) {
        Bytes signed_part;
        append(signed_part, std::string_view("bdmesh-hs1"));
        signed_part.push_back(kSuiteX25519ChaChaPoly);
        append(signed_part, session_.bytes);
        append(signed_part, eph_public_);
        append(signed_part, self_.public_key());
        append(signed_part, peer_);
        hs1_.push_back(kSuiteX25519ChaChaPoly);
        append(hs1_, session_.bytes);
        append(hs1_, eph_public_);
        append(hs1_, self_.public_key());
        append(hs1_, self_.sign(signed_part));
    }
}

bool Handshake::check_header(ByteView msg) {
    if (msg.size() != kMessageSize || msg[kSuiteAt] != kSuiteX25519ChaChaPoly) {
        error_ = HandshakeError::malformed;
        return false;
    }
    if (!std::equal(session_.bytes.begin(), session_.bytes.end(), msg.begin() + kSessionAt)) {
        error_ = HandshakeError::session;
        return false;
    }
    if (slice<32>(msg, kIdAt) != peer_) {
        error_ = HandshakeError::identity;
        return false;
    }
    return true;
}

std::optional<Bytes> Handshake::respond(ByteView hs1) {
    if (initiator_) return std::nullopt;
    if (done()) {
        if (hs1.size() == hs1_.size() && std::equal(hs1.begin(), hs1.end(), hs1_.begin())) return hs2_;
        return std::nullopt;
    }
    if (!check_header(hs1)) return std::nullopt;

    Bytes signed_part;
    append(signed_part, std::string_view("bdmesh-hs1"));
    append(signed_part, hs1.subspan(0, kSigAt));
    append(signed_part, self_.public_key());
    if (!Identity::verify(peer_, signed_part, hs1.subspan(kSigAt))) {
        error_ = HandshakeError::identity;
        return std::nullopt;
    }

    hs1_.assign(hs1.begin(), hs1.end());
    Bytes transcript = hs1_;
    append(transcript, eph_public_);
    append(transcript, self_.public_key());

    Bytes to_sign;
    append(to_sign, std::string_view("bdmesh-hs2"));
    append(to_sign, transcript);

    hs2_.clear();
    hs2_.push_back(kSuiteX25519ChaChaPoly);
    append(hs2_, session_.bytes);
    append(hs2_, eph_public_);
    append(hs2_, self_.public_key());
    append(hs2_, self_.sign(to_sign));

    derive(slice<32>(hs1, kEphAt), transcript);
    if (!done()) return std::nullopt;
    return hs2_;
}

bool Handshake::finish(ByteView hs2) {
    if (!initiator_) return false;
    if (done()) return hs2.size() == hs2_.size() && std::equal(hs2.begin(), hs2.end(), hs2_.begin());
    if (!check_header(hs2)) return false;

    Bytes transcript = hs1_;
    append(transcript, hs2.subspan(kEphAt, 64));
    Bytes to_verify;
    append(to_verify, std::string_view("bdmesh-hs2"));
    append(to_verify, transcript);
    if (!Identity::verify(peer_, to_verify, hs2.subspan(kSigAt))) {
        error_ = HandshakeError::identity;
        return false;
    }
    hs2_.assign(hs2.begin(), hs2.end());
    derive(slice<32>(hs2, kEphAt), transcript);
    return done();
}

void Handshake::derive(const std::array<std::uint8_t, 32>& peer_ephemeral, ByteView transcript) {
    std::array<std::uint8_t, 32> shared{};
    if (crypto_scalarmult(shared.data(), eph_secret_.data(), peer_ephemeral.data()) != 0) {
        error_ = HandshakeError::malformed;
        return;
    }
    const auto th = hash32(transcript);
    Bytes info;
    append(info, std::string_view("bdmesh-keys"));
    append(info, th);
    std::array<std::uint8_t, 64> okm{};
    crypto_generichash(okm.data(), okm.size(), info.data(), info.size(), shared.data(), shared.size());
    sodium_memzero(shared.data(), shared.size());

    SessionKeys keys;
    std::copy_n(okm.begin(), 32, (initiator_ ? keys.send : keys.recv).begin());
    std::copy_n(okm.begin() + 32, 32, (initiator_ ? keys.recv : keys.send).begin());
    sodium_memzero(okm.data(), okm.size());
    keys_ = keys;
    error_ = HandshakeError::none;
}

// ---------------------------------------------------------------------------
// SecureChannel

std::string_view to_string(OpenResult r) {
    switch (r) {
        case OpenResult::ok: return "ok";
        case OpenResult::auth_failure: return "auth-failure";
        case OpenResult::replay: return "replay";
        case OpenResult::window_overflow: return "window-overflow";
        case OpenResult::malformed: return "malformed";
    }
    return "malformed";
}

SecureChannel::SecureChannel(const SessionKeys& keys, SessionId channel) : keys_(keys), channel_(channel) {
    ensure_sodium();
}

namespace {

std::array<std::uint8_t, crypto_aead_chacha20poly1305_IETF_NPUBBYTES> nonce_for(std::uint64_t counter) {
    std::array<std::uint8_t, crypto_aead_chacha20poly1305_IETF_NPUBBYTES> nonce{};
    for (int i = 0; i < 8; ++i) nonce[4 + i] = static_cast<std::uint8_t>(counter >> (56 - 8 * i));
    return nonce;
}

}  // namespace

Bytes SecureChannel::seal(ByteView plaintext) {
    if (send_counter_ == UINT64_MAX) throw Error(ErrorCode::protocol, "send counter exhausted");
    const std::uint64_t counter = send_counter_++;
    Bytes frame(channel_.bytes.begin(), channel_.bytes.end());
    put_u64(frame, counter);
    frame.resize(kHeaderSize + plaintext.size() + kTagSize);
    const auto nonce = nonce_for(counter);
    unsigned long long clen = 0;
    crypto_aead_chacha20poly1305_ietf_encrypt(frame.data() + kHeaderSize, &clen, plaintext.data(), plaintext.size(),
                                              frame.data(), kHeaderSize, nullptr, nonce.data(), keys_.send.data());
    frame.resize(kHeaderSize + clen);
    return frame;
}

OpenResult SecureChannel::open(ByteView frame, Bytes& plaintext) {
    auto reject = [&](OpenResult r) {
        ++rejected_;
        return r;
    };
    if (frame.size() < kOverhead) return reject(OpenResult::malformed);
    if (!std::equal(channel_.bytes.begin(), channel_.bytes.end(), frame.begin())) return reject(OpenResult::malformed);
    const std::uint64_t counter = get_u64(frame, 8);
    if (any_ && counter <= highest_) {
        const std::uint64_t age = highest_ - counter;
        if (age >= kReplayWindow) return reject(OpenResult::window_overflow);
        if (window_ & (std::uint64_t{1} << age)) return reject(OpenResult::replay);
    }

    Bytes out(frame.size() - kOverhead);
    unsigned long long mlen = 0;
    const auto nonce = nonce_for(counter);
    if (crypto_aead_chacha20poly1305_ietf_decrypt(out.data(), &mlen, nullptr, frame.data() + kHeaderSize,
                                                  frame.size() - kHeaderSize, frame.data(), kHeaderSize, nonce.data(),
                                                  keys_.recv.data()) != 0)
        return reject(OpenResult::auth_failure);

    // Only authenticated frames move the window.
    if (!any_ || counter > highest_) {
        const std::uint64_t shift = any_ ? counter - highest_ : 0;
        window_ = shift >= kReplayWindow ? 0 : window_ << shift;
        window_ |= 1;
        highest_ = counter;
        any_ = true;
    } else {
        window_ |= std::uint64_t{1} << (highest_ - counter);
    }
    out.resize(mlen);
    plaintext = std::move(out);
    return OpenResult::ok;
}

Bytes plain_frame(ByteView payload) {
    if (payload.size() > 0xffff) throw Error(ErrorCode::invalid_parameters, "plain frame payload too large");
    Bytes out;
    out.reserve(payload.size() + 2);
    put_u16(out, static_cast<std::uint16_t>(payload.size()));
    append(out, payload);
    return out;
}

std::optional<Bytes> open_plain_frame(ByteView frame) {
    if (frame.size() < 2) return std::nullopt;
    const std::size_t len = get_u16(frame, 0);
    if (frame.size() != len + 2) return std::nullopt;
    return Bytes(frame.begin() + 2, frame.end());
}

}  // namespace bdmesh
