#include "bdmesh/address.hpp"
#include "bdmesh/common.hpp"

#include <sodium.h>

#include <algorithm>
#include <charconv>
#include <cstdio>

namespace bdmesh {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::invalid_parameters: return "invalid-parameters";
        case ErrorCode::unreachable_target: return "unreachable-target";
        case ErrorCode::ports_exhausted: return "ports-exhausted";
        case ErrorCode::unsupported_combination: return "unsupported-combination";
        case ErrorCode::node_kind_mismatch: return "node-kind-mismatch";
        case ErrorCode::overlapping_subnets: return "overlapping-subnets";
        case ErrorCode::no_route: return "no-route";
        case ErrorCode::invalid_scenario: return "invalid-scenario";
        case ErrorCode::protocol: return "protocol";
    }
    return "unknown";
}

std::string to_hex(ByteView data) {
    std::string out(data.size() * 2 + 1, '\0');
    sodium_bin2hex(out.data(), out.size(), data.data(), data.size());
    out.pop_back();
    return out;
}

Bytes from_hex(std::string_view hex) {
    Bytes out(hex.size() / 2);
    std::size_t len = 0;
    const char* end = nullptr;
    if (hex.size() % 2 != 0 ||
        sodium_hex2bin(out.data(), out.size(), hex.data(), hex.size(), nullptr, &len, &end) != 0 ||
        end != hex.data() + hex.size()) {
        throw Error(ErrorCode::protocol, "malformed hex");
    }
    out.resize(len);
    return out;
}

std::string to_base64(ByteView data) {
    const auto variant = sodium_base64_VARIANT_ORIGINAL;
    std::string out(sodium_base64_ENCODED_LEN(data.size(), variant), '\0');
    sodium_bin2base64(out.data(), out.size(), data.data(), data.size(), variant);
    out.resize(out.size() - 1);
    return out;
}

Bytes from_base64(std::string_view b64) {
    Bytes out(b64.size() / 4 * 3 + 3);
    std::size_t len = 0;
    const char* end = nullptr;
    if (sodium_base642bin(out.data(), out.size(), b64.data(), b64.size(), nullptr, &len, &end,
                          sodium_base64_VARIANT_ORIGINAL) != 0 ||
        end != b64.data() + b64.size()) {
        throw Error(ErrorCode::protocol, "malformed base64");
    }
    out.resize(len);
    return out;
}

std::string sha256_hex(ByteView data) {
    std::uint8_t digest[crypto_hash_sha256_BYTES];
    crypto_hash_sha256(digest, data.data(), data.size());
    return to_hex(digest);
}

std::string Ipv4::to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%u.%u.%u.%u", value >> 24, (value >> 16) & 0xff, (value >> 8) & 0xff,
                  value & 0xff);
    return buf;
}

std::optional<Ipv4> Ipv4::parse(std::string_view text) {
    std::uint32_t value = 0;
    const char* p = text.data();
    const char* end = text.data() + text.size();
    for (int octet = 0; octet < 4; ++octet) {
        unsigned part = 0;
        auto [next, ec] = std::from_chars(p, end, part);
        if (ec != std::errc{} || next == p || part > 255) return std::nullopt;
        value = (value << 8) | part;
        p = next;
        if (octet < 3) {
            if (p == end || *p != '.') return std::nullopt;
            ++p;
        }
    }
    if (p != end) return std::nullopt;
    return Ipv4{value};
}

std::string Endpoint::to_string() const { return ip.to_string() + ":" + std::to_string(port); }

std::optional<Endpoint> Endpoint::parse(std::string_view text) {
    const auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    auto ip = Ipv4::parse(text.substr(0, colon));
    if (!ip) return std::nullopt;
    unsigned port = 0;
    const auto digits = text.substr(colon + 1);
    auto [next, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
    if (ec != std::errc{} || next != digits.data() + digits.size() || digits.empty() || port > 65535) {
        return std::nullopt;
    }
    return Endpoint{*ip, static_cast<std::uint16_t>(port)};
}

Cidr::Cidr(Ipv4 network, int prefix_len) : prefix_len_(prefix_len) {
    if (prefix_len < 0 || prefix_len > 32) throw Error(ErrorCode::invalid_parameters, "prefix length out of range");
    network_ = Ipv4{network.value & mask()};
}

std::uint32_t Cidr::mask() const {
    return prefix_len_ == 0 ? 0u : (~std::uint32_t{0} << (32 - prefix_len_));
}

std::optional<Cidr> Cidr::parse(std::string_view text) {
    const auto slash = text.find('/');
    if (slash == std::string_view::npos) return std::nullopt;
    auto ip = Ipv4::parse(text.substr(0, slash));
    if (!ip) return std::nullopt;
    int len = -1;
    const auto digits = text.substr(slash + 1);
    auto [next, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), len);
    if (ec != std::errc{} || next != digits.data() + digits.size() || len < 0 || len > 32) return std::nullopt;
    return Cidr(*ip, len);
}

bool Cidr::contains(Ipv4 addr) const { return (addr.value & mask()) == network_.value; }

bool Cidr::overlaps(const Cidr& other) const {
    const int shorter = std::min(prefix_len_, other.prefix_len_);
    const std::uint32_t m = shorter == 0 ? 0u : (~std::uint32_t{0} << (32 - shorter));
    return (network_.value & m) == (other.network_.value & m);
}

Ipv4 Cidr::first_host() const {
    if (prefix_len_ >= 31) return network_;
    return Ipv4{network_.value + 1};
}

std::string Cidr::to_string() const { return network_.to_string() + "/" + std::to_string(prefix_len_); }

}  // namespace bdmesh
